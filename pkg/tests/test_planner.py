import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sysmoe import sim
from sysmoe.numerics import ContractError
from sysmoe.planner import (CostSpec, MPPIConfig, PlannerError, TruthOracle, default_cost,
                            forward_progress_reward, mppi_step, mppi_weights, run_episode,
                            sample_perturbations, trajectory_cost)


def test_weights_examples():
    assert np.allclose(mppi_weights(np.zeros(4), 0.25), 0.25)
    w = mppi_weights(np.array([0.0, 1.0]), 0.25)
    assert w[1] / w[0] == pytest.approx(np.exp(-4.0))
    w = mppi_weights(np.array([1.0, np.inf, np.nan]), 1.0)
    assert w.tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(PlannerError):
        mppi_weights(np.array([np.inf]), 1.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(-1e3, 1e3),
       st.floats(0.01, 10))
def test_weights_shift_invariant(costs, shift, lam):
    c = np.array(costs)
    a, b = mppi_weights(c, lam), mppi_weights(c + shift, lam)
    assert np.allclose(a, b, atol=1e-9) and a.sum() == pytest.approx(1.0)


def test_perturbations_are_per_sample_streams():
    a = sample_perturbations(MPPIConfig(horizon=5, samples=4, sigma=0.5, seed=3), 7, 2)
    b = sample_perturbations(MPPIConfig(horizon=5, samples=8, sigma=0.5, seed=3), 7, 2)
    assert np.array_equal(a, b[:4])
    assert not np.array_equal(a, sample_perturbations(MPPIConfig(5, 4, sigma=0.5, seed=3), 8, 2))


def test_config_validation():
    with pytest.raises(ContractError):
        MPPIConfig(lam=0)
    with pytest.raises(ContractError):
        MPPIConfig(sigma=(0.1, -1.0))
    with pytest.raises(ContractError):
        CostSpec(kind="bogus")
    with pytest.raises(ContractError):
        CostSpec(Q=np.array([-1.0]))


def test_goal_cost_and_progress():
    spec = CostSpec(kind="goal", Q=np.array([1.0, 2.0]), goal=np.zeros(2))
    states = np.array([[[1.0, 1.0], [0.0, 1.0]]])
    assert trajectory_cost(states, np.zeros((1, 2, 1)), spec, np.zeros(2))[0] == pytest.approx(5.0)
    assert forward_progress_reward(np.array([2.0]), np.array([1.0]), np.array([0.0])) == pytest.approx(1.0)
    assert forward_progress_reward(np.array([1.0]), np.array([2.0]), np.array([0.0])) == pytest.approx(-1.0)


def test_update_is_clamped_weighted_average():
    env = sim.DoubleIntegrator()
    cfg = MPPIConfig(horizon=6, samples=16, sigma=2.0, seed=1)
    a, shifted, info = mppi_step(np.array([1.0, 0.0]), np.zeros((6, 1)), TruthOracle(env),
                                 default_cost(env), cfg)
    assert np.all(np.abs(info.samples) <= 1.0)
    assert np.allclose(info.updated, np.tensordot(info.weights, info.samples, 1))
    assert np.array_equal(a, info.updated[0])
    assert np.array_equal(shifted[:-1], info.updated[1:]) and np.all(shifted[-1] == 0)


def test_nominal_length_checked():
    env = sim.DoubleIntegrator()
    with pytest.raises(ContractError):
        mppi_step(np.zeros(2), np.zeros((3, 1)), TruthOracle(env), default_cost(env), MPPIConfig(horizon=4))


def test_double_integrator_reaches_goal():
    env = sim.DoubleIntegrator()
    cfg = MPPIConfig(horizon=20, samples=64, lam=0.25, sigma=0.5)
    res = run_episode(env, TruthOracle(env), cfg, default_cost(env), T=300, seed=0)
    assert not res.diverged and res.final_distance < 0.05
    assert res.total_reward > 0


def test_linear_env_reaches_goal(tmp_path):
    env = sim.LinearEnv(0.9 * np.eye(2), 0.1 * np.eye(2), goal=[0.5, -0.5])
    cfg = MPPIConfig(horizon=16, samples=64, lam=0.25, sigma=0.5)
    res = run_episode(env, TruthOracle(env), cfg, default_cost(env), T=40, seed=1,
                      trace_path=tmp_path / "t.jsonl")
    assert res.final_distance < 0.3
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 40


def test_episode_is_deterministic():
    env = sim.DoubleIntegrator()
    cfg = MPPIConfig(horizon=8, samples=16, sigma=0.5)
    a = run_episode(env, TruthOracle(env), cfg, default_cost(env), T=20, seed=4, warmup=3)
    b = run_episode(env, TruthOracle(env), cfg, default_cost(env), T=20, seed=4, warmup=3)
    assert np.array_equal(a.actions, b.actions) and np.array_equal(a.states, b.states)
