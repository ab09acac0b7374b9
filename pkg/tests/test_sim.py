import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sysmoe import sim


def test_double_integrator_ballistic():
    env = sim.DoubleIntegrator(dt=0.1)
    nxt, _ = env.step(np.array([0.5, 2.0]), np.array([0.0]))
    assert nxt[1] == 2.0 and nxt[0] == pytest.approx(0.7)


def test_pendulum_equilibrium():
    env = sim.Pendulum()
    nxt, _ = env.step(np.array([0.0, 0.0]), np.array([0.0]))
    assert np.array_equal(nxt, [0.0, 0.0])


def test_control_cost_weight():
    assert sim.control_cost(np.array([1.0])) == pytest.approx(1e-3)
    assert sim.W_CTRL == 1e-3


def test_reward_is_progress_minus_control():
    env = sim.DoubleIntegrator(goal=0.0)
    s = np.array([1.0, -1.0])
    a = np.array([0.5])
    nxt, r = env.step(s, a)
    assert r == pytest.approx(env.progress(s, nxt) - 1e-3 * 0.25)


def test_clamp_counts():
    env = sim.DoubleIntegrator()
    env.step(np.zeros(2), np.array([3.0]))
    env.step(np.zeros(2), np.array([0.3]))
    assert env.clamp_count == 1
    a, _ = env.step(np.zeros(2), np.array([3.0]))
    b, _ = env.step(np.zeros(2), np.array([1.0]))
    assert np.array_equal(a, b)


def test_reset_defaults():
    di = sim.DoubleIntegrator()
    s = sim.reset(di, 3)
    assert -1 <= s[0] <= 1 and s[1] == 0.0
    assert np.array_equal(sim.reset(di, 3), s)
    assert np.array_equal(sim.Pendulum().reset(0), [np.pi, 0.0])


def test_step_dt_override_is_restored():
    env = sim.DoubleIntegrator(dt=0.02)
    a, _ = sim.step(env, np.array([0.0, 1.0]), np.array([0.0]), dt=0.5)
    assert a[0] == pytest.approx(0.5) and env.dt == 0.02


@given(st.floats(-np.pi, np.pi), st.floats(-5, 5), st.floats(-1, 1))
def test_step_is_pure_and_wraps(theta, omega, a):
    env = sim.Pendulum()
    s = np.array([theta, omega])
    x, r1 = env.step(s, np.array([a]))
    y, r2 = env.step(s, np.array([a]))
    assert np.array_equal(x, y) and r1 == r2
    assert -np.pi < x[0] <= np.pi


def test_wrap_angle():
    assert sim.wrap_angle(np.pi) == pytest.approx(np.pi)
    assert sim.wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert sim.wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)


def _swing(amp, steps):
    env = sim.Pendulum(dt=0.02)
    s = np.array([np.pi - amp, 0.0])
    e0 = env.energy(s)
    energies = []
    for _ in range(steps):
        s, _ = env.step(s, np.array([0.0]))
        energies.append(env.energy(s))
    return e0, np.array(energies)


@pytest.mark.parametrize("amp", [0.1, 0.3, 0.5])
def test_pendulum_energy_within_one_percent(amp):
    e0, energies = _swing(amp, 500)
    assert np.abs(energies - e0).max() <= 0.01 * abs(e0)


@pytest.mark.parametrize("amp", [0.5, 1.5, 2.5])
def test_pendulum_no_secular_drift(amp):
    # symplectic Euler oscillates around the true energy; windowed means stay put
    e0, energies = _swing(amp, 5000)
    swing = e0 + 9.81  # energy above the bottom of the well
    assert abs(energies[-500:].mean() - energies[:500].mean()) < 0.002 * swing


def test_linear_env_and_factory():
    env = sim.make_env("linear", dim=3)
    assert env.state_dim == env.action_dim == 3
    nxt = env.dynamics(np.ones(3), np.ones(3))
    assert np.allclose(nxt, 1.0)
    with pytest.raises(ValueError):
        sim.make_env("cartpole")
