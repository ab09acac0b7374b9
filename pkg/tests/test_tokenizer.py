import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sysmoe import data
from sysmoe.numerics import ContractError, Tensor
from sysmoe.tokenizer import (EmbeddingTables, bin_center, decode_distribution, discretize, embed,
                              make_windows, one_hot, window_starts)


def test_discretize_examples():
    assert discretize(0.0, 256) == 0
    assert discretize(1.0, 256) == 255
    assert discretize(0.5, 256) == 128


def test_bin_center_examples():
    assert bin_center(0, 256) == 1 / 512
    assert bin_center(255, 256) == 511 / 512
    with pytest.raises(ContractError):
        bin_center(256, 256)
    with pytest.raises(ContractError):
        one_hot(-1, 4)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 300))
def test_discretize_monotone(a, b, K):
    lo, hi = min(a, b), max(a, b)
    assert discretize(lo, K) <= discretize(hi, K)
    assert 0 <= discretize(hi, K) < K


@given(st.floats(0, 1), st.integers(1, 512))
def test_roundtrip_bound(x, K):
    y = decode_distribution(one_hot(discretize(x, K), K))
    assert abs(y - x) <= 1 / (2 * K) + 1e-15


def test_decode_examples():
    assert decode_distribution(np.full(7, 1 / 7)) == pytest.approx(0.5, abs=1e-15)
    assert decode_distribution(one_hot(0, 256)) == 1 / 512
    p = np.zeros(256)
    p[0] = p[-1] = 0.5
    assert decode_distribution(p) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ContractError):
        decode_distribution(np.array([0.5, 0.6]))


def test_argmax_decode():
    p = np.array([0.1, 0.6, 0.3])
    assert decode_distribution(p, argmax=True) == bin_center(1, 3)


def _episode(T=5):
    eps = data.gen_pendulum(None, 1, T, 0.02, seed=0)
    return data.normalize(eps[0], data.compute_norm_stats(eps))


def _tables(K=8, d=8, T=5, seed=0):
    return EmbeddingTables.init(K, d, T, 6, np.random.default_rng(seed))


def _zero_except(tables, keep):
    for name, t in tables.named().items():
        if name not in keep:
            t.data[...] = 0.0
    return tables


def test_embed_value_only():
    ep = _episode()
    tables = _zero_except(_tables(), {"value_w"})
    grid = embed(ep, tables, None)
    bins = discretize(np.concatenate([ep.states, ep.actions], 1), 8)
    assert np.array_equal(grid.input_embeds.data, tables.value_w.data[bins])
    assert np.array_equal(grid.targets, bins[:, :2])


def test_embed_is_exactly_additive():
    ep = _episode()
    full = embed(ep, _tables(), None).input_embeds.data
    parts = 0.0
    for name in ("value_w", "time", "channel", "modality"):
        parts = parts + embed(ep, _zero_except(_tables(), {name}), None).input_embeds.data
    assert np.allclose(full, parts, atol=1e-15)


def test_embed_position_dependent():
    ep = _episode()
    tables = _zero_except(_tables(), {"time", "channel"})
    e = embed(ep, tables, None).input_embeds.data
    # token (t=1, m=2) vs (t=2, m=1): the same table rows in swapped roles
    direct = tables.time.data[1] + tables.channel.data[2]
    assert np.allclose(e[1, 2], direct) and not np.allclose(e[1, 2], e[2, 1])


def test_embed_struct_shared_and_required():
    ep = _episode()
    tables = _zero_except(_tables(), set())
    s = {"rod": np.arange(8.0)}
    e = embed(ep, tables, s).input_embeds.data
    assert np.array_equal(e[0, 0], e[0, 1])  # theta and omega share the rod node
    with pytest.raises(ValueError, match="rod"):
        embed(ep, tables, {"pivot": np.zeros(8)})


def test_embed_rejects_raw_values():
    ep = data.gen_pendulum(None, 1, 5, 0.02, seed=0)[0]
    with pytest.raises(ContractError):
        embed(ep, _tables(), None)


def test_windows():
    ep = data.pad_clip(_episode(12), 16)
    assert window_starts(ep.mask, 8) == [0, 1, 2, 3, 4, 5, 6, 7, 8]
    assert window_starts(ep.mask, 8, stride=4) == [0, 4, 8]
    b = make_windows([ep], 8, 16, np.zeros((3, 4), dtype=np.int64), stride=4)
    assert b.bins.shape == (3, 8, 2) and b.action_bins.shape == (3, 8, 1)
    assert not b.mask[2, 4:].any()
    with pytest.raises(ContractError):
        make_windows([ep], 8, 16, np.zeros((3, 4)), starts=[(0, 10)])
