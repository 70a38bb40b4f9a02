import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from kvshare.eval import perplexity
from kvshare.intra_compress import (CompressorConfig, accumulate_scores, evict, retained_positions)
from kvshare.kv_cache import LayerKvCache, SharingStrategy


def keep_oracle(scores, heavy, recent):
    """Enumerate the retained set straight from the rule."""
    n = len(scores)
    if n <= heavy + recent:
        return list(range(n))
    recent_set = list(range(n - recent, n))
    rest = list(range(n - recent))
    ranked = sorted(rest, key=lambda p: (-scores[p], p))
    return sorted(ranked[:heavy] + recent_set)


def test_accumulate_uniform():
    out = accumulate_scores(np.zeros(4, np.float32), np.full((1, 4), 0.25, np.float32))
    assert out.tolist() == [0.25] * 4


def test_accumulate_is_linear(rng):
    w = rng.random((2, 5)).astype(np.float32)
    once = accumulate_scores(np.zeros(5, np.float32), w)
    twice = accumulate_scores(once, w)
    np.testing.assert_allclose(twice, 2 * once, rtol=1e-6)


def test_accumulate_matches_loop(rng):
    w = rng.random((3, 10)).astype(np.float32)
    scores = rng.random(10).astype(np.float32)
    expected = [float(scores[p]) + sum(float(w[h, p]) for h in range(3)) for p in range(10)]
    np.testing.assert_allclose(accumulate_scores(scores, w), expected, atol=1e-6)


def test_accumulate_length_mismatch():
    with pytest.raises(ValueError):
        accumulate_scores(np.zeros(3, np.float32), np.zeros((1, 4), np.float32))


def _cache(n, scores):
    c = LayerKvCache(n_kv_heads=1, d_head=2, max_seq=16)
    c.scores = np.zeros(0, np.float32)
    k = np.arange(n * 2, dtype=np.float32).reshape(1, n, 2)
    c.append(k, -k)
    c.scores = np.asarray(scores, np.float32)
    return c


def test_evict_boundary_noop():
    c = _cache(3, [1, 2, 3])
    assert not evict(c, CompressorConfig(heavy=1, recent=2))
    assert c.len == 3


def test_evict_heavy_and_recent():
    c = _cache(4, [9, 1, 2, 0])
    evict(c, CompressorConfig(heavy=1, recent=1))
    assert c.len == 2
    assert c.keys[0].tolist() == [[0, 1], [6, 7]]          # positions 0 and 3
    assert c.values[0].tolist() == [[0, -1], [-6, -7]]
    assert c.scores.tolist() == [9, 0]


def test_evict_tie_break_keeps_low_positions():
    assert retained_positions(np.ones(5, np.float32), heavy=2, recent=1).tolist() == [0, 1, 4]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.integers(0, 6), st.integers(1, 6))
def test_retained_matches_oracle(scores, heavy, recent):
    s = np.asarray(scores, np.float32)
    assert retained_positions(s, heavy, recent).tolist() == keep_oracle(scores, heavy, recent)


def test_compressed_decode_bounds_and_alias_visibility():
    m = random_model()
    cfg = CompressorConfig(heavy=3, recent=4)
    caches = m.new_caches(SharingStrategy([(3, 1)]), cfg)
    m.forward_prefill([256, 1, 2], caches)
    seen = []
    for t in range(30):
        before = caches.kv_bytes()
        m.decode_step(t, caches)
        assert all(c.len <= cfg.budget + 1 for c in caches.owners())
        assert caches.storage(3) is caches.storage(1)
        seen.append(caches.storage(1).len)
    assert max(seen) == cfg.budget


def test_compression_never_grows_memory():
    m = random_model()
    strategy = SharingStrategy([(2, 0)])
    plain = m.new_caches(strategy)
    packed = m.new_caches(strategy, CompressorConfig(heavy=2, recent=3))
    for caches in (plain, packed):
        m.forward_prefill([256, 9, 8], caches)
    for t in range(20):
        m.decode_step(t, plain)
        m.decode_step(t, packed)
        assert packed.kv_bytes() <= plain.kv_bytes()


def test_disabled_compressor_is_bitwise_baseline():
    m = random_model()
    seq = [[256, *range(40, 70)]]
    off = CompressorConfig(heavy=2, recent=0, enabled=False)
    assert not off.active
    assert perplexity(m, seq, None, off) == perplexity(m, seq)
    caches = m.new_caches(None, off)
    assert caches.compressor is None
    assert np.array_equal(m.forward_prefill(seq[0], caches), m.forward_prefill(seq[0], m.new_caches()))


def test_from_flags():
    assert not CompressorConfig.from_flags(5, 0).active
    assert CompressorConfig.from_flags(5, 3).budget == 8
    with pytest.raises(ValueError):
        CompressorConfig(heavy=-1, recent=2)
