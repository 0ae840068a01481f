import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergevq.mergear import (
    PREFIX,
    PositionCache,
    build_causal_mask,
    cache_bound,
    decode_full_oracle,
    decode_raster,
    detect_duplicate,
    merge_bucket,
    simulate,
    token_source,
    trace_source,
)
from mergevq.numerics import RandomStream
from mergevq.tome import SourceMatrix
from mergevq.toymodel import full_forward, init_model


@pytest.fixture(scope="module")
def model():
    return init_model(0, vocab=16, embed_dim=16, layers=2, l_max=34)


def filled_cache(tokens, window=None):
    pc = PositionCache(window)
    row = 0
    for t, tok in enumerate(tokens):
        first = detect_duplicate(tok, pc, window, t)
        if first is None:
            pc.add(t, tok, row)
            row += 1
        else:
            pc.add_redundant(t, tok, first)
        pc.evict(t)
    return pc


# --- position cache and detection -------------------------------------------------


def test_detect_duplicate_examples():
    pc = filled_cache([4, 7, 4])
    assert detect_duplicate(7, pc) == 1
    assert detect_duplicate(4, pc) == 0  # points at the live first occurrence
    assert detect_duplicate(9, pc) is None


def test_detect_outside_window():
    pc = filled_cache([4, 1, 2, 3])
    assert detect_duplicate(4, pc, window=4, position=4) == 0
    assert detect_duplicate(4, pc, window=3, position=4) is None


def test_redundant_entries_track_owner():
    pc = filled_cache([3, 3, 3, 5])
    assert pc.entry(0).size == 3
    assert [e.redundant for e in pc.entries] == [False, True, True, False]
    assert [e.source for e in pc.entries] == [0, 0, 0, 3]
    assert len(pc.live()) == 2


def test_evict_drops_only_stale_redundant():
    pc = filled_cache([3, 3, 1, 2, 5, 6], window=2)
    assert all(not e.redundant for e in pc.entries)
    assert [e.position for e in pc.entries] == [0, 2, 3, 4, 5]


def test_position_cache_order_and_window_validation():
    pc = PositionCache()
    pc.add(0, 1, 0)
    with pytest.raises(ValueError):
        pc.add(0, 2, 1)
    with pytest.raises(ValueError):
        PositionCache(-1)


# --- masks and sources ----------------------------------------------------------


def test_mask_identity_source_is_plain_causal():
    mask = build_causal_mask(SourceMatrix.identity(4))
    np.testing.assert_array_equal(mask.allowed, np.tril(np.ones((4, 4), dtype=bool)))


def test_mask_hides_repeats():
    # positions 0 and 2 share a cluster
    mask = build_causal_mask(SourceMatrix([0, 1, 0, 2], 3))
    assert mask.keys_for(3).tolist() == [0, 1, 3]
    assert mask.keys_for(2).tolist() == [0, 1]
    assert mask.keys_for(0).tolist() == [0]


def test_mask_with_order():
    mask = build_causal_mask(SourceMatrix([0, 1, 0], 2), order=[2, 1, 0])
    # step 0 generates position 2 (cluster 0); step 2 (position 0) repeats it
    assert mask.keys_for(2).tolist() == [0, 1]
    with pytest.raises(ValueError):
        build_causal_mask(SourceMatrix([0, 1], 2), order=[0, 0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_mask_columns_are_first_occurrences(tokens):
    s = token_source(tokens)
    allowed = build_causal_mask(s).allowed
    assert allowed.sum(axis=1)[-1] == s.k
    for j in range(len(tokens)):
        assert allowed[-1, j] == (tokens.index(tokens[j]) == j)


def test_token_and_trace_source():
    s = token_source([5, 2, 5, 5, 9])
    assert s.assignment.tolist() == [0, 1, 0, 0, 2]
    assert trace_source([0, 1, 1, 3]) == SourceMatrix([0, 1, 1, 2], 3)


# --- decoding -------------------------------------------------------------------------


def test_zero_duplicates_matches_plain_decode(model):
    forced = list(range(16))
    res = decode_raster(model, 1, 0, 16, forced=forced)
    tokens, logits, _ = decode_full_oracle(model, 1, 0, 16, forced=forced)
    assert res.stats.duplicates == 0 and res.tokens == tokens
    assert res.stats.cache_len_trace == list(range(1, 17))
    for a, b in zip(res.stats.logits, logits):
        np.testing.assert_array_equal(a, b)


def test_forced_stub_cache_equals_unique(model):
    forced = [3, 3, 3, 7, 7, 1, 3, 1, 0, 0]
    res = decode_raster(model, 0, 0, len(forced), forced=forced)
    assert res.stats.cache_len == len(set(forced)) == 4
    assert res.stats.duplicates == len(forced) - 4
    assert res.stats.source() == token_source(forced)
    assert res.stats.kept_keys(len(forced) - 1) == [0, 3, 5, 8]


@pytest.mark.parametrize("window", [None, 0, 2, 5])
def test_compensated_matches_uncompressed(model, window):
    forced = RandomStream(7).integers(4, 30).tolist()
    res = decode_raster(model, 2, 1, 30, "compensated", window, forced=forced)
    tokens, logits, _ = decode_full_oracle(model, 2, 1, 30, forced=forced)
    assert res.tokens == tokens
    assert max(np.max(np.abs(a - b)) for a, b in zip(res.stats.logits, logits)) <= 1e-5
    assert res.stats.cache_len <= cache_bound(30, len(set(forced)), window)


def test_greedy_compensated_equivalence(model):
    out = simulate(model, seed=3, l=32, mode="compensated")
    assert out["equivalence"]
    assert len(out["tokens"]) == 32


def test_lossy_logits_equal_masked_full_forward(model):
    forced = [5, 5, 2, 5, 2, 9, 9, 1]
    res = decode_raster(model, 4, 3, len(forced), "lossy", forced=forced)
    image_mask = build_causal_mask(res.stats.source()).allowed
    n = PREFIX + len(forced)
    mask = np.tril(np.ones((n, n), dtype=bool))
    mask[PREFIX:, PREFIX:] &= image_mask
    inputs = [("class", 4), ("merge", 3)] + [("image", t) for t in forced]
    full = full_forward(model, inputs, mask=mask)
    # logits used to choose token t come from input PREFIX - 1 + t
    for t in range(len(forced)):
        np.testing.assert_allclose(res.stats.logits[t], full[PREFIX - 1 + t], atol=1e-9)


def test_lossy_terminates_with_unique_cache(model):
    res = decode_raster(model, 0, 0, 32, "lossy")
    assert len(res.tokens) == 32
    assert res.stats.cache_len == len(set(res.tokens))


def test_decode_argument_checks(model):
    with pytest.raises(ValueError):
        decode_raster(model, 0, 0, 8, mode="fast")
    with pytest.raises(ValueError):
        decode_raster(model, 0, 0, 33)


def test_sampled_decode_is_seed_deterministic(model):
    a = decode_raster(model, 0, 0, 12, rng=RandomStream(1), temperature=1.0)
    b = decode_raster(model, 0, 0, 12, rng=RandomStream(1), temperature=1.0)
    assert a.tokens == b.tokens


def test_cache_bound_examples():
    assert cache_bound(10, 3, None) == 3
    assert cache_bound(10, 3, 4) == 6
    assert cache_bound(10, 3, 0) == 10
    assert cache_bound(4, 10, None) == 4


def test_merge_bucket():
    assert merge_bucket(256, 256) == 15
    assert merge_bucket(1, 256) == 0
    assert merge_bucket(144, 256) == 8
    with pytest.raises(ValueError):
        merge_bucket(0, 256)
