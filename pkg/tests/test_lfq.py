import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mergevq.lfq import (
    CodebookStats,
    LfqCode,
    code_index,
    commitment_loss,
    commitment_loss_grad,
    entropy_penalty,
    entropy_terms,
    index_code,
    index_codes,
    quantize,
    record_usage,
    straight_through,
)

coords = st.floats(-5, 5, allow_nan=False, width=32)


def test_quantize_hand_example():
    idx, zq = quantize([[0.3, -1.2, 0.5, -0.1]])
    np.testing.assert_array_equal(zq, [[1, -1, 1, -1]])
    assert idx.tolist() == [5]


def test_index_5_round_trip():
    np.testing.assert_array_equal(index_code(5, 4), [1, -1, 1, -1])
    assert code_index([1, -1, 1, -1]) == 5
    assert LfqCode(5, 4).bits == (1, 0, 1, 0)


def test_zero_maps_to_plus_one():
    idx, zq = quantize(np.zeros((1, 3)))
    np.testing.assert_array_equal(zq, [[1, 1, 1]])
    assert idx.tolist() == [7]


def test_all_minus_is_zero_and_all_plus_is_max():
    assert code_index(-np.ones(18)) == 0
    assert code_index(np.ones(18)) == 2**18 - 1


def test_bijection_exhaustive_d4():
    every = index_codes(np.arange(16), 4)
    assert len({tuple(r) for r in every.tolist()}) == 16
    np.testing.assert_array_equal(quantize(every)[0], np.arange(16))


@given(st.integers(0, 2**18 - 1))
def test_index_code_inverse_d18(i):
    assert code_index(index_code(i, 18)) == i


@given(arrays(np.float32, (3, 6), elements=coords))
def test_quantize_idempotent(z):
    idx, zq = quantize(z)
    idx2, zq2 = quantize(zq)
    np.testing.assert_array_equal(zq, zq2)
    np.testing.assert_array_equal(idx, idx2)


def test_index_range_checks():
    with pytest.raises(ValueError):
        index_code(16, 4)
    with pytest.raises(ValueError):
        code_index([1, 0, -1])
    with pytest.raises(ValueError):
        quantize(np.ones((1, 63)))


def test_straight_through_forward_and_backward():
    z = np.array([[0.4, -2.0, 0.0]])
    fwd, back = straight_through(z)
    np.testing.assert_array_equal(fwd, [[1, -1, 1]])
    g = np.array([[0.1, -0.2, 3.0]])
    np.testing.assert_array_equal(back(g), g)


def test_commitment_loss_closed_form_and_fd():
    z = np.array([[0.3, -1.2, 0.5, -0.1]])
    _, zq = quantize(z)
    expected = ((0.7**2) + (0.2**2) + (0.5**2) + (0.9**2)) / 4
    assert math.isclose(commitment_loss(z, zq), expected, rel_tol=1e-12)
    grad = commitment_loss_grad(z, zq)
    h = 1e-6
    for j in range(4):
        e = np.zeros_like(z)
        e[0, j] = h
        fd = (commitment_loss(z + e, zq) - commitment_loss(z - e, zq)) / (2 * h)
        assert abs(fd - grad[0, j]) < 1e-6


def test_entropy_zero_latent_is_max():
    sample, codebook = entropy_terms(np.zeros((5, 4)))
    assert math.isclose(sample, 4 * math.log(2), rel_tol=1e-12)
    assert math.isclose(codebook, 4 * math.log(2), rel_tol=1e-9)
    assert abs(entropy_penalty(np.zeros((5, 4)))) < 1e-9


def test_entropy_confident_balanced_batch():
    # opposite confident rows: per-sample entropy ~0, codebook ~ d ln 2
    z = np.array([[20.0, -20.0], [-20.0, 20.0]])
    sample, codebook = entropy_terms(z)
    assert sample < 1e-12
    assert math.isclose(codebook, 2 * math.log(2), rel_tol=1e-9)


def test_entropy_matches_direct_formula():
    z = np.array([[0.3, -0.7], [1.1, 0.2], [-0.4, 0.0]])
    p = 1 / (1 + np.exp(-2 * z))
    h = lambda q: -(q * np.log(q) + (1 - q) * np.log(1 - q))  # noqa: E731
    sample, codebook = entropy_terms(z)
    assert math.isclose(sample, h(p).sum(1).mean(), rel_tol=1e-12)
    assert math.isclose(codebook, h(p.mean(0)).sum(), rel_tol=1e-12)


@given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)))
def test_entropy_bounds(z):
    sample, codebook = entropy_terms(z)
    assert -1e-12 <= sample <= 3 * math.log(2) + 1e-12
    assert -1e-12 <= codebook <= 3 * math.log(2) + 1e-12
    assert sample <= codebook + 1e-9  # concavity of H


def test_usage_against_set_oracle():
    rng = np.random.default_rng(3)
    stats = CodebookStats(6)
    seen = set()
    for _ in range(5):
        codes = rng.choice([-1.0, 1.0], size=(10, 6))
        record_usage(stats, codes)
        seen |= {code_index(c) for c in codes}
    assert stats.distinct == len(seen)
    assert stats.usage == len(seen) / 64


def test_usage_rejects_mismatch():
    with pytest.raises(ValueError):
        record_usage(CodebookStats(4), np.ones((2, 5)))
    with pytest.raises(ValueError):
        record_usage(CodebookStats(4), [16])
