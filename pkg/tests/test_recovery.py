import math

import numpy as np
import pytest

from mergevq.lfq import quantize
from mergevq.numerics import RandomStream
from mergevq.recovery import (
    PROB_EPS,
    RecoveryModel,
    SourceLogits,
    predict_source,
    recover_tokens,
    recovery_forward,
    source_loss,
    source_loss_grad,
)
from mergevq.tome import SourceMatrix


def small_model(l=6, d=4, seed=0):
    return RecoveryModel.init(l, d, RandomStream(seed), hidden=16)


def test_forward_shapes_and_row_softmax():
    model = small_model()
    _, zq = quantize(RandomStream(1).matrix(3, 4))
    out = recovery_forward(model, zq)
    assert out.scores.shape == (6, 3)
    np.testing.assert_allclose(out.probs.sum(1), 1.0, atol=1e-12)


def test_single_cluster_is_certain():
    model = small_model()
    out = recovery_forward(model, np.ones((1, 4)))
    np.testing.assert_array_equal(out.probs, np.ones((6, 1)))
    pred = predict_source(out)
    assert pred.source == SourceMatrix(np.zeros(6), 1)
    assert not pred.degenerate


def test_forward_rejects_bad_input():
    model = small_model()
    with pytest.raises(ValueError):
        recovery_forward(model, np.ones((0, 4)))
    with pytest.raises(ValueError):
        recovery_forward(model, np.ones((2, 5)))


def test_identity_blocks_score_query_against_codes():
    """With residual branches zeroed, scores reduce to (Q W_out) Z^T."""
    model = small_model(l=4, d=3)
    for w in [model.cross, *model.blocks]:
        w.wo[:] = 0
        w.w2[:] = 0
    z = np.array([[1, -1, 1], [-1, 1, 1]], dtype=np.float32)
    out = recovery_forward(model, z)
    expected = model.queries.astype(float) @ model.w_out.astype(float) @ z.T.astype(float)
    np.testing.assert_allclose(out.scores, expected, atol=1e-9)


def test_predict_tie_break_and_empty_rows():
    probs = np.array([[0.5, 0.5, 0.0], [0.2, 0.8, 0.0]])
    pred = predict_source(probs)
    assert pred.source.assignment.tolist() == [0, 1]
    assert pred.empty_clusters == (2,)
    assert pred.degenerate


def test_predict_fixed_point_of_truth():
    truth = SourceMatrix([0, 1, 1, 2, 0], 3)
    assert predict_source(truth.dense(np.float64).T).source == truth


def test_loss_uniform_two_clusters():
    # each entry contributes ln 2
    probs = np.full((3, 2), 0.5)
    truth = SourceMatrix([0, 1, 0], 2)
    assert math.isclose(source_loss(probs, truth), 6 * math.log(2), rel_tol=1e-12)
    np.testing.assert_allclose(source_loss_grad(probs, truth), [[-2, 2], [2, -2], [-2, 2]])


def test_loss_clamped_and_grad_zero_when_clamped():
    truth = SourceMatrix([0], 2)
    probs = np.array([[1.0, 0.0]])
    assert source_loss(probs, truth) == pytest.approx(-2 * math.log1p(-PROB_EPS), rel=1e-6)
    np.testing.assert_array_equal(source_loss_grad(probs, truth), [[0.0, 0.0]])
    wrong = np.array([[0.0, 1.0]])
    assert source_loss(wrong, truth) == pytest.approx(-2 * math.log(PROB_EPS), rel=1e-6)


def test_loss_grad_finite_difference():
    rng = np.random.default_rng(4)
    probs = rng.uniform(0.05, 0.95, size=(4, 3))
    truth = SourceMatrix([2, 0, 1, 1], 3)
    grad = source_loss_grad(probs, truth)
    h = 1e-6
    for i in range(4):
        for j in range(3):
            e = np.zeros_like(probs)
            e[i, j] = h
            fd = (source_loss(probs + e, truth) - source_loss(probs - e, truth)) / (2 * h)
            assert abs(fd - grad[i, j]) <= 1e-4 * max(1.0, abs(grad[i, j]))


def test_loss_accepts_logits_object_and_rejects_shape():
    probs = np.full((2, 2), 0.5)
    wrapped = SourceLogits(np.zeros((2, 2)), probs)
    truth = SourceMatrix([0, 1], 2)
    assert source_loss(wrapped, truth) == source_loss(probs, truth)
    with pytest.raises(ValueError):
        source_loss(probs, SourceMatrix([0, 1, 1], 2))


def test_recover_tokens_copies_owner_rows():
    z = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    out = recover_tokens(z, SourceMatrix([0, 1, 0], 2))
    np.testing.assert_array_equal(out, [[1, 2], [3, 4], [1, 2]])
    with pytest.raises(ValueError):
        recover_tokens(z, SourceMatrix([0, 0], 1))


def test_recover_identity_source_is_noop():
    z = RandomStream(9).matrix(5, 3)
    np.testing.assert_array_equal(recover_tokens(z, SourceMatrix.identity(5)), z)
