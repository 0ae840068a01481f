import numpy as np
import pytest

from mergevq.lfq import index_codes
from mergevq.numerics import RandomStream
from mergevq.randgen import generate_pipeline, random_order_decode
from mergevq.recovery import RecoveryModel
from mergevq.tome import SourceMatrix
from mergevq.toymodel import choose_token, full_forward, init_model


@pytest.fixture(scope="module")
def model():
    return init_model(2, vocab=64, embed_dim=16, layers=2, l_max=65)


def test_single_token(model):
    trace = random_order_decode(model, 3, 1, RandomStream(0))
    assert trace.k == 1 and trace.permutation.tolist() == [0]
    assert trace.stream[:2] == [("class", 3), ("pos", 0)]


def test_identity_order_matches_hand_loop(model):
    """Greedy decode with a fixed order equals re-running the full stack each step."""
    trace = random_order_decode(model, 5, 6, RandomStream(0), order=np.arange(6))
    inputs = [("class", 5)]
    expected = []
    for slot in range(6):
        inputs.append(("pos", slot))
        tok = choose_token(full_forward(model, inputs)[-1])
        expected.append(tok)
        inputs.append(("image", tok))
    assert trace.tokens == expected
    assert trace.stream == inputs


def test_permuted_order_raster_tokens(model):
    order = [2, 0, 3, 1]
    trace = random_order_decode(model, 0, 4, RandomStream(0), order=order, forced=[10, 11, 12, 13])
    assert trace.raster_tokens() == [11, 13, 10, 12]
    assert [i for kind, i in trace.stream if kind == "pos"] == order


def test_targets_name_positions(model):
    trace = random_order_decode(model, 0, 3, RandomStream(0), order=[1, 0, 2], targets=[0, 4, 9])
    assert [i for kind, i in trace.stream if kind == "pos"] == [4, 0, 9]


def test_decode_is_seed_deterministic(model):
    a = random_order_decode(model, 1, 8, RandomStream(4), temperature=1.0)
    b = random_order_decode(model, 1, 8, RandomStream(4), temperature=1.0)
    assert a.tokens == b.tokens
    np.testing.assert_array_equal(a.permutation, b.permutation)


def test_decode_rejects_bad_order(model):
    with pytest.raises(ValueError):
        random_order_decode(model, 0, 3, RandomStream(0), order=[0, 0, 1])
    with pytest.raises(ValueError):
        random_order_decode(model, 0, 40, RandomStream(0))


def test_pipeline_with_identity_source_bypasses_recovery(model):
    trace = random_order_decode(model, 0, 4, RandomStream(1))
    rec = RecoveryModel.init(4, 6, RandomStream(2), hidden=8)
    out = generate_pipeline(trace, rec, 6, 4, source=SourceMatrix.identity(4))
    assert out.prediction is None and not out.degenerate
    np.testing.assert_array_equal(out.output, index_codes(trace.raster_tokens(), 6))


def test_pipeline_seed7_k16_l64(model):
    trace = random_order_decode(model, 7, 16, RandomStream(7))
    rec = RecoveryModel.init(64, 6, RandomStream(8), hidden=16)
    out = generate_pipeline(trace, rec, 6, 64)
    assert out.output.shape == (64, 6)
    # every output row is one of the decoded codes, copied from its owning row
    codes = {tuple(r) for r in out.z_k.tolist()}
    assert {tuple(r) for r in out.output.tolist()} <= codes
    for j, owner in enumerate(out.source.assignment.tolist()):
        np.testing.assert_array_equal(out.output[j], out.z_k[owner])
    assert out.degenerate == bool(out.source.empty_rows().size)


def test_pipeline_rejects_mismatched_recovery(model):
    trace = random_order_decode(model, 0, 2, RandomStream(0))
    with pytest.raises(ValueError):
        generate_pipeline(trace, RecoveryModel.init(8, 6, RandomStream(0), hidden=8), 6, 4)
    with pytest.raises(ValueError):
        generate_pipeline(trace, RecoveryModel.init(4, 5, RandomStream(0), hidden=8), 6, 4)
