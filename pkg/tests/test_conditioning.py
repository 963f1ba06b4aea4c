import numpy as np
import pytest

from atm_lab import atm, conditioning as cond, pipeline
from atm_lab.numerics import DimensionError, Tape

from conftest import small_config
from oracles import central_diff, rel_err


def make_encoder(rng, d=6, c=4):
    return cond.FrozenEncoder.init(rng, d, c)


def test_zero_inputs_encode_to_zero(rng):
    enc = make_encoder(rng)
    enc = cond.FrozenEncoder(enc.w_q, enc.w_x, np.zeros((1, 4)))
    q = cond.encode(enc, cond.SemanticQueryBank(np.zeros((3, 4))), np.zeros((1, 6)))
    np.testing.assert_array_equal(q, np.zeros((3, 4)))


def test_encode_is_deterministic(rng):
    enc = make_encoder(rng)
    qb = cond.SemanticQueryBank.init(rng, 3, 4)
    x = rng.normal(size=(1, 6))
    assert np.array_equal(cond.encode(enc, qb, x), cond.encode(enc, qb, x))


def test_encode_dimension_errors(rng):
    enc = make_encoder(rng)
    qb = cond.SemanticQueryBank.init(rng, 3, 4)
    with pytest.raises(DimensionError):
        cond.encode(enc, qb, np.zeros((1, 5)))
    with pytest.raises(DimensionError):
        cond.FrozenEncoder(np.zeros((4, 4)), np.zeros((6, 3)), np.zeros((1, 4)))


def test_encoder_weights_are_read_only(rng):
    enc = make_encoder(rng)
    with pytest.raises(ValueError):
        enc.w_q[0, 0] = 1.0


def test_batched_encoding_matches_single(rng):
    enc = make_encoder(rng)
    qb = cond.SemanticQueryBank.init(rng, 3, 4)
    x = rng.normal(size=(5, 6))
    tape = Tape()
    stacked = cond.encode_batch_on_tape(tape, enc, tape.leaf(qb.q0, "q0"), x).value
    for b in range(5):
        np.testing.assert_allclose(stacked[3 * b:3 * b + 3], cond.encode(enc, qb, x[b:b + 1]), atol=1e-14)


def test_encoder_weights_get_no_gradient(rng):
    enc = make_encoder(rng)
    qb = cond.SemanticQueryBank.init(rng, 3, 4)
    tape = Tape()
    q = cond.encode_batch_on_tape(tape, enc, tape.leaf(qb.q0, "q0"), rng.normal(size=(2, 6)))
    grads = tape.backward(tape.sum(q))
    assert set(grads) == {"q0"}


def test_block_bounds():
    assert cond.block_bounds(6, 3) == [(0, 2), (2, 4), (4, 6)]
    assert cond.block_bounds(7, 3) == [(0, 3), (3, 5), (5, 7)]
    with pytest.raises(DimensionError):
        cond.block_bounds(3, 4)


def test_detail_tokens_zero_input(rng):
    branch = cond.DetailBranch.init(rng, 8, 5, 4)
    np.testing.assert_array_equal(cond.detail_tokens(branch, np.zeros((1, 8))), np.zeros((4, 5)))


def test_single_block_detail_is_plain_projection(rng):
    branch = cond.DetailBranch.init(rng, 8, 5, 1)
    x = rng.normal(size=(1, 8))
    out = cond.detail_tokens(branch, x)
    assert out.shape == (1, 5)
    np.testing.assert_array_equal(out, np.maximum(x @ branch.w_v, 0.0))


def test_detail_rows_follow_blocks(rng):
    branch = cond.DetailBranch.init(rng, 8, 5, 4)
    x = rng.normal(size=(1, 8))
    y = x.copy()
    y[0, 4:6] += rng.normal(size=2) * 3  # block 2 only
    a, b = cond.detail_tokens(branch, x), cond.detail_tokens(branch, y)
    changed = [k for k in range(4) if not np.array_equal(a[k], b[k])]
    assert changed == [2]


def test_detail_batch_matches_single(rng):
    branch = cond.DetailBranch.init(rng, 8, 5, 4)
    x = rng.normal(size=(3, 8))
    batched = cond.detail_tokens_batch(branch, x)
    for b in range(3):
        np.testing.assert_allclose(batched[4 * b:4 * b + 4], cond.detail_tokens(branch, x[b:b + 1]), atol=1e-14)


def test_assemble_shapes(rng):
    r = rng.normal(size=(256, 4))
    d = rng.normal(size=(16, 4))
    assert cond.assemble(r, d).shape == (272, 4)
    assert np.array_equal(cond.assemble(r), r)
    with pytest.raises(DimensionError):
        cond.assemble(r, np.zeros((2, 3)))


def test_multi_condition_layout(rng):
    l, v, c = 4, 2, 3
    rs = [atm.RetrievalResult(rng.normal(size=(l, c)), np.ones((l, 1))) for _ in range(2)]
    ds = [rng.normal(size=(v, c)) for _ in range(2)]
    out = cond.assemble(atm.compose(rs), np.vstack(ds))
    assert out.shape == (2 * l + 2 * v, c)
    np.testing.assert_array_equal(out[l:2 * l], rs[1].retrieved)
    np.testing.assert_array_equal(out[2 * l + v:], ds[1])


def _pipeline_loss(state, x, y, routes, use_details):
    tape = Tape()
    fw = pipeline.forward(tape, state, x, routes, use_details, trainable=True)
    return tape, tape.mse(fw.output, tape.const(y[fw.order]))


@pytest.mark.parametrize("use_details", [False, True])
def test_query_gradient_passes_through_frozen_encoder(use_details):
    state = pipeline.init_state(small_config(seed=3))
    g = np.random.default_rng(5)
    x = g.normal(size=(4, 6))
    y = g.normal(size=(4, 6))
    routes = np.array([0, 2, 0, 1])
    tape, loss = _pipeline_loss(state, x, y, routes, use_details)
    grads = tape.backward(loss)
    assert np.abs(grads["q0"]).max() > 0
    fd = central_diff(lambda p: _pipeline_loss(state, x, y, routes, use_details)[1].value[0, 0],
                      {"q0": state.qbank.q0})
    assert rel_err(grads["q0"], fd["q0"]) < 1e-4
