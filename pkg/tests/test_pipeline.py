import math

import numpy as np
import pytest

from atm_lab import pipeline
from atm_lab.numerics import ContractError, mean_pool_rows, stream
from atm_lab.pipeline import SequencingError

from conftest import SEEDS, small_config

FROZEN = ("encoder.w_q", "encoder.w_x", "encoder.b", "detail.w_v")
GATE = ("gate.w1", "gate.b1", "gate.w2", "gate.b2")
GENERATION = ("q0", "memory.0", "memory.1", "memory.2",
              "decoder.w1", "decoder.b1", "decoder.w2", "decoder.b2")


def small_run(arm="full", **kw):
    snaps = {}

    def grab(stage, state):
        snaps[stage] = {k: v.copy() for k, v in state.params().items()}

    return pipeline.run(small_config(**kw), arm, on_stage=grab), snaps


@pytest.fixture(scope="module")
def small_full():
    return small_run()


def test_config_validation():
    with pytest.raises(ValueError):
        pipeline.TrainConfig(lr_early=1e-4, lr_late=1e-3)
    with pytest.raises(ValueError):
        pipeline.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        pipeline.TrainConfig(report_arms=("full", "bogus"))
    with pytest.raises(ValueError):
        pipeline.TrainConfig(dims=pipeline.Dims(d=10))


def test_presets():
    big = pipeline.preset("paper-scale")
    assert (big.stage1_steps, big.stage2_steps, big.stage3_steps) == (3000, 3000, 5000)
    assert (big.lr_early, big.lr_late, big.batch_size) == (1e-4, 3e-5, 256)
    assert (big.dims.l, big.dims.m) == (256, 1024)
    desk = pipeline.preset("desk")
    desk.dims.l = 1
    assert pipeline.preset("desk").dims.l == 16
    with pytest.raises(KeyError):
        pipeline.preset("huge")


def test_stages_enforce_order():
    cfg = small_config()
    train, _, _ = pipeline.load_data(cfg)
    state = pipeline.init_state(cfg)
    with pytest.raises(SequencingError):
        pipeline.stage2_train(state, train)
    with pytest.raises(SequencingError):
        pipeline.stage3_train(state, train)
    with pytest.raises(ContractError):
        pipeline.infer(state, train.x[:1])
    pipeline.stage1_train(state, train)
    with pytest.raises(SequencingError):
        pipeline.stage1_train(state, train)
    pipeline.stage2_train(state, train)
    pipeline.stage3_train(state, train)
    with pytest.raises(SequencingError):
        pipeline.stage3_train(state, train)


def test_unknown_arm():
    with pytest.raises(ValueError, match="no_memory"):
        pipeline.init_state(small_config(), "no_such_arm")


def test_zero_step_stages_advance_without_change():
    cfg = small_config(stage1_steps=0, stage2_steps=0)
    train, _, _ = pipeline.load_data(cfg)
    state = pipeline.init_state(cfg)
    gate_before = {k: v.copy() for k, v in state.gate.params().items()}
    pipeline.stage1_train(state, train)
    assert state.stage == 2
    assert all(np.array_equal(gate_before[k], v) for k, v in state.gate.params().items())
    pipeline.stage2_train(state, train)
    assert state.stage == 3 and state.losses[2] == []


def test_loss_history_bookkeeping(small_full):
    result, _ = small_full
    cfg = result.state.config
    assert [len(result.state.losses[k]) for k in (1, 2, 3)] == \
        [cfg.stage1_steps, cfg.stage2_steps, cfg.stage3_steps]
    assert len(result.state.routes_log[2]) == cfg.stage2_steps * cfg.batch_size


def test_learning_rate_telemetry(small_full):
    result, _ = small_full
    cfg = result.state.config
    assert result.state.lr_used == {1: cfg.lr_early, 2: cfg.lr_early, 3: cfg.lr_late}


def _assert_freeze_matrix(snaps, trains_queries=True):
    def same(a, b, keys):
        return {k: np.array_equal(snaps[a][k], snaps[b][k]) for k in keys}

    for a, b in ((0, 1), (1, 2), (2, 3)):
        assert all(same(a, b, FROZEN).values()), (a, b)
    assert not all(same(0, 1, GATE).values())
    assert all(same(1, 2, GATE).values()) and all(same(2, 3, GATE).values())
    assert all(same(0, 1, GENERATION).values())
    moving = [k for k in GENERATION if trains_queries or k != "q0"]
    for a, b in ((1, 2), (2, 3)):
        changed = same(a, b, moving)
        assert not any(changed.values()), (a, b, changed)
    if not trains_queries:
        assert np.array_equal(snaps[0]["q0"], snaps[3]["q0"])


def test_freeze_matrix(small_full):
    _assert_freeze_matrix(small_full[1])


def test_freeze_matrix_without_query_training():
    _, snaps = small_run("no_queries")
    _assert_freeze_matrix(snaps, trains_queries=False)


def test_full_run_is_deterministic(small_full):
    again, snaps = small_run()
    first, first_snaps = small_full
    assert again.state.losses == first.state.losses
    assert all(np.array_equal(first_snaps[3][k], v) for k, v in snaps[3].items())
    assert again.metrics == first.metrics


def test_seed_changes_the_run(small_full):
    other, _ = small_run(seed=2)
    assert other.state.losses[2] != small_full[0].state.losses[2]


def test_infer_is_deterministic_and_leaves_bank_untouched(small_full):
    state = small_full[0].state
    x = pipeline.load_data(state.config)[1].x[:1]
    before = [it.copy() for it in state.bank.items]
    first = pipeline.infer(state, x)
    for _ in range(1000):
        assert np.array_equal(pipeline.infer(state, x), first)
    assert all(np.array_equal(a, b) for a, b in zip(before, state.bank.items))


def test_gate_routing_agrees_with_labels_when_gate_is_right(small_full):
    state = small_full[0].state
    _, held_out, _ = pipeline.load_data(state.config)
    routes = pipeline.gate_routes(state, held_out.x)
    hits = np.flatnonzero(routes == held_out.tasks)[:10]
    assert len(hits) > 0
    for i in hits:
        x = held_out.x[i:i + 1]
        assert np.array_equal(pipeline.infer(state, x), pipeline.infer(state, x, int(held_out.tasks[i])))


def test_batched_path_matches_single_sample_path(small_full):
    state = small_full[0].state
    _, held_out, _ = pipeline.load_data(state.config)
    out, _ = pipeline.predict_batch(state, held_out.x, held_out.tasks, use_details=True)
    for i in range(len(held_out)):
        single = pipeline.infer(state, held_out.x[i:i + 1], int(held_out.tasks[i]))
        np.testing.assert_allclose(out[i:i + 1], single, atol=1e-12)


def test_composition_layout_and_order_invariance(small_full):
    state = small_full[0].state
    k = state.config.dims
    _, held_out, _ = pipeline.load_data(state.config)
    a = (held_out.x[:1], int(held_out.tasks[0]))
    b = (held_out.x[1:2], int(held_out.tasks[1]))
    assert pipeline.composed_input(state, [a, a]).shape == (2 * k.l + 2 * k.v, k.c)
    ab = mean_pool_rows(pipeline.composed_input(state, [a, b]))
    ba = mean_pool_rows(pipeline.composed_input(state, [b, a]))
    np.testing.assert_allclose(ab, ba, atol=1e-12, rtol=0)
    with pytest.raises(ContractError):
        pipeline.infer_composed(state, [])


def test_no_gate_routes_follow_the_seeded_stream():
    result, _ = small_run("no_gate")
    cfg = result.state.config
    rng = stream(cfg.seed, "ablation.routing.stage2")
    expected = np.concatenate([rng.integers(0, cfg.dims.n, size=cfg.batch_size)
                               for _ in range(cfg.stage2_steps)])
    np.testing.assert_array_equal(result.state.routes_log[2], expected)
    _, held_out, _ = pipeline.load_data(cfg)
    np.testing.assert_array_equal(pipeline.eval_routes(result.state, held_out),
                                  pipeline.random_routes(cfg.seed, "eval", len(held_out), cfg.dims.n))


def test_full_and_no_memory_share_the_stage1_gate(small_full):
    _, snaps = small_run("no_memory")
    for k in GATE:
        assert np.array_equal(snaps[1][k], small_full[1][1][k])
    assert np.array_equal(snaps[0]["memory.0"], small_full[1][0]["memory.0"])


def test_no_memory_arm_leaves_memory_at_init():
    _, snaps = small_run("no_memory")
    assert np.array_equal(snaps[0]["memory.1"], snaps[3]["memory.1"])


@pytest.mark.slow
@pytest.mark.parametrize("seed", SEEDS)
def test_losses_finite_on_desk_config(runs, seed):
    state = runs.get(seed).state
    assert all(math.isfinite(v) for k in (1, 2, 3) for v in state.losses[k])
