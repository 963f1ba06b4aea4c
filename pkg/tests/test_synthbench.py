import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atm_lab import synthbench as sb
from atm_lab.numerics import ContractError, DimensionError
from atm_lab.synthbench import MetricReport, SynthBench, TaskKind


def test_generate_is_deterministic():
    a = sb.generate(11, 12)
    b = sb.generate(11, 12)
    for s, t in zip(a, b):
        assert s.task == t.task
        assert np.array_equal(s.x, t.x) and np.array_equal(s.target, t.target)


def test_generate_balances_tasks():
    tasks = [s.task for s in sb.generate(3, 9)]
    assert [tasks.count(k) for k in TaskKind] == [3, 3, 3]


def test_noise_free_targets_are_block_products():
    bench = SynthBench.from_seed(4)
    for s in sb.generate(4, 6, noise=0.0):
        block = s.x[0, 8 * s.task:8 * (s.task + 1)]
        expected = np.zeros(24)
        expected[8 * s.task:8 * (s.task + 1)] = block @ bench.maps[s.task]
        np.testing.assert_array_equal(s.target[0], expected)


def test_cluster_centers_are_well_separated():
    for seed in range(10):
        bench = SynthBench.from_seed(seed, cluster_std=0.5)
        gaps = [np.linalg.norm(bench.centers[a] - bench.centers[b]) for a in range(3) for b in range(a)]
        assert min(gaps) >= 3.0


def test_bench_rejects_ragged_blocks():
    with pytest.raises(DimensionError):
        SynthBench.from_seed(1, d=10)


def test_make_splits_partition_one_stream():
    train, held_out, _ = sb.make_splits(2, 30, 12)
    both = sb.Dataset.from_samples(sb.generate(2, 42))
    np.testing.assert_array_equal(np.vstack([train.x, held_out.x]), both.x)
    assert len(train) == 30 and len(held_out) == 12


# ---------------------------------------------------------------------------
# separation ratio


def test_separation_ratio_tight_clusters_hit_cap():
    emb = [[0, 0], [0, 0], [1, 0], [1, 0]]
    assert sb.separation_ratio(emb, [0, 0, 1, 1]) == 1e12


def test_separation_ratio_identical_points_is_zero():
    assert sb.separation_ratio(np.ones((4, 3)), [0, 0, 1, 1]) == 0.0


def test_separation_ratio_monte_carlo():
    for seed in range(20):
        g = np.random.default_rng(seed)
        a = g.normal(size=(30, 5))
        b = g.normal(size=(30, 5)) + np.eye(5)[0] * 10.0
        assert sb.separation_ratio(np.vstack([a, b]), [0] * 30 + [1] * 30) > 3


def test_separation_ratio_errors():
    with pytest.raises(ContractError):
        sb.separation_ratio(np.zeros((3, 2)), [0, 0, 0])
    with pytest.raises(ContractError):
        sb.separation_ratio(np.zeros((3, 2)), [0, 0, 1])
    with pytest.raises(DimensionError):
        sb.separation_ratio(np.zeros((3, 2)), [0, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6))
def test_separation_ratio_isometry_invariance(seed, dim):
    g = np.random.default_rng(seed)
    labels = np.repeat([0, 1, 2], 5)
    emb = g.normal(size=(15, dim)) + labels[:, None] * g.normal(size=dim)
    rot, _ = np.linalg.qr(g.normal(size=(dim, dim)))
    moved = emb @ rot + g.normal(scale=10.0, size=dim)
    assert sb.separation_ratio(moved, labels) == pytest.approx(sb.separation_ratio(emb, labels), abs=1e-9)


# ---------------------------------------------------------------------------
# struc_sim


def test_struc_sim_examples():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert sb.struc_sim(a, a) == 1.0
    assert sb.struc_sim(np.zeros((2, 2)), np.ones((2, 2))) == 0.0
    assert sb.struc_sim(a, np.full((2, 2), 0.5)) == 0.5


def test_struc_sim_errors():
    with pytest.raises(DimensionError):
        sb.struc_sim(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ContractError):
        sb.struc_sim(np.full((1, 1), 2.0), np.zeros((1, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_struc_sim_symmetric(seed):
    g = np.random.default_rng(seed)
    a, b = g.uniform(size=(3, 4)), g.uniform(size=(3, 4))
    assert sb.struc_sim(a, b) == sb.struc_sim(b, a)
    assert sb.struc_sim(a, a) == 1.0
    assert 0.0 <= sb.struc_sim(a, b) <= 1.0


def test_to_unit_range_clips():
    np.testing.assert_array_equal(sb.to_unit_range(np.array([-1.0, 0.5, 3.0]), 0.0, 1.0), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(sb.to_unit_range(np.array([2.0]), 1.0, 1.0), [0.0])


def test_metric_report_validation():
    ok = dict(arm="full", seed=1, gate_accuracy=1.0, separation_ratio_raw=2.0,
              separation_ratio_retrieved=3.0, final_loss=0.1, struc_sim=0.9)
    assert MetricReport(**ok).csv_row()[:2] == ["full", "1"]
    with pytest.raises(ContractError):
        MetricReport(**{**ok, "final_loss": float("nan")})
    with pytest.raises(ContractError):
        MetricReport(**{**ok, "gate_accuracy": 1.2})
