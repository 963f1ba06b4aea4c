"""Synthetic three-task benchmark and the metrics computed on it.

Each condition vector ``x`` has one contiguous block per task (identity,
texture, layout). A sample of task ``t`` draws ``x`` around a task-specific
cluster center, and its target depends only on block ``t`` of ``x``, written
into block ``t`` of the output; every other output block is zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from itertools import combinations
from typing import Sequence

import numpy as np

from .numerics import ContractError, DimensionError, as_matrix, stream


class TaskKind(IntEnum):
    SUBJECT = 0
    STYLE = 1
    STRUCTURE = 2


@dataclass(frozen=True)
class SynthSample:
    x: np.ndarray  # 1 x d
    task: int
    target: np.ndarray  # 1 x d_out


@dataclass
class SynthBench:
    """Per-seed cluster centers and block maps. Fixed once built."""

    centers: np.ndarray  # n x d
    maps: list[np.ndarray]  # n of (d/n) x (d_out/n)
    cluster_std: float

    @classmethod
    def from_seed(cls, seed: int, d: int = 24, d_out: int = 24, n_tasks: int = 3,
                  cluster_std: float = 0.5) -> "SynthBench":
        if d % n_tasks or d_out % n_tasks:
            raise DimensionError(f"d={d} and d_out={d_out} must both split into {n_tasks} blocks")
        rng = stream(seed, "data.bench")
        min_gap = 6.0 * cluster_std
        while True:
            centers = rng.normal(0.0, 1.0, size=(n_tasks, d))
            gaps = [np.linalg.norm(centers[a] - centers[b]) for a, b in combinations(range(n_tasks), 2)]
            if min(gaps, default=np.inf) >= min_gap:
                break
        k_in, k_out = d // n_tasks, d_out // n_tasks
        maps = [rng.normal(0.0, 1.0 / math.sqrt(k_in), size=(k_in, k_out)) for _ in range(n_tasks)]
        return cls(centers, maps, cluster_std)

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def d_out(self) -> int:
        return self.maps[0].shape[1] * self.n

    def block(self, t: int, width: int) -> slice:
        k = width // self.n
        return slice(t * k, (t + 1) * k)

    def clean_target(self, x, task: int) -> np.ndarray:
        x = as_matrix(x)
        out = np.zeros((x.shape[0], self.d_out))
        out[:, self.block(task, self.d_out)] = x[:, self.block(task, self.d)] @ self.maps[task]
        return out

    def sample(self, rng: np.random.Generator, count: int, noise: float) -> list[SynthSample]:
        """``count`` samples with tasks assigned round-robin (balanced to within one)."""
        if count <= 0:
            raise ContractError("count must be positive")
        tasks = np.arange(count) % self.n
        x = self.centers[tasks] + rng.normal(0.0, self.cluster_std, size=(count, self.d))
        eps = rng.normal(0.0, 1.0, size=(count, self.d_out)) * noise
        out = []
        for i, t in enumerate(tasks):
            target = self.clean_target(x[i], int(t)) + eps[i]
            out.append(SynthSample(x[i:i + 1].copy(), int(t), target))
        return out


def generate(seed: int, count: int, noise: float = 0.05, **bench_kw) -> list[SynthSample]:
    bench = SynthBench.from_seed(seed, **bench_kw)
    return bench.sample(stream(seed, "data.samples"), count, noise)


@dataclass
class Dataset:
    x: np.ndarray  # N x d
    tasks: np.ndarray  # N
    targets: np.ndarray  # N x d_out

    @classmethod
    def from_samples(cls, samples: Sequence[SynthSample]) -> "Dataset":
        return cls(np.vstack([s.x for s in samples]),
                   np.array([s.task for s in samples], dtype=np.int64),
                   np.vstack([s.target for s in samples]))

    def __len__(self) -> int:
        return len(self.tasks)


def make_splits(seed: int, n_train: int, n_eval: int, noise: float = 0.05,
                **bench_kw) -> tuple[Dataset, Dataset, SynthBench]:
    bench = SynthBench.from_seed(seed, **bench_kw)
    samples = bench.sample(stream(seed, "data.samples"), n_train + n_eval, noise)
    return Dataset.from_samples(samples[:n_train]), Dataset.from_samples(samples[n_train:]), bench


# ---------------------------------------------------------------------------
# metrics

RATIO_FLOOR = 1e-12
RATIO_CAP = 1e12


def separation_ratio(embeddings, labels) -> float:
    """Mean distance between class centroids over mean distance of points to their own centroid."""
    emb = np.vstack([as_matrix(e) for e in embeddings])
    labels = np.asarray(labels)
    if emb.shape[0] != labels.shape[0]:
        raise DimensionError(f"{emb.shape[0]} embeddings for {labels.shape[0]} labels")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ContractError("separation_ratio needs at least two classes")
    centroids = []
    within = np.empty(emb.shape[0])
    for k in classes:
        members = labels == k
        if members.sum() < 2:
            raise ContractError(f"class {k} has fewer than two points")
        mu = emb[members].mean(axis=0)
        centroids.append(mu)
        within[members] = np.linalg.norm(emb[members] - mu, axis=1)
    between = np.mean([np.linalg.norm(a - b) for a, b in combinations(centroids, 2)])
    return float(min(between / max(within.mean(), RATIO_FLOOR), RATIO_CAP))


def struc_sim(a, b) -> float:
    """``1 - mean|a - b|`` for maps already scaled into [0, 1]."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise DimensionError(f"struc_sim: shapes {a.shape} and {b.shape} differ")
    for m in (a, b):
        if m.min() < 0.0 or m.max() > 1.0:
            raise ContractError("struc_sim inputs must lie in [0, 1]")
    return float(1.0 - np.mean(np.abs(a - b)))


def to_unit_range(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.zeros_like(values)
    return np.clip((values - lo) / span, 0.0, 1.0)


@dataclass
class MetricReport:
    arm: str
    seed: int
    gate_accuracy: float
    separation_ratio_raw: float
    separation_ratio_retrieved: float
    final_loss: float
    struc_sim: float
    stage_losses: dict[str, float] = field(default_factory=dict)
    extras: dict[str, float] = field(default_factory=dict)

    CSV_COLUMNS = ("arm", "seed", "gate_acc", "sep_raw", "sep_retrieved", "final_loss", "struc_sim")

    def __post_init__(self):
        values = [self.gate_accuracy, self.separation_ratio_raw, self.separation_ratio_retrieved,
                  self.final_loss, self.struc_sim, *self.stage_losses.values(), *self.extras.values()]
        if not all(math.isfinite(v) for v in values):
            raise ContractError(f"non-finite metric in report for arm {self.arm}")
        for frac in (self.gate_accuracy, self.struc_sim):
            if not 0.0 <= frac <= 1.0:
                raise ContractError(f"fraction out of range: {frac}")

    def csv_row(self) -> list[str]:
        return [self.arm, str(self.seed), repr(self.gate_accuracy), repr(self.separation_ratio_raw),
                repr(self.separation_ratio_retrieved), repr(self.final_loss), repr(self.struc_sim)]


def run_ablation(arm: str, config) -> MetricReport:
    """Train and evaluate one ablation arm; all arms share data and initial weights for a seed.

    ``full`` is the standard pipeline; ``no_memory`` feeds queries straight to the
    decoder; ``no_gate`` routes by seeded uniform-random task indices;
    ``no_queries`` freezes the query matrix at its random init; ``no_details``
    skips the detail tokens in stage 3.
    """
    from . import pipeline

    return pipeline.run(config, arm).metrics
