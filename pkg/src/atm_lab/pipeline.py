"""Decoder head and the three-stage training schedule.

Stage 1 fits the gate on pooled queries. Stage 2 trains the queries, memory
and decoder on retrieved queries alone. Stage 3 continues at a lower rate
with detail tokens appended to every condition.
"""
from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import atm
from .atm import GateClassifier, MemoryBank, retrieve_on_tape
from .conditioning import (
    DetailBranch,
    FrozenEncoder,
    SemanticQueryBank,
    assemble,
    detail_tokens,
    detail_tokens_batch,
    encode,
    encode_batch_on_tape,
)
from .numerics import (
    Adam,
    ContractError,
    NumericError,
    Tape,
    as_matrix,
    concat_rows,
    mean_pool_rows,
    relu,
    softmax_rows,
    stream,
)
from .synthbench import (
    Dataset,
    MetricReport,
    SynthBench,
    TaskKind,
    make_splits,
    separation_ratio,
    struc_sim,
    to_unit_range,
)

ARMS = ("full", "no_memory", "no_gate", "no_queries", "no_details")


class SequencingError(RuntimeError):
    """A training stage was called out of order."""


@dataclass
class Dims:
    l: int = 16
    m: int = 32
    c: int = 32
    n: int = 3
    d: int = 24
    v: int = 4
    h: int = 128
    h_dec: int = 64
    d_out: int = 24


@dataclass
class TrainConfig:
    stage1_steps: int = 300
    stage2_steps: int = 500
    stage3_steps: int = 500
    lr_early: float = 1e-3
    lr_late: float = 3e-4
    batch_size: int = 32
    alpha: float = 0.1
    seed: int = 1
    noise: float = 0.05
    cluster_std: float = 0.5
    n_train: int = 1536
    n_eval: int = 300
    report_arms: tuple[str, ...] = ("no_gate", "no_details")
    dims: Dims = field(default_factory=Dims)

    def __post_init__(self):
        if isinstance(self.dims, dict):
            self.dims = Dims(**self.dims)
        for name in ("stage1_steps", "stage2_steps", "stage3_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("batch_size", "n_train", "n_eval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name, value in asdict(self.dims).items():
            if value <= 0:
                raise ValueError(f"dims.{name} must be positive")
        if not 0 < self.lr_late <= self.lr_early:
            raise ValueError("learning rates must satisfy 0 < lr_late <= lr_early")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.noise < 0 or self.cluster_std <= 0:
            raise ValueError("noise must be >= 0 and cluster_std > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a non-negative 64-bit integer")
        if self.dims.d % self.dims.n or self.dims.d_out % self.dims.n:
            raise ValueError("dims.d and dims.d_out must be multiples of dims.n")
        if self.dims.v > self.dims.d:
            raise ValueError("dims.v cannot exceed dims.d")
        self.report_arms = tuple(self.report_arms)
        unknown = [a for a in self.report_arms if a not in ARMS]
        if unknown:
            raise ValueError(f"unknown arm(s) {unknown}; valid arms: {', '.join(ARMS)}")


PRESETS = {
    "desk": TrainConfig(),
    # 3000/3000/5000 steps, lr 1e-4 then 3e-5, batch 256, l=256, m=1024
    "paper-scale": TrainConfig(
        stage1_steps=3000, stage2_steps=3000, stage3_steps=5000, lr_early=1e-4, lr_late=3e-5,
        batch_size=256, n_train=8192, n_eval=600,
        dims=Dims(l=256, m=1024, c=64, h=256, h_dec=128)),
}


def preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name]
    return replace(base, dims=replace(base.dims))


@dataclass
class DecoderHead:
    w1: np.ndarray  # c x h_dec
    b1: np.ndarray
    w2: np.ndarray  # h_dec x d_out
    b2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, h: int, d_out: int) -> "DecoderHead":
        return cls(rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, h)), np.zeros((1, h)),
                   rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, d_out)), np.zeros((1, d_out)))

    def params(self) -> dict[str, np.ndarray]:
        return {"decoder.w1": self.w1, "decoder.b1": self.b1, "decoder.w2": self.w2, "decoder.b2": self.b2}

    def __call__(self, pooled) -> np.ndarray:
        return relu(as_matrix(pooled) @ self.w1 + self.b1) @ self.w2 + self.b2

    def on_tape(self, tape: Tape, pooled, trainable: bool):
        p = {k: tape.leaf(v, k, trainable) for k, v in self.params().items()}
        hidden = tape.relu(tape.add(tape.matmul(pooled, p["decoder.w1"]), p["decoder.b1"]))
        return tape.add(tape.matmul(hidden, p["decoder.w2"]), p["decoder.b2"])


@dataclass
class TrainState:
    config: TrainConfig
    arm: str
    qbank: SemanticQueryBank
    encoder: FrozenEncoder
    detail: DetailBranch
    bank: MemoryBank
    gate: GateClassifier
    decoder: DecoderHead
    stage: int = 1
    finished: bool = False
    step: int = 0
    losses: dict[int, list[float]] = field(default_factory=lambda: {1: [], 2: [], 3: []})
    eval_losses: dict[int, float] = field(default_factory=dict)
    lr_used: dict[int, float] = field(default_factory=dict)
    routes_log: dict[int, list[int]] = field(default_factory=lambda: {2: [], 3: []})

    @property
    def uses_memory(self) -> bool:
        return self.arm != "no_memory"

    @property
    def trains_queries(self) -> bool:
        return self.arm != "no_queries"

    @property
    def uses_details(self) -> bool:
        return self.arm != "no_details"

    @property
    def random_routing(self) -> bool:
        return self.arm == "no_gate"

    def params(self) -> dict[str, np.ndarray]:
        """Every learned or frozen matrix, keyed by a stable name."""
        out = {"q0": self.qbank.q0, "encoder.w_q": self.encoder.w_q, "encoder.w_x": self.encoder.w_x,
               "encoder.b": self.encoder.b, "detail.w_v": self.detail.w_v}
        out.update({f"memory.{i}": it for i, it in enumerate(self.bank.items)})
        out.update(self.gate.params())
        out.update(self.decoder.params())
        return out


def init_state(config: TrainConfig, arm: str = "full") -> TrainState:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
    k, s = config.dims, config.seed
    return TrainState(
        config=config,
        arm=arm,
        qbank=SemanticQueryBank.init(stream(s, "init.q0"), k.l, k.c),
        encoder=FrozenEncoder.init(stream(s, "init.encoder"), k.d, k.c),
        detail=DetailBranch.init(stream(s, "init.detail"), k.d, k.c, k.v),
        bank=MemoryBank.init(stream(s, "init.memory"), k.n, k.m, k.c, alpha=config.alpha),
        gate=GateClassifier.init(stream(s, "init.gate"), k.c, k.n, k.h),
        decoder=DecoderHead.init(stream(s, "init.decoder"), k.c, k.h_dec, k.d_out),
    )


def load_data(config: TrainConfig) -> tuple[Dataset, Dataset, SynthBench]:
    k = config.dims
    return make_splits(config.seed, config.n_train, config.n_eval, config.noise,
                       d=k.d, d_out=k.d_out, n_tasks=k.n, cluster_std=config.cluster_std)


def random_routes(seed: int, purpose: str, count: int, n: int) -> np.ndarray:
    """Uniform task indices from the ablation stream; used by the ``no_gate`` arm."""
    return stream(seed, f"ablation.routing.{purpose}").integers(0, n, size=count)


# ---------------------------------------------------------------------------
# forward passes


def pooled_queries(state: TrainState, x) -> np.ndarray:
    """Mean-pooled encoded queries per condition row (B x c)."""
    x = as_matrix(x)
    shared = state.qbank.q0 @ state.encoder.w_q
    q = np.maximum(shared[None, :, :] + state.encoder.condition_bias(x)[:, None, :], 0.0)
    return q.mean(axis=1)


def gate_routes(state: TrainState, x) -> np.ndarray:
    probs = softmax_rows(state.gate.logits(pooled_queries(state, x)))
    return np.argmax(probs, axis=1)


def _pool_matrix(batch: int, l: int, v: int) -> np.ndarray:
    """Averages each sample's ``l`` sequence rows plus its ``v`` detail rows."""
    width = l + v
    p = np.zeros((batch, batch * width))
    for b in range(batch):
        p[b, b * l:(b + 1) * l] = 1.0 / width
        p[b, batch * l + b * v: batch * l + (b + 1) * v] = 1.0 / width
    return p


@dataclass
class Forward:
    order: np.ndarray  # sample permutation used for the stacked rows
    output: object  # Node, B x d_out in ``order``
    pooled_seq: np.ndarray  # per-sample pooled sequence rows before details, in ``order``
    groups: list = field(default_factory=list)  # (task, Q node, W node)


def forward(tape: Tape, state: TrainState, x, routes, use_details: bool, trainable: bool) -> Forward:
    """Batched forward pass on ``tape``; samples are grouped by route."""
    x = as_matrix(x)
    routes = np.asarray(routes, dtype=np.int64)
    k = state.config.dims
    q0 = tape.leaf(state.qbank.q0, "q0", trainable and state.trains_queries)
    order, groups, seq_parts = [], [], []
    if state.uses_memory:
        for task in np.unique(routes):
            idx = np.flatnonzero(routes == task)
            q = encode_batch_on_tape(tape, state.encoder, q0, x[idx])
            mem = tape.leaf(state.bank.item(int(task)), f"memory.{task}", trainable)
            r, w = retrieve_on_tape(tape, q, mem)
            order.append(idx)
            groups.append((int(task), q, w))
            seq_parts.append(r)
        order = np.concatenate(order)
        seq = tape.concat_rows(seq_parts) if len(seq_parts) > 1 else seq_parts[0]
    else:
        order = np.arange(len(routes))
        seq = encode_batch_on_tape(tape, state.encoder, q0, x)
    batch = len(order)
    pooled_seq = seq.value.reshape(batch, k.l, k.c).mean(axis=1)
    if use_details:
        details = tape.const(detail_tokens_batch(state.detail, x[order]))
        rows = tape.concat_rows([seq, details])
        pool = _pool_matrix(batch, k.l, k.v)
    else:
        rows = seq
        pool = _pool_matrix(batch, k.l, 0)
    pooled = tape.matmul(tape.const(pool), rows)
    out = state.decoder.on_tape(tape, pooled, trainable)
    return Forward(order, out, pooled_seq, groups)


def predict_batch(state: TrainState, x, routes, use_details: bool) -> tuple[np.ndarray, np.ndarray]:
    """Outputs and pooled sequence rows in the original sample order."""
    fw = forward(Tape(), state, x, routes, use_details, trainable=False)
    out = np.empty_like(fw.output.value)
    pooled = np.empty_like(fw.pooled_seq)
    out[fw.order] = fw.output.value
    pooled[fw.order] = fw.pooled_seq
    return out, pooled


# ---------------------------------------------------------------------------
# stages


def _require_stage(state: TrainState, stage: int) -> None:
    if state.finished or state.stage != stage:
        where = "finished" if state.finished else f"stage {state.stage}"
        raise SequencingError(f"stage {stage} training requested but the run is at {where}")


def _check_loss(value: float) -> None:
    if not math.isfinite(value):
        raise NumericError("non-finite loss")


@contextmanager
def _step_guard(stage: int, step: int):
    """Tag numeric failures with their stage and step; finiteness is checked explicitly."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except NumericError as exc:
        raise NumericError(f"stage {stage} step {step}: {exc}") from None


def stage1_train(state: TrainState, data: Dataset) -> TrainState:
    """Fit only the gate, by cross-entropy on task labels of pooled queries."""
    _require_stage(state, 1)
    cfg = state.config
    rng = stream(cfg.seed, "batch.stage1")
    opt = Adam(cfg.lr_early)
    params = state.gate.params()
    for step in range(cfg.stage1_steps):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        with _step_guard(1, step):
            tape = Tape()
            pooled = tape.const(pooled_queries(state, data.x[idx]))
            loss = tape.cross_entropy(state.gate.logits_on_tape(tape, pooled, True), data.tasks[idx])
            _check_loss(loss.value[0, 0])
            opt.apply(params, tape.backward(loss))
        state.losses[1].append(float(loss.value[0, 0]))
        state.step += 1
    state.lr_used[1] = cfg.lr_early
    state.stage = 2
    return state


def _train_routes(state: TrainState, data: Dataset, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if state.random_routing:
        return rng.integers(0, state.config.dims.n, size=len(idx))
    return data.tasks[idx]


def _generation_stage(state: TrainState, data: Dataset, stage: int, steps: int, lr: float,
                      use_details: bool) -> None:
    cfg = state.config
    rng = stream(cfg.seed, f"batch.stage{stage}")
    route_rng = stream(cfg.seed, f"ablation.routing.stage{stage}")
    opt = Adam(lr)
    for step in range(steps):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        routes = _train_routes(state, data, idx, route_rng)
        with _step_guard(stage, step):
            tape = Tape()
            fw = forward(tape, state, data.x[idx], routes, use_details, trainable=True)
            loss = tape.mse(fw.output, tape.const(data.targets[idx][fw.order]))
            _check_loss(loss.value[0, 0])
            grads = tape.backward(loss)
            opt.apply(state.params(), grads)
            # EMA write uses this step's forward Q and W; one write per routed item per batch
            for task, q, w in fw.groups:
                atm.update(state.bank, task, q.value, w.value)
        state.losses[stage].append(float(loss.value[0, 0]))
        state.routes_log[stage].extend(int(r) for r in routes)
        state.step += 1
    state.lr_used[stage] = lr


def stage2_train(state: TrainState, data: Dataset, eval_data: Optional[Dataset] = None) -> TrainState:
    """Train queries, memory and decoder on retrieved queries only."""
    _require_stage(state, 2)
    cfg = state.config
    _generation_stage(state, data, 2, cfg.stage2_steps, cfg.lr_early, use_details=False)
    if eval_data is not None:
        state.eval_losses[2] = teacher_forced_loss(state, eval_data, use_details=False)
    state.stage = 3
    return state


def stage3_train(state: TrainState, data: Dataset, eval_data: Optional[Dataset] = None) -> TrainState:
    """Continue at ``lr_late`` with detail tokens appended (unless the arm drops them)."""
    _require_stage(state, 3)
    cfg = state.config
    _generation_stage(state, data, 3, cfg.stage3_steps, cfg.lr_late, use_details=state.uses_details)
    if eval_data is not None:
        state.eval_losses[3] = teacher_forced_loss(state, eval_data, use_details=state.uses_details)
    state.finished = True
    state.bank.frozen = True
    return state


def teacher_forced_loss(state: TrainState, data: Dataset, use_details: bool) -> float:
    """Held-out MSE routed the way the arm trains (labels, or seeded random for ``no_gate``)."""
    if state.random_routing:
        routes = random_routes(state.config.seed, "eval", len(data), state.config.dims.n)
    else:
        routes = data.tasks
    out, _ = predict_batch(state, data.x, routes, use_details)
    return float(np.mean((out - data.targets) ** 2))


# ---------------------------------------------------------------------------
# inference


def _require_finished(state: TrainState) -> None:
    if not state.finished:
        raise ContractError("inference requires a completed training run")
    state.bank.frozen = True


def _condition_rows(state: TrainState, x, task: Optional[int]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    x = as_matrix(x)
    q = encode(state.encoder, state.qbank, x)
    seq = atm.modulate(state.bank, state.gate, q, task, training=False).retrieved if state.uses_memory else q
    details = detail_tokens(state.detail, x) if state.uses_details else None
    return seq, details


def infer(state: TrainState, x, task_label: Optional[int] = None) -> np.ndarray:
    """Decoder output for one condition; routes by the gate unless a label is given."""
    _require_finished(state)
    seq, details = _condition_rows(state, x, task_label)
    return state.decoder(mean_pool_rows(assemble(seq, details)))


def composed_input(state: TrainState, conditions: Sequence[tuple]) -> np.ndarray:
    """Assembled rows for several conditions: all retrieved blocks, then all detail blocks."""
    _require_finished(state)
    if len(conditions) < 1:
        raise ContractError("composition needs at least one condition")
    seqs, details = [], []
    for x, task in conditions:
        s, dt = _condition_rows(state, x, int(task))
        seqs.append(atm.RetrievalResult(s, np.empty((s.shape[0], 0)), int(task)))
        if dt is not None:
            details.append(dt)
    composed = atm.compose(seqs)
    return assemble(composed, concat_rows(details) if details else None)


def infer_composed(state: TrainState, conditions: Sequence[tuple]) -> np.ndarray:
    if not conditions:
        raise ContractError("infer_composed needs a non-empty list of (x, task) conditions")
    return state.decoder(mean_pool_rows(composed_input(state, conditions)))


# ---------------------------------------------------------------------------
# evaluation


def eval_routes(state: TrainState, data: Dataset) -> np.ndarray:
    if state.random_routing:
        return random_routes(state.config.seed, "eval", len(data), state.config.dims.n)
    return gate_routes(state, data.x)


def structure_similarity(bench: SynthBench, outputs: np.ndarray, data: Dataset) -> float:
    """Mean Struc-Sim over structure samples; maps scaled by the targets' range."""
    t = int(TaskKind.STRUCTURE) if bench.n > TaskKind.STRUCTURE else bench.n - 1
    rows = data.tasks == t
    if not rows.any():
        return 1.0
    blk = bench.block(t, bench.d_out)
    target = data.targets[rows][:, blk]
    pred = outputs[rows][:, blk]
    lo, hi = float(target.min()), float(target.max())
    sims = [struc_sim(to_unit_range(p[None], lo, hi), to_unit_range(q[None], lo, hi))
            for p, q in zip(pred, target)]
    return float(np.mean(sims))


def composition_errors(state: TrainState, data: Dataset, bench: SynthBench, pairs: int = 50) -> dict[str, float]:
    """Subject+style composed inference against mismatched single-condition outputs."""
    subj = np.flatnonzero(data.tasks == 0)[:pairs]
    style = np.flatnonzero(data.tasks == 1)[:pairs]
    k = min(len(subj), len(style))
    b_subj, b_style = bench.block(0, bench.d_out), bench.block(1, bench.d_out)
    acc = {"compose_subject_err": 0.0, "compose_style_err": 0.0,
           "baseline_subject_err": 0.0, "baseline_style_err": 0.0}
    for i, j in zip(subj[:k], style[:k]):
        xs, xy = data.x[i:i + 1], data.x[j:j + 1]
        ts, ty = data.targets[i, b_subj], data.targets[j, b_style]
        both = infer_composed(state, [(xs, 0), (xy, 1)])[0]
        only_subject = infer(state, xs, 0)[0]
        only_style = infer(state, xy, 1)[0]
        acc["compose_subject_err"] += np.mean((both[b_subj] - ts) ** 2)
        acc["compose_style_err"] += np.mean((both[b_style] - ty) ** 2)
        acc["baseline_subject_err"] += np.mean((only_style[b_subj] - ts) ** 2)
        acc["baseline_style_err"] += np.mean((only_subject[b_style] - ty) ** 2)
    return {key: float(v / max(k, 1)) for key, v in acc.items()}


def evaluate(state: TrainState, data: Dataset, bench: SynthBench) -> MetricReport:
    routes = eval_routes(state, data)
    outputs, pooled_seq = predict_batch(state, data.x, routes, state.uses_details)
    raw = pooled_queries(state, data.x)
    extras = {"gate_accuracy_stage1": float(np.mean(gate_routes(state, data.x) == data.tasks))}
    if bench.n >= 2:
        extras.update(composition_errors(state, data, bench))
    lead = state.losses[2][:50]
    trail = state.losses[2][-50:]
    if lead:
        extras["stage2_leading_mean"] = float(np.mean(lead))
        extras["stage2_trailing_mean"] = float(np.mean(trail))
    return MetricReport(
        arm=state.arm,
        seed=state.config.seed,
        gate_accuracy=float(np.mean(routes == data.tasks)),
        separation_ratio_raw=separation_ratio(raw, data.tasks),
        separation_ratio_retrieved=separation_ratio(pooled_seq, data.tasks),
        final_loss=float(np.mean((outputs - data.targets) ** 2)),
        struc_sim=structure_similarity(bench, outputs, data),
        stage_losses={f"stage{s}": v for s, v in sorted(state.eval_losses.items())},
        extras=extras,
    )


@dataclass
class RunResult:
    state: TrainState
    metrics: MetricReport
    stage_seconds: dict[int, float]
    stage1_gate_accuracy: float


def run(config: TrainConfig, arm: str = "full",
        on_stage: Optional[Callable[[int, TrainState], None]] = None) -> RunResult:
    """Build data, train all three stages, and evaluate on the held-out split.

    ``on_stage(k, state)`` is called with k=0 after initialization and k=1..3
    after each stage.
    """
    train, held_out, bench = load_data(config)
    state = init_state(config, arm)
    if on_stage:
        on_stage(0, state)
    seconds = {}
    t0 = time.perf_counter()
    stage1_train(state, train)
    seconds[1] = time.perf_counter() - t0
    gate_acc = float(np.mean(gate_routes(state, held_out.x) == held_out.tasks))
    if on_stage:
        on_stage(1, state)
    for k, stage in ((2, stage2_train), (3, stage3_train)):
        t0 = time.perf_counter()
        stage(state, train, held_out)
        seconds[k] = time.perf_counter() - t0
        if on_stage:
            on_stage(k, state)
    metrics = evaluate(state, held_out, bench)
    metrics.extras["gate_accuracy_after_stage1"] = gate_acc
    return RunResult(state, metrics, seconds, gate_acc)
