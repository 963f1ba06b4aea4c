"""Task-specific memory: attention retrieval, soft-aggregation EMA writes, and the gate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import (
    ContractError,
    DimensionError,
    Tape,
    Node,
    as_matrix,
    concat_rows,
    mean_pool_rows,
    relu,
    softmax_rows,
)


class RoutingError(IndexError):
    """Task index does not name a memory item."""


class StateError(RuntimeError):
    """Operation not allowed in the object's current state (e.g. writing a frozen bank)."""


@dataclass
class MemoryBank:
    items: list[np.ndarray]
    alpha: float = 0.1
    epsilon_norm: float = 1e-8
    frozen: bool = False

    def __post_init__(self):
        self.items = [as_matrix(it).copy() for it in self.items]
        if not self.items:
            raise ContractError("a memory bank needs at least one item")
        shapes = {it.shape for it in self.items}
        if len(shapes) != 1:
            raise DimensionError(f"memory items differ in shape: {sorted(shapes)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")

    @classmethod
    def init(cls, rng: np.random.Generator, n: int, m: int, c: int, **kw) -> "MemoryBank":
        # std 1/sqrt(c) keeps initial logits QM^T/sqrt(c) small, so attention starts near uniform
        return cls([rng.normal(0.0, 1.0 / math.sqrt(c), size=(m, c)) for _ in range(n)], **kw)

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def m(self) -> int:
        return self.items[0].shape[0]

    @property
    def c(self) -> int:
        return self.items[0].shape[1]

    def item(self, task: int) -> np.ndarray:
        if not 0 <= task < self.n:
            raise RoutingError(f"task index {task} out of range for {self.n} memory items")
        return self.items[task]

    def copy(self) -> "MemoryBank":
        return MemoryBank([it.copy() for it in self.items], self.alpha, self.epsilon_norm, self.frozen)


@dataclass
class RetrievalResult:
    retrieved: np.ndarray  # l x c
    weights: np.ndarray  # l x m
    task: int = -1


def _check_queries(queries: np.ndarray, c: int) -> np.ndarray:
    queries = as_matrix(queries)
    if queries.shape[1] != c:
        raise DimensionError(f"queries have {queries.shape[1]} columns, memory has {c}")
    return queries


def attention_weights(queries, memory) -> np.ndarray:
    """Row-stochastic ``softmax(Q M^T / sqrt(c))``."""
    queries, memory = as_matrix(queries), as_matrix(memory)
    c = memory.shape[1]
    _check_queries(queries, c)
    return softmax_rows(queries @ memory.T / math.sqrt(c))


def retrieve(bank: MemoryBank, task: int, queries) -> RetrievalResult:
    memory = bank.item(task)
    queries = _check_queries(queries, bank.c)
    w = attention_weights(queries, memory)
    return RetrievalResult(w @ memory, w, task)


def retrieve_on_tape(tape: Tape, queries: Node, memory: Node) -> tuple[Node, Node]:
    """Differentiable retrieval; returns ``(R, W)`` nodes."""
    c = memory.shape[1]
    if queries.shape[1] != c:
        raise DimensionError(f"queries have {queries.shape[1]} columns, memory has {c}")
    logits = tape.scale(tape.matmul(queries, tape.transpose(memory)), 1.0 / math.sqrt(c))
    w = tape.softmax_rows(logits)
    return tape.matmul(w, memory), w


def normalize_columns(weights: np.ndarray, epsilon_norm: float = 1e-8) -> np.ndarray:
    """Divide each column by its sum over query rows, floored at ``epsilon_norm``."""
    weights = as_matrix(weights)
    return weights / np.maximum(weights.sum(axis=0, keepdims=True), epsilon_norm)


def soft_aggregate(memory, queries, weights, alpha: float, epsilon_norm: float = 1e-8) -> np.ndarray:
    """``alpha * N^T Q + (1 - alpha) * M`` with ``N`` the column-normalized weights."""
    memory, queries, weights = as_matrix(memory), as_matrix(queries), as_matrix(weights)
    m, c = memory.shape
    if queries.shape[1] != c or weights.shape != (queries.shape[0], m):
        raise DimensionError(
            f"update: memory {memory.shape}, queries {queries.shape}, weights {weights.shape}")
    if alpha == 0.0:
        return memory.copy()
    n = normalize_columns(weights, epsilon_norm)
    return alpha * (n.T @ queries) + (1.0 - alpha) * memory


def update(bank: MemoryBank, task: int, queries, weights) -> MemoryBank:
    """EMA write of item ``task``; other items are left untouched."""
    if bank.frozen:
        raise StateError("memory bank is frozen; items are fixed at inference")
    memory = bank.item(task)
    bank.items[task] = soft_aggregate(memory, queries, weights, bank.alpha, bank.epsilon_norm)
    return bank


@dataclass
class GateClassifier:
    """One-hidden-layer relu MLP over the mean-pooled query row."""

    w1: np.ndarray  # c x h
    b1: np.ndarray  # 1 x h
    w2: np.ndarray  # h x n
    b2: np.ndarray  # 1 x n

    @classmethod
    def zeros(cls, c: int, n: int, h: Optional[int] = None) -> "GateClassifier":
        h = 4 * c if h is None else h
        return cls(np.zeros((c, h)), np.zeros((1, h)), np.zeros((h, n)), np.zeros((1, n)))

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, n: int, h: Optional[int] = None) -> "GateClassifier":
        h = 4 * c if h is None else h
        return cls(rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, h)), np.zeros((1, h)),
                   rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, n)), np.zeros((1, n)))

    @property
    def c(self) -> int:
        return self.w1.shape[0]

    @property
    def n(self) -> int:
        return self.w2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"gate.w1": self.w1, "gate.b1": self.b1, "gate.w2": self.w2, "gate.b2": self.b2}

    def logits(self, pooled) -> np.ndarray:
        pooled = as_matrix(pooled)
        if pooled.shape[1] != self.c:
            raise DimensionError(f"gate expects {self.c} columns, got {pooled.shape[1]}")
        return relu(pooled @ self.w1 + self.b1) @ self.w2 + self.b2

    def logits_on_tape(self, tape: Tape, pooled: Node, trainable: bool) -> Node:
        p = {k: tape.leaf(v, k, trainable) for k, v in self.params().items()}
        hidden = tape.relu(tape.add(tape.matmul(pooled, p["gate.w1"]), p["gate.b1"]))
        return tape.add(tape.matmul(hidden, p["gate.w2"]), p["gate.b2"])


def gate_predict(gate: GateClassifier, queries) -> tuple[int, np.ndarray]:
    """Task index (lowest index on ties) and class distribution for one condition."""
    queries = as_matrix(queries)
    if queries.shape[1] != gate.c:
        raise DimensionError(f"gate expects {gate.c} columns, got {queries.shape[1]}")
    probs = softmax_rows(gate.logits(mean_pool_rows(queries)))[0]
    return int(np.argmax(probs)), probs


def modulate(bank: MemoryBank, gate: GateClassifier, queries, task_label: Optional[int] = None,
             training: bool = False) -> RetrievalResult:
    """Route, retrieve, and (when training) write back into the selected item."""
    if training and bank.frozen:
        raise StateError("cannot train against a frozen memory bank")
    task = gate_predict(gate, queries)[0] if task_label is None else int(task_label)
    result = retrieve(bank, task, queries)
    if training:
        update(bank, task, queries, result.weights)
    return result


def compose(results: Sequence[RetrievalResult]) -> np.ndarray:
    """Stack retrieved queries of several conditions along the sequence axis."""
    if not results:
        raise ContractError("compose needs at least one retrieval result")
    return concat_rows([r.retrieved for r in results])
