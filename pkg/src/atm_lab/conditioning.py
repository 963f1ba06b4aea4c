"""Trainable semantic queries pushed through frozen encoders.

The encoder is a fixed affine+relu mix of the queries and a raw condition
vector; the detail branch projects contiguous blocks of the condition into
extra tokens that keep fine-grained values the pooled semantic path loses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import DimensionError, Node, Tape, as_matrix, concat_rows, relu

# Encoder weights use std ENCODER_GAIN/sqrt(fan_in). Query tokens must spread by
# more than ~sqrt(c) in logit units or the EMA write drives every slot to the mean.
ENCODER_GAIN = 3.0


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass
class SemanticQueryBank:
    q0: np.ndarray  # l x c

    @classmethod
    def init(cls, rng: np.random.Generator, l: int, c: int) -> "SemanticQueryBank":
        return cls(rng.normal(0.0, 1.0, size=(l, c)))

    @property
    def l(self) -> int:
        return self.q0.shape[0]


@dataclass(frozen=True)
class FrozenEncoder:
    w_q: np.ndarray  # c x c
    w_x: np.ndarray  # d x c
    b: np.ndarray  # 1 x c

    def __post_init__(self):
        for name in ("w_q", "w_x", "b"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        c = self.w_q.shape[1]
        if self.w_q.shape != (c, c) or self.w_x.shape[1] != c or self.b.shape != (1, c):
            raise DimensionError(
                f"encoder shapes w_q {self.w_q.shape}, w_x {self.w_x.shape}, b {self.b.shape} disagree")

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, c: int) -> "FrozenEncoder":
        return cls(rng.normal(0.0, ENCODER_GAIN / math.sqrt(c), size=(c, c)),
                   rng.normal(0.0, ENCODER_GAIN / math.sqrt(d), size=(d, c)),
                   rng.normal(0.0, 0.1 * ENCODER_GAIN, size=(1, c)))

    @property
    def d(self) -> int:
        return self.w_x.shape[0]

    def condition_bias(self, x) -> np.ndarray:
        """``x w_x + b`` for one or many condition rows."""
        x = as_matrix(x)
        if x.shape[1] != self.d:
            raise DimensionError(f"condition has {x.shape[1]} entries, encoder expects {self.d}")
        return x @ self.w_x + self.b


def encode(enc: FrozenEncoder, qbank: SemanticQueryBank, x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[0] != 1:
        raise DimensionError(f"encode takes a single 1 x d condition, got {x.shape}")
    return relu(qbank.q0 @ enc.w_q + enc.condition_bias(x))


def encode_batch_on_tape(tape: Tape, enc: FrozenEncoder, q0: Node, x) -> Node:
    """Queries for a batch of conditions, stacked sample after sample ((B*l) x c).

    Only ``q0`` can carry gradient: the encoder weights enter as constants.
    """
    x = as_matrix(x)
    l = q0.shape[0]
    shared = tape.matmul(q0, tape.const(enc.w_q))
    tiled = tape.matmul(tape.const(np.tile(np.eye(l), (x.shape[0], 1))), shared)
    per_row = np.repeat(enc.condition_bias(x), l, axis=0)
    return tape.relu(tape.add(tiled, tape.const(per_row)))


def block_bounds(d: int, v: int) -> list[tuple[int, int]]:
    """Split ``range(d)`` into ``v`` contiguous blocks (earlier blocks take the remainder)."""
    if not 1 <= v <= d:
        raise DimensionError(f"cannot split {d} coordinates into {v} blocks")
    sizes = [d // v + (1 if k < d % v else 0) for k in range(v)]
    edges = np.cumsum([0] + sizes)
    return [(int(edges[k]), int(edges[k + 1])) for k in range(v)]


@dataclass(frozen=True)
class DetailBranch:
    w_v: np.ndarray  # d x c
    tokens_per_condition: int

    def __post_init__(self):
        object.__setattr__(self, "w_v", _freeze(self.w_v))
        block_bounds(self.w_v.shape[0], self.tokens_per_condition)

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, c: int, v: int) -> "DetailBranch":
        return cls(rng.normal(0.0, 1.0 / math.sqrt(d / v), size=(d, c)), v)

    @property
    def d(self) -> int:
        return self.w_v.shape[0]

    def masks(self) -> np.ndarray:
        masks = np.zeros((self.tokens_per_condition, self.d))
        for k, (lo, hi) in enumerate(block_bounds(self.d, self.tokens_per_condition)):
            masks[k, lo:hi] = 1.0
        return masks


def detail_tokens(branch: DetailBranch, x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape != (1, branch.d):
        raise DimensionError(f"detail branch expects a 1 x {branch.d} condition, got {x.shape}")
    return relu((branch.masks() * x) @ branch.w_v)


def detail_tokens_batch(branch: DetailBranch, x) -> np.ndarray:
    """Detail tokens for many conditions, stacked sample after sample ((B*v) x c)."""
    x = as_matrix(x)
    if x.shape[1] != branch.d:
        raise DimensionError(f"detail branch expects {branch.d} columns, got {x.shape[1]}")
    masked = branch.masks()[None, :, :] * x[:, None, :]
    return relu(masked.reshape(-1, branch.d) @ branch.w_v)


def assemble(retrieved, details: Optional[np.ndarray] = None) -> np.ndarray:
    retrieved = as_matrix(retrieved)
    if details is None:
        return retrieved
    return concat_rows([retrieved, details])
