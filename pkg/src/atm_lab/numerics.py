"""Dense float64 matrix ops, a small reverse-mode tape, Adam, and seeded streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The tape
covers a closed set of differentiable primitives; nothing else is supported.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation's precondition is violated."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite entries produced by {what}")
    return a


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# value-level operations


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _finite(a @ b, "matmul")


def transpose(x) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(x).T)


def scale(x, s: float) -> np.ndarray:
    return _finite(as_matrix(x) * float(s), "scale")


def add(a, b) -> np.ndarray:
    """Elementwise sum; ``b`` may be a single row added to every row of ``a``."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    return _finite(a + b, "add")


def relu(x) -> np.ndarray:
    return np.maximum(as_matrix(x), 0.0)


def softmax_rows(x) -> np.ndarray:
    x = as_matrix(x)
    if x.size == 0:
        raise ContractError("softmax_rows: empty input")
    _finite(x, "softmax_rows input")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def mean_pool_rows(x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[0] == 0:
        raise ContractError("mean_pool_rows: no rows")
    return x.mean(axis=0, keepdims=True)


def concat_rows(parts: Sequence) -> np.ndarray:
    mats = [as_matrix(p) for p in parts]
    if not mats:
        raise ContractError("concat_rows: nothing to concatenate")
    cols = {m.shape[1] for m in mats}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ: {[m.shape for m in mats]}")
    return np.concatenate(mats, axis=0)


def mse(pred, target) -> float:
    pred, target = as_matrix(pred), as_matrix(target)
    _same_shape(pred, target, "mse")
    return float(np.mean((pred - target) ** 2))


def log_softmax_rows(x) -> np.ndarray:
    x = as_matrix(x)
    s = x - x.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows")
    lp = log_softmax_rows(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def pca_2d(x) -> np.ndarray:
    """Project rows onto the top two principal axes (sign fixed by largest loading)."""
    x = as_matrix(x)
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], x.shape[1]))])
    for k in range(axes.shape[0]):
        j = int(np.argmax(np.abs(axes[k])))
        if axes[k, j] < 0:
            axes[k] = -axes[k]
    return centered @ axes.T


# ---------------------------------------------------------------------------
# reverse-mode tape

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    id: int
    value: np.ndarray
    op: str
    inputs: tuple[int, ...]
    requires_grad: bool
    name: Optional[str] = None
    vjp: Optional[VJP] = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


class Tape:
    """Records primitive ops in execution order; ``backward`` walks them in reverse."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, value, op, inputs=(), vjp=None, name=None, requires_grad=None) -> Node:
        value = as_matrix(value)
        _finite(value, op)
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        node = Node(len(self.nodes), value, op, tuple(inputs), requires_grad, name,
                    vjp if requires_grad else None)
        self.nodes.append(node)
        return node

    def _own(self, *nodes: Node) -> None:
        for n in nodes:
            if n.id >= len(self.nodes) or self.nodes[n.id] is not n:
                raise ContractError(f"node {n.id} does not belong to this tape")

    # leaves
    def leaf(self, value, name: str, requires_grad: bool = True) -> Node:
        return self._push(value, "leaf", name=name, requires_grad=requires_grad)

    def const(self, value) -> Node:
        return self._push(value, "const", requires_grad=False)

    # primitives
    def matmul(self, a: Node, b: Node) -> Node:
        self._own(a, b)
        av, bv = a.value, b.value
        out = matmul(av, bv)
        return self._push(out, "matmul", (a.id, b.id), lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, x: Node) -> Node:
        self._own(x)
        return self._push(transpose(x.value), "transpose", (x.id,), lambda g: (g.T,))

    def add(self, a: Node, b: Node) -> Node:
        self._own(a, b)
        out = add(a.value, b.value)
        broadcast = b.shape != a.shape

        def vjp(g):
            return g, (g.sum(axis=0, keepdims=True) if broadcast else g)

        return self._push(out, "add", (a.id, b.id), vjp)

    def scale(self, x: Node, s: float) -> Node:
        self._own(x)
        s = float(s)
        return self._push(scale(x.value, s), "scale", (x.id,), lambda g: (g * s,))

    def relu(self, x: Node) -> Node:
        self._own(x)
        mask = x.value > 0
        return self._push(relu(x.value), "relu", (x.id,), lambda g: (g * mask,))

    def softmax_rows(self, x: Node) -> Node:
        self._own(x)
        y = softmax_rows(x.value)

        def vjp(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

        return self._push(y, "softmax_rows", (x.id,), vjp)

    def mean_pool_rows(self, x: Node) -> Node:
        self._own(x)
        rows, cols = x.shape
        return self._push(mean_pool_rows(x.value), "mean_pool_rows", (x.id,),
                          lambda g: (np.broadcast_to(g / rows, (rows, cols)).copy(),))

    def concat_rows(self, parts: Sequence[Node]) -> Node:
        self._own(*parts)
        out = concat_rows([p.value for p in parts])
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])

        def vjp(g):
            return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(parts)))

        return self._push(out, "concat_rows", tuple(p.id for p in parts), vjp)

    def sum(self, x: Node) -> Node:
        self._own(x)
        shape = x.shape
        return self._push([[x.value.sum()]], "sum", (x.id,),
                          lambda g: (np.full(shape, g[0, 0]),))

    def mse(self, pred: Node, target: Node) -> Node:
        self._own(pred, target)
        _same_shape(pred.value, target.value, "mse")
        diff = pred.value - target.value
        k = 2.0 / diff.size
        return self._push([[np.mean(diff ** 2)]], "mse", (pred.id, target.id),
                          lambda g: (g[0, 0] * k * diff, -g[0, 0] * k * diff))

    def cross_entropy(self, logits: Node, labels) -> Node:
        self._own(logits)
        labels = np.asarray(labels, dtype=np.int64)
        loss = cross_entropy(logits.value, labels)
        p = softmax_rows(logits.value)
        p[np.arange(len(labels)), labels] -= 1.0
        p /= len(labels)
        return self._push([[loss]], "cross_entropy", (logits.id,), lambda g: (g[0, 0] * p,))

    # backward
    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every named leaf that requires them."""
        self._own(loss)
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not self.nodes[inp].requires_grad:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + gi
                else:
                    grads[inp] = np.array(gi, dtype=np.float64)
        out = {}
        for node in self.nodes:
            if node.op == "leaf" and node.requires_grad:
                out[node.name] = grads.get(node.id, np.zeros_like(node.value))
        return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Bias-corrected Adam update, applied to ``param`` in place."""
    if not (param.shape == grad.shape == state.m.shape):
        raise DimensionError(
            f"adam_step: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


class Adam:
    """Per-parameter Adam states keyed by name; records the last learning rate."""

    def __init__(self, lr: float):
        self.lr = lr
        self.states: dict[str, AdamState] = {}
        self.last_lr: Optional[float] = None

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = params[name]
            state = self.states.setdefault(name, AdamState.like(p))
            adam_step(state, p, g, self.lr)
        self.last_lr = self.lr


# ---------------------------------------------------------------------------
# seeded streams


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 generator for a named sub-stream of ``seed``.

    The stream id is a CRC32 of the name, so adding a new consumer never
    shifts the draws of existing ones.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))
