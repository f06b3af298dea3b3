"""Minimal reverse-mode autodiff over dense 2-D float64 matrices.

Matrices are plain numpy arrays; the tape records primitive operations
eagerly and replays them in reverse creation order, which is a valid reverse
topological order for an eagerly built graph.  Only what the flow-matching
model needs is implemented: matmul, broadcast bias add, elementwise
arithmetic, GELU, row softmax, embedding gather, and a scalar reduction.

The same forward code can run in two modes: recorded on a :class:`Tape`
(training) or directly on arrays via :data:`RAW` (inference).  Both modes
invoke identical numpy calls in identical order, so their outputs are
bit-identical.
"""

from __future__ import annotations

import json
import math
from typing import Iterable, Optional, Sequence, Union

import numpy as np

CHECKPOINT_VERSION = "diffcore-v1"


class ShapeMismatchError(ValueError):
    pass


class GraphCycleError(RuntimeError):
    pass


def matrix2d(rows: int, cols: int, data: Sequence[float]) -> np.ndarray:
    """Build a validated rows x cols float64 matrix from row-major data."""
    arr = np.asarray(data, dtype=np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix entries must be finite")
    return arr


def as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


class Param:
    """A named trainable matrix with a persistent gradient buffer."""

    def __init__(self, value, name: str):
        self.value = as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def init_uniform(rows: int, cols: int, fan_in: int, name: str, rng: np.random.Generator) -> Param:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Param(rng.uniform(-bound, bound, size=(rows, cols)), name)


# ---------------------------------------------------------------------------
# primitive math shared by both execution modes

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu_value(x: np.ndarray) -> np.ndarray:
    """tanh-form GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    inner = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    x = as_matrix(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# tape

class Node:
    """One tape entry: a value, its eventual gradient, and a backward rule."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "index")

    def __init__(self, value: np.ndarray, parents: tuple, backward_fn, index: int):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad


Operand = Union[Node, Param, np.ndarray, float, int]


class Tape:
    """Eager operation recorder; one tape per forward/backward cycle."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._watched: dict[int, tuple[Param, Node]] = {}

    # -- node plumbing ------------------------------------------------------

    def _record(self, value: np.ndarray, parents: tuple[Node, ...], backward_fn) -> Node:
        for p in parents:
            if p.index >= len(self._nodes):
                raise GraphCycleError("parent recorded after child")
        node = Node(value, parents, backward_fn, len(self._nodes))
        self._nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._record(as_matrix(value), (), None)

    def param(self, p: Param) -> Node:
        """Leaf node for a Param; reused so repeated use accumulates grads."""
        entry = self._watched.get(id(p))
        if entry is not None:
            return entry[1]
        node = self._record(p.value, (), None)
        self._watched[id(p)] = (p, node)
        return node

    def _lift(self, x: Operand) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, Param):
            return self.param(x)
        return self.constant(x)

    # -- primitive ops ------------------------------------------------------

    def matmul(self, a: Operand, b: Operand) -> Node:
        a, b = self._lift(a), self._lift(b)
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul {a.shape} @ {b.shape}")
        av, bv = a.value, b.value

        def backward(g):
            a.accumulate(g @ bv.T)
            b.accumulate(av.T @ g)

        return self._record(av @ bv, (a, b), backward)

    def add(self, a: Operand, b: Operand) -> Node:
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise ShapeMismatchError(f"add {a.shape} + {b.shape}")

        def backward(g):
            a.accumulate(g)
            b.accumulate(g)

        return self._record(a.value + b.value, (a, b), backward)

    def sub(self, a: Operand, b: Operand) -> Node:
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise ShapeMismatchError(f"sub {a.shape} - {b.shape}")

        def backward(g):
            a.accumulate(g)
            b.accumulate(-g)

        return self._record(a.value - b.value, (a, b), backward)

    def mul(self, a: Operand, b: Operand) -> Node:
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise ShapeMismatchError(f"mul {a.shape} * {b.shape}")
        av, bv = a.value, b.value

        def backward(g):
            a.accumulate(g * bv)
            b.accumulate(g * av)

        return self._record(av * bv, (a, b), backward)

    def scalar_mul(self, a: Operand, c: float) -> Node:
        a = self._lift(a)
        c = float(c)

        def backward(g):
            a.accumulate(c * g)

        return self._record(c * a.value, (a,), backward)

    def add_rowvec(self, a: Operand, r: Operand) -> Node:
        """a (m x n) + r (1 x n), r broadcast over rows."""
        a, r = self._lift(a), self._lift(r)
        if r.shape[0] != 1 or r.shape[1] != a.shape[1]:
            raise ShapeMismatchError(f"add_rowvec {a.shape} + {r.shape}")

        def backward(g):
            a.accumulate(g)
            r.accumulate(g.sum(axis=0, keepdims=True))

        return self._record(a.value + r.value, (a, r), backward)

    def transpose(self, a: Operand) -> Node:
        a = self._lift(a)

        def backward(g):
            a.accumulate(g.T)

        return self._record(a.value.T.copy(), (a,), backward)

    def gelu(self, a: Operand) -> Node:
        a = self._lift(a)
        av = a.value

        def backward(g):
            a.accumulate(g * gelu_grad(av))

        return self._record(gelu_value(av), (a,), backward)

    def softmax_rows(self, a: Operand) -> Node:
        a = self._lift(a)
        y = softmax_rows(a.value)

        def backward(g):
            # dL/dx = y * (g - rowsum(g * y))
            a.accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))

        return self._record(y, (a,), backward)

    def sum_all(self, a: Operand) -> Node:
        a = self._lift(a)
        shape = a.shape

        def backward(g):
            a.accumulate(np.full(shape, g[0, 0]))

        return self._record(np.array([[a.value.sum()]]), (a,), backward)

    def embed_rows(self, table: Operand, indices: Sequence[int]) -> Node:
        table = self._lift(table)
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise ShapeMismatchError("embed_rows needs a non-empty 1-D index list")
        if idx.min() < 0 or idx.max() >= table.shape[0]:
            raise ShapeMismatchError(f"index out of range for table with {table.shape[0]} rows")
        tshape = table.shape

        def backward(g):
            acc = np.zeros(tshape)
            np.add.at(acc, idx, g)
            table.accumulate(acc)

        return self._record(table.value[idx].copy(), (table,), backward)

    # -- backward -----------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Populate Param.grad for every watched parameter reachable from loss.

        ``loss`` must be a 1x1 node recorded on this tape.  Gradients
        accumulate into Param.grad (callers zero them between cycles).
        """
        if loss.shape != (1, 1):
            raise ShapeMismatchError(f"loss must be 1x1, got {loss.shape}")
        if loss.index >= len(self._nodes) or self._nodes[loss.index] is not loss:
            raise GraphCycleError("loss was not recorded on this tape")
        loss.grad = np.ones((1, 1))
        for node in reversed(self._nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        for p, leaf in self._watched.values():
            if leaf.grad is not None:
                p.grad += leaf.grad


class RawOps:
    """Array-in/array-out twin of Tape for no-gradient forward passes."""

    def constant(self, value):
        return as_matrix(value)

    def param(self, p: Param):
        return p.value

    def _lift(self, x):
        if isinstance(x, Param):
            return x.value
        return as_matrix(x)

    def matmul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul {a.shape} @ {b.shape}")
        return a @ b

    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise ShapeMismatchError(f"add {a.shape} + {b.shape}")
        return a + b

    def sub(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise ShapeMismatchError(f"sub {a.shape} - {b.shape}")
        return a - b

    def mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise ShapeMismatchError(f"mul {a.shape} * {b.shape}")
        return a * b

    def scalar_mul(self, a, c):
        return float(c) * self._lift(a)

    def add_rowvec(self, a, r):
        a, r = self._lift(a), self._lift(r)
        if r.shape[0] != 1 or r.shape[1] != a.shape[1]:
            raise ShapeMismatchError(f"add_rowvec {a.shape} + {r.shape}")
        return a + r

    def transpose(self, a):
        return self._lift(a).T.copy()

    def gelu(self, a):
        return gelu_value(self._lift(a))

    def softmax_rows(self, a):
        return softmax_rows(self._lift(a))

    def sum_all(self, a):
        return np.array([[self._lift(a).sum()]])

    def embed_rows(self, table, indices):
        table = self._lift(table)
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise ShapeMismatchError("embed_rows needs a non-empty 1-D index list")
        if idx.min() < 0 or idx.max() >= table.shape[0]:
            raise ShapeMismatchError(f"index out of range for table with {table.shape[0]} rows")
        return table[idx].copy()


RAW = RawOps()


def value_of(x) -> np.ndarray:
    """The plain array behind a Node/Param/array operand."""
    if isinstance(x, Node):
        return x.value
    if isinstance(x, Param):
        return x.value
    return as_matrix(x)


# ---------------------------------------------------------------------------
# composite layers, usable in either execution mode

def linear(ops, x, W: Param, b: Param):
    """y = x W + b with the bias row broadcast over rows of x."""
    if value_of(x).shape[1] != W.shape[0]:
        raise ShapeMismatchError(f"linear: x cols {value_of(x).shape[1]} != W rows {W.shape[0]}")
    if b.shape != (1, W.shape[1]):
        raise ShapeMismatchError(f"linear: bias shape {b.shape} != (1, {W.shape[1]})")
    return ops.add_rowvec(ops.matmul(x, W), b)


def cross_attention(ops, H, C, Wq: Param, Wk: Param, Wv: Param):
    """softmax(Q(H) K(C)^T / sqrt(d_k)) V(C).

    Every output row is a convex combination of the value-projected
    condition rows, so attention can only interpolate the condition.
    """
    q = ops.matmul(H, Wq)
    k = ops.matmul(C, Wk)
    v = ops.matmul(C, Wv)
    if Wq.shape[1] != Wk.shape[1]:
        raise ShapeMismatchError(f"query width {Wq.shape[1]} != key width {Wk.shape[1]}")
    d_k = Wq.shape[1]
    scores = ops.scalar_mul(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(d_k))
    return ops.matmul(ops.softmax_rows(scores), v)


# ---------------------------------------------------------------------------
# optimizers

def sgd_step(params: Iterable[Param], lr: float) -> None:
    for p in params:
        p.value -= lr * p.grad


class AdamW:
    """Decoupled weight-decay Adam; moments and step count persist across calls."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: Iterable[Param]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in params:
            m = self._m.setdefault(p.name, np.zeros_like(p.value))
            v = self._v.setdefault(p.name, np.zeros_like(p.value))
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.value -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value)

    def state_dict(self) -> dict:
        return {
            "type": "adamw",
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
            "m": {k: v.flatten().tolist() for k, v in self._m.items()},
            "v": {k: v.flatten().tolist() for k, v in self._v.items()},
        }

    def load_state_dict(self, state: dict, params: Iterable[Param]) -> None:
        shapes = {p.name: p.value.shape for p in params}
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.weight_decay = state["weight_decay"]
        self.step_count = state["step_count"]
        self._m = {k: np.asarray(v).reshape(shapes[k]) for k, v in state["m"].items()}
        self._v = {k: np.asarray(v).reshape(shapes[k]) for k, v in state["v"].items()}


# ---------------------------------------------------------------------------
# checkpoint IO

def checkpoint_to_dict(params: Iterable[Param], optimizer: Optional[AdamW] = None) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "params": {
            p.name: {
                "rows": p.value.shape[0],
                "cols": p.value.shape[1],
                "values": p.value.flatten().tolist(),
            }
            for p in params
        },
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    return doc


def checkpoint_from_dict(doc: dict) -> tuple[dict[str, Param], Optional[dict]]:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {doc.get('version')!r}")
    params = {
        name: Param(matrix2d(entry["rows"], entry["cols"], entry["values"]), name)
        for name, entry in doc["params"].items()
    }
    return params, doc.get("optimizer")


def save_checkpoint(path, params: Iterable[Param], optimizer: Optional[AdamW] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(params, optimizer), fh)


def load_checkpoint(path) -> tuple[dict[str, Param], Optional[dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        return checkpoint_from_dict(json.load(fh))
