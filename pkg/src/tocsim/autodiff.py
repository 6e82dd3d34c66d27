"""Define-by-run reverse-mode automatic differentiation over dense fp64 arrays.

Every operation appends a node to a per-thread :class:`Graph`; :func:`backward`
walks that graph in reverse append order, populates ``.grad`` on the leaves
and clears the graph.  Operations that need a custom vector-Jacobian product
(channel models, for example) go through :func:`apply`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError, StateError

__all__ = [
    "Tensor",
    "Graph",
    "SgdConfig",
    "SGD",
    "apply",
    "as_tensor",
    "backward",
    "current_graph",
    "no_grad",
    "use_graph",
    "sgd_step",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "exp",
    "log",
    "sqrt",
    "reciprocal",
    "matmul",
    "transpose",
    "tsum",
    "mean",
    "add_bias",
    "mul_rows",
    "log_softmax",
    "gather_rows",
    "concat_rows",
]


class Node(NamedTuple):
    tag: str
    inputs: tuple
    vjp: Callable


class Graph:
    """Append-only tape of operations; reverse append order is a valid
    topological order for the backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0
        self.enabled = True

    def record(self, tag, inputs, vjp) -> int:
        self.nodes.append(Node(tag, tuple(inputs), vjp))
        return len(self.nodes) - 1

    def clear(self):
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def current_graph() -> Graph:
    graph = getattr(_local, "graph", None)
    if graph is None:
        graph = _local.graph = Graph()
    return graph


@contextmanager
def use_graph(graph: Graph):
    """Record operations on ``graph`` instead of the thread's default graph."""
    previous = getattr(_local, "graph", None)
    _local.graph = graph
    try:
        yield graph
    finally:
        _local.graph = previous


@contextmanager
def no_grad():
    """Evaluate without recording nodes (inference, evaluation passes)."""
    graph = current_graph()
    previous = graph.enabled
    graph.enabled = False
    try:
        yield
    finally:
        graph.enabled = previous


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "_graph", "_gen")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: int | None = None
        self._graph: Graph | None = None
        self._gen = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._node = None
        t._graph = None
        t._gen = -1
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._live()

    def _live(self) -> bool:
        return self._node is not None and self._gen == self._graph.generation

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(tag: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of operation ``tag``.

    ``vjp(grad_out)`` must return one gradient (or ``None``) per input.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{tag} produced non-finite values")
    out = Tensor._wrap(np.asarray(data, dtype=np.float64))
    graph = current_graph()
    if graph.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = graph.record(tag, inputs, vjp)
        out._graph = graph
        out._gen = graph.generation
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None):
    """Populate ``.grad`` of every leaf reachable from ``loss`` and clear its graph.

    ``grad`` seeds the pass with an upstream gradient; it is required when
    ``loss`` is not a scalar.
    """
    if grad is None:
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != loss.shape:
            raise DimensionError(f"upstream gradient {grad.shape} does not match {loss.shape}")
    if not loss._live():
        raise StateError("tensor is not part of a live graph; run a new forward pass")
    graph = loss._graph
    gen = graph.generation
    pending: dict[int, np.ndarray] = {loss._node: grad}
    leaves: dict[int, Tensor] = {}
    nodes = graph.nodes
    for idx in range(loss._node, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t.requires_grad:
                continue
            if t._graph is graph and t._gen == gen and t._node is not None:
                if gi is not None:
                    prev = pending.get(t._node)
                    pending[t._node] = gi if prev is None else prev + gi
            else:
                leaves[id(t)] = t
                if gi is not None:
                    t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    graph.clear()


# ---------------------------------------------------------------- elementwise


def _binary_operands(a, b, tag):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{tag}: shapes {a.shape} and {b.shape} do not broadcast")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return apply("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return apply("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return apply(
        "mul", ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b))
    )


def neg(x) -> Tensor:
    return scale(x, -1.0)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return apply("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return apply("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return apply("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise DomainError("log of a non-positive entry")
    xd = x.data
    return apply("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if (x.data < 0).any():
        raise DomainError("sqrt of a negative entry")
    out = np.sqrt(x.data)
    if (out == 0).any() and x.requires_grad:
        raise DomainError("sqrt is not differentiable at zero")
    return apply("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    if (x.data == 0).any():
        raise DomainError("reciprocal of zero")
    out = 1.0 / x.data
    return apply("reciprocal", out, (x,), lambda g: (-g * out * out,))


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return apply("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return apply("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply("sum", np.asarray(out), (x,), vjp)


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(tsum(x), 1.0 / x.size)


def add_bias(x, b) -> Tensor:
    """Row-broadcast ``x[n, m] + b[m]``."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {b.shape} does not match {x.shape}")
    return apply("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def mul_rows(x, s) -> Tensor:
    """Scale row ``i`` of ``x[n, m]`` by ``s[i, 0]``."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim != 2 or s.shape != (x.shape[0], 1):
        raise DimensionError(f"mul_rows: scale {s.shape} does not match {x.shape}")
    xd, sd = x.data, s.data
    return apply(
        "mul_rows", xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=1, keepdims=True))
    )


def log_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-softmax with max subtraction.

    Entries where ``mask`` is True are left out of the normalisation; their
    output is 0 and they receive no gradient.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError("log_softmax expects [batch, classes] with classes >= 1")
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.all(axis=1).any():
            raise DimensionError("log_softmax: a row has every entry masked")
        xd = np.where(mask, -np.inf, xd)
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    if mask is not None:
        out = np.where(mask, 0.0, out)
    probs = np.exp(out)
    if mask is not None:
        probs = np.where(mask, 0.0, probs)

    def vjp(g):
        if mask is not None:
            g = np.where(mask, 0.0, g)
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return apply("log_softmax", out, (x,), vjp)


def gather_rows(x, index) -> Tensor:
    """Pick ``x[i, index[i]]`` for every row, giving a vector."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError("gather_rows: one column index per row is required")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return apply("gather_rows", x.data[rows, index], (x,), vjp)


def concat_rows(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: {a.shape} and {b.shape} differ in width")
    n = a.shape[0]
    return apply(
        "concat_rows", np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:n], g[n:])
    )


# ------------------------------------------------------------------ optimizer


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


class SGD:
    """Plain SGD with optional heavy-ball momentum; clears grads after stepping."""

    def __init__(self, params: Sequence[Tensor], cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self._buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise StateError("parameter has no gradient; call backward() first")
        lr, m = self.cfg.learning_rate, self.cfg.momentum
        for i, p in enumerate(self.params):
            g = p.grad
            if m:
                buf = g.copy() if self._buffers[i] is None else m * self._buffers[i] + g
                self._buffers[i] = buf
                g = buf
            p.data -= lr * g
            p.grad = None


def sgd_step(params: Sequence[Tensor], cfg: SgdConfig, optimizer: SGD | None = None) -> SGD:
    """One SGD update.  Pass the returned optimizer back in to keep momentum state."""
    if optimizer is None:
        optimizer = SGD(params, cfg)
    optimizer.step()
    return optimizer
