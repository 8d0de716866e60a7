"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation returns a new Tensor that
remembers its parents and a closure computing parent gradients. Calling
``backward`` on a scalar output walks the graph once in reverse topological
order and then releases it, so a graph can be differentiated exactly once.

The op set is fixed and small (matmul, add, sub, mul, tanh, relu, softplus,
exp, log, square, sum, mean, concat, narrow, take_rows, reparameterized
Gaussian sampling). Everything else in the package is composed from these;
the one extension point is ``make_node`` for ops with custom backward rules.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeMismatchError",
    "NonFiniteError",
    "GraphError",
    "make_node",
    "constant",
    "add",
    "sub",
    "mul",
    "matmul",
    "tanh",
    "relu",
    "softplus",
    "exp",
    "log",
    "square",
    "tsum",
    "tmean",
    "concat",
    "narrow",
    "take_rows",
    "reparam_sample",
    "clamp_max",
    "backward",
    "evaluate",
    "grad_check",
]


class TensorError(Exception):
    pass


class ShapeMismatchError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class GraphError(TensorError):
    pass


class Tensor:
    """A dense float64 array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op",
                 "_visit")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self._visit = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A graph-free view of this tensor's current value."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar; every path funnels through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Create a graph node for a custom op.

    ``backward_fn(grad)`` must return one gradient array per parent (or None
    for parents that need none). Output values must be finite; a NaN or Inf
    result aborts the op rather than entering the graph.
    """
    arr = np.asarray(data, dtype=np.float64)
    # a single sum is far cheaper than isfinite().all() and still detects
    # any inf/nan (inf-inf yields nan, which propagates through the sum)
    if not math.isfinite(float(arr.sum())):
        if np.all(np.isfinite(arr)):  # sum overflowed on legitimately huge values
            raise NonFiniteError(f"op {op!r}: values too large to validate")
        raise NonFiniteError(f"op {op!r} produced a non-finite result")
    out = Tensor(arr)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    """Elementwise ops allow equal shapes, a scalar operand, or broadcast of
    a trailing-shaped operand over leading batch axes ((n,) with (B, n))."""
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ShapeMismatchError(f"{op}: shapes {sa} and {sb} do not align")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims of {a.shape} and {b.shape} differ")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), back, "matmul")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return make_node(y, (a,), back, "tanh")


def relu(a: Tensor) -> Tensor:
    def back(g):
        return (g * (a.data > 0.0),)

    return make_node(np.maximum(a.data, 0.0), (a,), back, "relu")


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0.0, a.data)

    def back(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return make_node(y, (a,), back, "softplus")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def back(g):
        return (g * y,)

    return make_node(y, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)

    def back(g):
        return (g / a.data,)

    return make_node(y, (a,), back, "log")


def square(a: Tensor) -> Tensor:
    def back(g):
        return (g * 2.0 * a.data,)

    return make_node(a.data * a.data, (a,), back, "square")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis not in (None, 0):
        raise ShapeMismatchError("sum supports only full reduction or axis=0")

    def back(g):
        return (np.broadcast_to(g, a.shape),)

    return make_node(a.data.sum(axis=axis), (a,), back, "sum")


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis not in (None, 0):
        raise ShapeMismatchError("mean supports only full reduction or axis=0")
    n = a.data.size if axis is None else a.shape[0]

    def back(g):
        return (np.broadcast_to(g, a.shape) / n,)

    return make_node(a.data.mean(axis=axis), (a,), back, "mean")


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ShapeMismatchError("concat of an empty list")
    widths = [p.shape[-1] for p in parts]
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeMismatchError(f"concat: leading shapes differ: {sorted(lead)}")
    offsets = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[..., offsets[k]:offsets[k + 1]] for k in range(len(parts)))

    return make_node(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), back, "concat")


def narrow(a: Tensor, lo: int, hi: int) -> Tensor:
    """Slice [lo, hi) of the last axis."""
    if not (0 <= lo < hi <= a.shape[-1]):
        raise ShapeMismatchError(f"narrow [{lo}:{hi}] out of range for shape {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        return (full,)

    return make_node(a.data[..., lo:hi], (a,), back, "narrow")


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table by integer index (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatchError(f"take_rows: table must be 2-d, got {table.shape}")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(table.data[idx], (table,), back, "take_rows")


def reparam_sample(mean: Tensor, std: Tensor, noise: np.ndarray) -> Tensor:
    """Gaussian reparameterization: mean + std * noise for fixed noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mean.shape or mean.shape != std.shape:
        raise ShapeMismatchError(
            f"reparam_sample: shapes {mean.shape}/{std.shape}/{noise.shape} differ")

    def back(g):
        return g, g * noise

    return make_node(mean.data + std.data * noise, (mean, std), back, "reparam_sample")


def clamp_max(a: Tensor, cap: float) -> Tensor:
    """min(a, cap), composed as cap - relu(cap - a)."""
    return sub(constant(cap), relu(sub(constant(cap), a)))


_EPOCH = [0]


def _topo_order(root: Tensor) -> list[Tensor]:
    _EPOCH[0] += 1
    epoch = _EPOCH[0]
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._visit == epoch:
            continue
        node._visit = epoch
        stack.append((node, True))
        for p in node._parents:
            if p._visit != epoch:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate gradients of a scalar output into every reachable leaf.

    The graph is released afterwards; differentiating the same graph twice
    raises GraphError.
    """
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    if not output._parents:
        raise GraphError("output is detached: no recorded operations lead to it")
    order = _topo_order(output)
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        if node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                # copy: g may be a view or broadcast of another buffer
                parent.grad = np.array(g)
            else:
                parent.grad += g
    # consume the graph: free intermediates, block double backward
    for node in order:
        node._parents = ()
        node._backward = None
        if not node.requires_grad:
            if node is not output:
                node.grad = None


def evaluate(graph_fn, *inputs: Tensor) -> Tensor:
    """Run a tensor expression and return its output node."""
    out = graph_fn(*inputs)
    if not isinstance(out, Tensor):
        raise TensorError("graph_fn must return a Tensor")
    return out


def grad_check(fn, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be scalar-valued. The error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise GraphError("grad_check requires a scalar-valued fn")
    backward(out)
    analytic = x.grad_or_zeros().copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        f_plus = fn(Tensor(x.data)).item()
        flat[k] = orig - step
        f_minus = fn(Tensor(x.data)).item()
        flat[k] = orig
        numeric[k] = (f_plus - f_minus) / (2.0 * step)
    numeric = numeric.reshape(x.data.shape)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
