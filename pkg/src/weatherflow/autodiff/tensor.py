"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every value is a (batch, channel, height, width) array. Ops run eagerly on
numpy and, while gradients are enabled, attach a backward closure to their
output (define-by-run). `Graph.trace(loss)` materializes the ordered record
of ops reachable from a scalar loss; its backward pass walks that record
exactly once in reverse, accumulating into `.grad` buffers.

Double precision is the default dtype; training code may construct float32
tensors for speed.
"""

import threading
import weakref
from contextlib import contextmanager

import numpy as np

from ..errors import ShapeError, UsageError

EPS = 1e-8  # denominator / log clamp used across the package


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.seq = 0
        self.tracking = None  # set of touched parameter names, or None


_state = _State()


@contextmanager
def no_grad():
    """Disable op recording inside the block (forward values only)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def track_param_reads(into: set):
    """Record the name of every named tensor consumed by an op."""
    prev = _state.tracking
    _state.tracking = into
    try:
        yield into
    finally:
        _state.tracking = prev


class Node:
    """One executed op: inputs, backward rule, and its place in execution order."""

    __slots__ = ("seq", "inputs", "fn", "out_ref")

    def __init__(self, seq, inputs, fn, out):
        self.seq = seq
        self.inputs = inputs
        self.fn = fn
        self.out_ref = weakref.ref(out)


class Tensor:
    """4-D array with an optional, lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "node", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (b, c, h, w), got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            # copy: g may alias another tensor's grad buffer (unbroadcast
            # returns its argument when shapes already match)
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        Graph.trace(self).backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars become constant tensors.
    def __add__(self, other):
        return add(self, as_tensor(other, self))

    def __radd__(self, other):
        return add(as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self))

    def __rsub__(self, other):
        return sub(as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other, self))

    def __rmul__(self, other):
        return mul(as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(as_tensor(other, self), self)

    def __neg__(self):
        return mul(self, as_tensor(-1.0, self))

    def __pow__(self, p):
        return pow_scalar(self, p)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    return Tensor(arr)


def scalar(x, dtype=np.float64) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), x, dtype=dtype))


class Graph:
    """Ordered record of the ops reachable from a loss, in execution order."""

    def __init__(self, nodes):
        self.nodes = nodes  # sorted by execution sequence

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or id(n) in seen:
                continue
            seen.add(id(n))
            nodes.append(n)
            stack.extend(n.inputs)
        nodes.sort(key=lambda n: n.seq)
        return Graph(nodes)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """Seed the scalar loss with 1 and accumulate grads in reverse order."""
        if loss.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for n in reversed(self.nodes):
            out = n.out_ref()
            if out is None or out.grad is None:
                continue
            n.fn(out.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _touch(inputs):
    if _state.tracking is not None:
        for t in inputs:
            if t.name is not None:
                _state.tracking.add(t.name)


def _make(out_data, inputs, backward_fn) -> Tensor:
    """Wrap a forward result; record the op if any input needs gradients."""
    _touch(inputs)
    out = Tensor(out_data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.seq += 1
        out.node = Node(_state.seq, tuple(inputs), backward_fn, out)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i in range(4) if shape[i] == 1 and grad.shape[i] != 1)
    return grad.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    """a / b with |denominator| clamped to at least EPS (sign-preserving)."""
    _check_broadcast(a, b)
    clamped = np.abs(b.data) < EPS
    bc = np.where(clamped, np.copysign(EPS, b.data), b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / bc, a.shape))
        if b.requires_grad:
            # the clamp is flat in b, so no gradient where it engaged
            db = np.where(clamped, 0.0, -g * a.data / (bc * bc))
            b.accumulate_grad(_unbroadcast(db, b.shape))

    return _make(a.data / bc, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        a.accumulate_grad(g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    pos = a.data > 0

    def backward(g):
        a.accumulate_grad(g * np.where(pos, 1.0, slope))

    return _make(np.where(pos, a.data, slope * a.data), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "abs": absolute,
    "pow-scalar": pow_scalar,
    "leaky-relu": leaky_relu,
    "sigmoid": sigmoid,
    "log": log,
}


def elementwise(kind: str, a: Tensor, b=None, **kw) -> Tensor:
    """Dispatch by op-kind; binary kinds require `b`, unary ones forbid it."""
    if kind not in _ELEMENTWISE:
        raise UsageError(f"unknown elementwise kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise UsageError(f"{kind} needs two operands")
        return fn(a, as_tensor(b, a))
    if kind == "pow-scalar":
        return fn(a, kw.get("p", b))
    if b is not None:
        raise UsageError(f"{kind} is unary")
    return fn(a, **kw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axes):
    if axes is None:
        return (0, 1, 2, 3)
    if isinstance(axes, int):
        return (axes,)
    return tuple(axes)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes)

    def backward(g):
        a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(axis=axes, keepdims=True), (a,), backward)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes)
    count = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        a.accumulate_grad(np.broadcast_to(g / count, a.shape).copy())

    return _make(a.data.mean(axis=axes, keepdims=True), (a,), backward)


def reduce_max(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes)
    out_data = a.data.max(axis=axes, keepdims=True)

    def backward(g):
        hit = a.data == out_data
        share = hit / hit.sum(axis=axes, keepdims=True)
        a.accumulate_grad(np.broadcast_to(g, a.shape) * share)

    return _make(out_data, (a,), backward)


_REDUCES = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(kind: str, a: Tensor, axes=None) -> Tensor:
    if kind not in _REDUCES:
        raise UsageError(f"unknown reduce kind {kind!r}")
    return _REDUCES[kind](a, axes)


def l2_normalize(v: Tensor, axis: int = 1) -> Tensor:
    """v / max(||v||_2, EPS) along `axis`; composed from primitive ops.

    The clamp (inside div) keeps zero vectors finite while leaving the
    self-dot of any non-degenerate vector exactly 1.
    """
    norm = pow_scalar(reduce_sum(mul(v, v), axes=(axis,)), 0.5)
    return div(v, norm)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if len(shape) != 4:
        raise ShapeError(f"reshape target must be 4-D, got {shape}")

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def permute(a: Tensor, order) -> Tensor:
    order = tuple(order)
    inverse = tuple(np.argsort(order))

    def backward(g):
        a.accumulate_grad(g.transpose(inverse))

    return _make(a.data.transpose(order).copy(), (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * 4
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * 4
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        a.accumulate_grad(buf)

    return _make(a.data[sl].copy(), (a,), backward)
