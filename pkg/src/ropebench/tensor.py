"""Dense float64 tensors with hand-written reverse-mode gradients.

Every primitive computes its forward value with numpy and, when gradient
recording is enabled, attaches a closure mapping the output gradient to one
gradient per parent.  ``Tensor.backward`` walks the recorded graph in
reverse topological order.

Values are immutable: the backing array is marked read-only on creation.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """A row-major float64 array plus the bookkeeping for backprop.

    ``grad`` is filled in on leaf tensors created with ``requires_grad=True``
    after calling ``backward`` on a scalar downstream of them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self.data = _freeze(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def from_op(
        cls,
        out: np.ndarray,
        parents: Sequence[Tensor],
        backward: BackwardFn,
    ) -> Tensor:
        """Wrap a freshly computed array as the output of a primitive.

        ``out`` is taken over without copying; callers must not keep a
        writable reference to it.
        """
        t = cls.__new__(cls)
        if not isinstance(out, np.ndarray) or out.dtype != np.float64:
            out = np.asarray(out, dtype=np.float64)
        if not out.flags.c_contiguous:
            out = np.ascontiguousarray(out)
        t.data = _freeze(out)
        t.grad = None
        t.name = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        t.requires_grad = track
        t._parents = tuple(parents) if track else ()
        t._backward = backward if track else None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` [m x k] and ``b`` [k x n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return Tensor.from_op(A @ B, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return Tensor.from_op(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return Tensor.from_op(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector ``bias`` [n] to every row of ``x`` [m x n]."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return Tensor.from_op(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    X = x.data
    s = _sigmoid(X)

    def backward(g):
        return (g * (s + X * s * (1.0 - s)),)

    return Tensor.from_op(X * s, (x,), backward)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    n = x.shape[-1]
    if n % 2:
        raise ShapeError(f"glu: last dimension must be even, got {n}")
    h = n // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return Tensor.from_op(a * s, (x,), backward)


# -- reductions and normalisation -----------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor.from_op(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) with ``weights`` held constant."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {x.shape}")
    return Tensor.from_op(np.array((x.data * w).sum()), (x,), lambda g: (float(g) * w,))


def softmax_rows(x: Tensor, additive: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max.

    ``additive`` is a constant added before normalisation; masks pass large
    negative values there so denied entries come out as exact zeros.
    """
    z = x.data if additive is None else x.data + additive
    y = z - z.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y *= 1.0 / y.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxh = g * G
            gx = inv * (
                dxh
                - dxh.mean(axis=-1, keepdims=True)
                - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor.from_op(xhat * G + bias.data, (x, gain, bias), backward)


# -- structural -------------------------------------------------------------


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for shape {x.shape}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return Tensor.from_op(x.data[:, start:stop].copy(), (x,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: bad range [{start}, {stop}) for shape {x.shape}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return Tensor.from_op(x.data[start:stop].copy(), (x,), backward)


def row(x: Tensor, i: int) -> Tensor:
    """Row ``i`` of a matrix as a vector."""
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return Tensor.from_op(x.data[i].copy(), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in xs]} along axis {axis}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tuple(xs), backward)


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=0)


def depthwise_conv1d(x: Tensor, weight: Tensor, pad_left: int, pad_right: int) -> Tensor:
    """Per-channel 1-D convolution along time.

    ``x`` is [T x C] and ``weight`` is [K x C]; the input is zero padded by
    ``pad_left``/``pad_right`` frames and ``pad_left + pad_right`` must equal
    ``K - 1`` so the output keeps T frames.
    """
    T, C = x.shape
    K = weight.shape[0]
    if weight.shape != (K, C):
        raise ShapeError(f"depthwise_conv1d: weight {weight.shape} vs input channels {C}")
    if pad_left < 0 or pad_right < 0 or pad_left + pad_right != K - 1:
        raise ShapeError(f"depthwise_conv1d: padding ({pad_left}, {pad_right}) for kernel {K}")
    xp = np.zeros((T + K - 1, C))
    xp[pad_left : pad_left + T] = x.data
    W = weight.data
    out = np.zeros((T, C))
    for k in range(K):
        out += xp[k : k + T] * W[k]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty((K, C))
        for k in range(K):
            gxp[k : k + T] += g * W[k]
            gw[k] = (xp[k : k + T] * g).sum(axis=0)
        return gxp[pad_left : pad_left + T], gw

    return Tensor.from_op(out, (x, weight), backward)
