"""Positional embeddings: rotary, absolute sinusoidal and Transformer-XL relative.

Rotary embeddings pair consecutive dimensions (0,1), (2,3), ... and rotate
pair ``i`` at position ``t`` by ``t * theta_i`` with
``theta_i = base ** (-2 i / d)`` (0-indexed ``i``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor

DEFAULT_BASE = 10000.0


def _check_even(name: str, d: int) -> None:
    if d < 2 or d % 2:
        raise ConfigError(f"{name} must be a positive even integer, got {d}")


def rope_angles(head_dim: int, base: float = DEFAULT_BASE) -> np.ndarray:
    """Per-pair rotation frequencies, length ``head_dim // 2``, strictly decreasing from 1."""
    _check_even("head_dim", head_dim)
    if not base > 0:
        raise ConfigError(f"theta base must be positive, got {base}")
    i = np.arange(head_dim // 2, dtype=np.float64)
    return base ** (-2.0 * i / head_dim)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RoPECache:
    """Cosine/sine tables for positions ``0 .. max_len-1``.

    Both tables are [max_len x head_dim]; columns ``2i`` and ``2i+1`` hold the
    same angle ``t * theta_i``.
    """

    max_len: int
    head_dim: int
    base: float
    cos_table: np.ndarray
    sin_table: np.ndarray

    @property
    def angles(self) -> np.ndarray:
        return rope_angles(self.head_dim, self.base)


def build_rope_cache(max_len: int, head_dim: int, base: float = DEFAULT_BASE) -> RoPECache:
    theta = rope_angles(head_dim, base)
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    phase = np.outer(np.arange(max_len, dtype=np.float64), np.repeat(theta, 2))
    return RoPECache(
        max_len=max_len,
        head_dim=head_dim,
        base=float(base),
        cos_table=_freeze(np.cos(phase)),
        sin_table=_freeze(np.sin(phase)),
    )


def _swap_pairs(y: np.ndarray) -> np.ndarray:
    """(y1, y2, y3, y4, ...) -> (-y2, y1, -y4, y3, ...)."""
    out = np.empty_like(y)
    out[..., 0::2] = -y[..., 1::2]
    out[..., 1::2] = y[..., 0::2]
    return out


def _rotate(y: np.ndarray, cos: np.ndarray, sin: np.ndarray, heads: int) -> np.ndarray:
    T, d = y.shape
    if heads == 1:
        return y * cos + _swap_pairs(y) * sin
    y3 = y.reshape(T, heads, d // heads)
    out = y3 * cos[:, None, :] + _swap_pairs(y3) * sin[:, None, :]
    return out.reshape(T, d)


def rope_apply(x: Tensor, start_pos: int, cache: RoPECache) -> Tensor:
    """Rotate row ``t`` of ``x`` by ``R_{start_pos + t}`` using the elementwise form.

    ``x`` is [T x d] with ``d`` equal to ``cache.head_dim``, or a multiple of it
    when several heads are packed side by side; each head block is rotated
    independently.
    """
    if x.ndim != 2:
        raise ShapeError(f"rope_apply: expected [T x d], got {x.shape}")
    T, d = x.shape
    hd = cache.head_dim
    if d % hd:
        raise ShapeError(f"rope_apply: width {d} is not a multiple of head_dim {hd}")
    if start_pos < 0 or start_pos + T > cache.max_len:
        raise IndexError(
            f"rope_apply: positions {start_pos}..{start_pos + T - 1} exceed cache max_len={cache.max_len}"
        )
    cos = cache.cos_table[start_pos : start_pos + T]
    sin = cache.sin_table[start_pos : start_pos + T]
    heads = d // hd

    def backward(g):
        return (_rotate(g, cos, -sin, heads),)

    return Tensor.from_op(_rotate(x.data, cos, sin, heads), (x,), backward)


@dataclass(frozen=True, eq=False)
class RotationMatrix:
    t: int
    matrix: np.ndarray


def rope_dense_matrix(t: int, head_dim: int, base: float = DEFAULT_BASE) -> RotationMatrix:
    """Explicit block-diagonal rotation for position ``t``.

    Built independently of the cache so it can serve as an oracle for
    ``rope_apply``.
    """
    if t < 0:
        raise ConfigError(f"position must be nonnegative, got {t}")
    theta = rope_angles(head_dim, base)
    m = np.zeros((head_dim, head_dim))
    for i, th in enumerate(theta):
        c, s = np.cos(t * th), np.sin(t * th)
        m[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = [[c, -s], [s, c]]
    return RotationMatrix(t=t, matrix=_freeze(m))


def _sinusoid(positions: np.ndarray, d_model: int, base: float) -> np.ndarray:
    _check_even("d_model", d_model)
    freq = base ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    phase = np.outer(positions.astype(np.float64), freq)
    table = np.empty((len(positions), d_model))
    table[:, 0::2] = np.sin(phase)
    table[:, 1::2] = np.cos(phase)
    return table


def sinusoidal_absolute(T: int, d_model: int, base: float = DEFAULT_BASE, start: int = 0) -> np.ndarray:
    """Interleaved sin/cos table for positions ``start .. start+T-1``, shape [T x d_model]."""
    return _freeze(_sinusoid(np.arange(start, start + T), d_model, base))


def relpos_table(T: int, d_model: int, base: float = DEFAULT_BASE) -> np.ndarray:
    """Sinusoids for relative offsets ``T-1, T-2, ..., -(T-1)``, shape [(2T-1) x d_model]."""
    return _freeze(_sinusoid(np.arange(T - 1, -T, -1), d_model, base))


@dataclass(frozen=True, eq=False)
class RelPosParams:
    """Learnable terms of Transformer-XL relative attention plus the fixed offset table.

    ``pos_emb`` covers offsets ``max_len-1 .. -(max_len-1)`` and is not trained.
    """

    pos_emb: np.ndarray
    u_bias: Tensor
    v_bias: Tensor
    pos_proj: Tensor

    @property
    def max_len(self) -> int:
        return (self.pos_emb.shape[0] + 1) // 2

    def table(self, T: int) -> np.ndarray:
        """Rows of ``pos_emb`` for offsets ``T-1 .. -(T-1)``."""
        if T > self.max_len:
            raise IndexError(f"relative table: length {T} exceeds max_len={self.max_len}")
        mid = self.max_len - 1
        return self.pos_emb[mid - (T - 1) : mid + T]

    def parameters(self) -> list[Tensor]:
        return [self.u_bias, self.v_bias, self.pos_proj]


def _shifted_view(a: np.ndarray) -> np.ndarray:
    """[T x T] view of a C-contiguous [T x (2T-1)] array with entry (i, j) = a[i, T-1-i+j].

    Row i starts at flat offset (T-1) + i*(2T-2), so the view is a plain
    strided window and no entry is read twice.
    """
    T = a.shape[0]
    flat = a.reshape(-1)[T - 1 :]
    step = flat.strides[0]
    return np.lib.stride_tricks.as_strided(flat, shape=(T, T), strides=((2 * T - 2) * step, step), writeable=False)


def rel_shift(x: Tensor) -> Tensor:
    """Map content-position scores [T x (2T-1)] to per-pair scores [T x T].

    Column ``c`` of the input scores offset ``T-1-c``; the output entry
    ``(i, j)`` is the input at offset ``i - j``.  This is the same gather as
    the pad-one-column-and-reshape trick, done as a strided view.
    """
    T, W = x.shape
    if W != 2 * T - 1:
        raise ShapeError(f"rel_shift: expected [T x 2T-1], got {x.shape}")
    out = _shifted_view(x.data).copy()

    def backward(g):
        gp = np.zeros((T, W))
        view = gp.reshape(-1)[T - 1 :]
        step = view.strides[0]
        np.lib.stride_tricks.as_strided(view, shape=(T, T), strides=((2 * T - 2) * step, step))[...] = g
        return (gp,)

    return Tensor.from_op(out, (x,), backward)
