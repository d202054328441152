"""Multi-head self-attention parameterised by positional-embedding scheme."""

from __future__ import annotations

import math
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError
from .posemb import (
    DEFAULT_BASE,
    RelPosParams,
    RoPECache,
    rel_shift,
    relpos_table,
    rope_apply,
    sinusoidal_absolute,
)
from .tensor import Tensor

MASK_VALUE = -1e30
SCHEMES = ("none", "absolute", "rotary", "relative")


class StageTimer:
    """Accumulates wall time per named stage of a forward pass."""

    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0

    def __getitem__(self, name: str) -> float:
        return self.totals.get(name, 0.0)


@contextmanager
def _stage(profile: StageTimer | None, name: str):
    if profile is None:
        yield
    else:
        with profile.stage(name):
            yield


# -- masks ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """``allowed[t, u]`` is True when query ``t`` may attend to key ``u``."""

    allowed: np.ndarray

    def __post_init__(self):
        a = np.array(self.allowed, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"mask must be square, got {a.shape}")
        if not a.any(axis=1).all():
            raise ConfigError("every mask row needs at least one allowed key")
        a.flags.writeable = False
        object.__setattr__(self, "allowed", a)

    @property
    def T(self) -> int:
        return self.allowed.shape[0]

    @property
    def is_full(self) -> bool:
        return bool(self.allowed.all())

    def additive(self) -> np.ndarray | None:
        """Term added to logits before softmax; None when nothing is masked."""
        if self.is_full:
            return None
        return np.where(self.allowed, 0.0, MASK_VALUE)

    def __eq__(self, other):
        return isinstance(other, AttentionMask) and np.array_equal(self.allowed, other.allowed)

    __hash__ = None


def build_full_mask(T: int) -> AttentionMask:
    if T < 1:
        raise ConfigError(f"mask length must be >= 1, got {T}")
    return AttentionMask(np.ones((T, T), dtype=bool))


def build_chunk_mask(T: int, chunk_frames: int) -> AttentionMask:
    """Each frame sees its own chunk and every earlier chunk, never a later one."""
    if chunk_frames < 1:
        raise ConfigError(f"chunk_frames must be >= 1, got {chunk_frames}")
    if T < 1:
        raise ConfigError(f"mask length must be >= 1, got {T}")
    chunk = np.arange(T) // chunk_frames
    return AttentionMask(chunk[None, :] <= chunk[:, None])


# -- schemes and parameters ----------------------------------------------


@dataclass(frozen=True)
class PEScheme:
    """Which positional embedding an attention layer uses.

    ``rope`` is set exactly when ``kind == "rotary"``.  The relative scheme
    keeps its learnable terms in ``AttentionParams.relpos``.
    """

    kind: str = "none"
    rope: RoPECache | None = field(default=None, compare=False)
    base: float = DEFAULT_BASE

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigError(f"unknown positional scheme {self.kind!r}; choose from {SCHEMES}")
        if (self.kind == "rotary") != (self.rope is not None):
            raise ConfigError("a RoPE cache is required for, and only for, the rotary scheme")

    @classmethod
    def none(cls) -> PEScheme:
        return cls("none")

    @classmethod
    def absolute(cls, base: float = DEFAULT_BASE) -> PEScheme:
        return cls("absolute", base=base)

    @classmethod
    def rotary(cls, cache: RoPECache) -> PEScheme:
        return cls("rotary", rope=cache, base=cache.base)

    @classmethod
    def relative(cls, base: float = DEFAULT_BASE) -> PEScheme:
        return cls("relative", base=base)


@dataclass(eq=False)
class AttentionParams:
    n_heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    relpos: RelPosParams | None = None

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be [{d} x {d}], got {getattr(self, name).shape}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ConfigError(f"d_model={d} is not divisible by n_heads={self.n_heads}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def parameters(self) -> list[Tensor]:
        ps = [self.w_q, self.w_k, self.w_v, self.w_o]
        if self.relpos is not None:
            ps += self.relpos.parameters()
        return ps


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, zero: bool = False) -> Tensor:
    """Seeded U(-1/sqrt(fan_in), 1/sqrt(fan_in)) leaf tensor."""
    if zero:
        return Tensor(np.zeros(shape), requires_grad=True)
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_attention(
    d_model: int,
    n_heads: int,
    rng: np.random.Generator,
    *,
    relative: bool = False,
    max_len: int = 1,
    base: float = DEFAULT_BASE,
    zero: bool = False,
    pos_emb: np.ndarray | None = None,
) -> AttentionParams:
    """Random attention weights; adds RelPosParams when ``relative`` is set.

    The relative terms are drawn after the four projections, so the shared
    weights match across schemes for the same generator state.
    """
    if n_heads < 1 or d_model % n_heads:
        raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
    ws = [uniform_init(rng, (d_model, d_model), d_model, zero) for _ in range(4)]
    relpos = None
    if relative:
        dh = d_model // n_heads
        if pos_emb is None:
            pos_emb = relpos_table(max_len, d_model, base)
        relpos = RelPosParams(
            pos_emb=pos_emb,
            u_bias=uniform_init(rng, (n_heads, dh), dh, zero),
            v_bias=uniform_init(rng, (n_heads, dh), dh, zero),
            pos_proj=uniform_init(rng, (d_model, d_model), d_model, zero),
        )
    return AttentionParams(n_heads, *ws, relpos=relpos)


# -- attention ------------------------------------------------------------


def _attend(logits: Tensor, v: Tensor, additive: np.ndarray | None) -> tuple[Tensor, Tensor]:
    weights = tc.softmax_rows(logits, additive)
    return tc.matmul(weights, v), weights


def sdpa(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention for one head.

    Returns ``(output, weights)`` with weights = softmax(q kᵀ / sqrt(d_h) + mask).
    """
    if q.ndim != 2 or q.shape != k.shape or v.shape[0] != k.shape[0]:
        raise ShapeError(f"sdpa: q {q.shape}, k {k.shape}, v {v.shape}")
    T = q.shape[0]
    if mask is not None and mask.T != T:
        raise ShapeError(f"sdpa: mask is {mask.T}x{mask.T} for {T} frames")
    logits = tc.matmul(tc.scale(q, 1.0 / math.sqrt(q.shape[1])), tc.transpose(k))
    return _attend(logits, v, None if mask is None else mask.additive())


def _check_scheme(params: AttentionParams, scheme: PEScheme) -> None:
    if scheme.kind == "relative" and params.relpos is None:
        raise ConfigError("relative scheme requires RelPosParams on the attention parameters")
    if scheme.kind == "rotary" and scheme.rope.head_dim != params.head_dim:
        raise ConfigError(
            f"rotary cache head_dim={scheme.rope.head_dim} does not match head_dim={params.head_dim}"
        )


def _project(x: Tensor, params: AttentionParams, scheme: PEScheme, start_pos: int, profile):
    """Return per-scheme (q, k, v) after positional transforms."""
    T = x.shape[0]
    if scheme.kind == "absolute":
        with _stage(profile, "pe"):
            x = tc.add(x, Tensor(sinusoidal_absolute(T, params.d_model, scheme.base, start=start_pos)))
    q = tc.matmul(x, params.w_q)
    k = tc.matmul(x, params.w_k)
    v = tc.matmul(x, params.w_v)
    if scheme.kind == "rotary":
        with _stage(profile, "pe"):
            q = rope_apply(q, start_pos, scheme.rope)
            k = rope_apply(k, start_pos, scheme.rope)
    return q, k, v


def _head_logits(q, k, params, scheme, profile, pos=None) -> list[Tensor]:
    """Pre-softmax logits for every head.

    The 1/sqrt(d_h) factor multiplies the (rotated, biased) queries, which
    equals scaling the [T x T] scores but costs O(T d) instead of O(T^2).
    """
    dh = params.head_dim
    inv = 1.0 / math.sqrt(dh)
    out = []
    for h in range(params.n_heads):
        qh = tc.slice_cols(q, h * dh, (h + 1) * dh)
        kt = tc.transpose(tc.slice_cols(k, h * dh, (h + 1) * dh))
        if scheme.kind == "relative":
            rp = params.relpos
            with _stage(profile, "pe"):
                q_u = tc.scale(tc.add_bias(qh, tc.row(rp.u_bias, h)), inv)
            ac = tc.matmul(q_u, kt)
            with _stage(profile, "pe"):
                q_v = tc.scale(tc.add_bias(qh, tc.row(rp.v_bias, h)), inv)
                ph = tc.slice_cols(pos, h * dh, (h + 1) * dh)
                bd = rel_shift(tc.matmul(q_v, tc.transpose(ph)))
                out.append(tc.add(ac, bd))
        else:
            out.append(tc.matmul(tc.scale(qh, inv), kt))
    return out


def _position_features(params: AttentionParams, T: int, profile) -> Tensor:
    with _stage(profile, "pe"):
        return tc.matmul(Tensor(params.relpos.table(T)), params.relpos.pos_proj)


def attention_logits(
    x: Tensor, params: AttentionParams, scheme: PEScheme, start_pos: int = 0
) -> list[Tensor]:
    """Per-head pre-softmax logits (scaled, unmasked), one [T x T] tensor per head."""
    _check_scheme(params, scheme)
    q, k, _ = _project(x, params, scheme, start_pos, None)
    pos = _position_features(params, x.shape[0], None) if scheme.kind == "relative" else None
    return _head_logits(q, k, params, scheme, None, pos)


def mhsa(
    x: Tensor,
    params: AttentionParams,
    scheme: PEScheme,
    mask: AttentionMask | None = None,
    start_pos: int = 0,
    profile: StageTimer | None = None,
) -> Tensor:
    """Multi-head self-attention over one sequence ``x`` [T x d_model].

    The rotary scheme rotates queries and keys only; values and the output
    projection never see a rotation.  ``start_pos`` is the absolute position
    of the first row and only matters for the absolute and rotary schemes.
    """
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise ShapeError(f"mhsa: input {x.shape} for d_model={params.d_model}")
    _check_scheme(params, scheme)
    T = x.shape[0]
    if mask is not None and mask.T != T:
        raise ShapeError(f"mhsa: mask is {mask.T}x{mask.T} for {T} frames")
    additive = None if mask is None else mask.additive()

    q, k, v = _project(x, params, scheme, start_pos, profile)
    pos = _position_features(params, T, profile) if scheme.kind == "relative" else None
    logits = _head_logits(q, k, params, scheme, profile, pos)
    dh = params.head_dim
    heads = []
    for h, lg in enumerate(logits):
        vh = tc.slice_cols(v, h * dh, (h + 1) * dh)
        heads.append(_attend(lg, vh, additive)[0])
    return tc.matmul(tc.concat_cols(heads), params.w_o)


def streaming_mhsa(x: Tensor, params: AttentionParams, scheme: PEScheme, chunk_frames: int) -> Tensor:
    """Evaluate attention chunk by chunk, keeping the keys/values of earlier chunks.

    Queries of a chunk see all previous chunks plus their own chunk.  The
    result matches ``mhsa`` under ``build_chunk_mask(T, chunk_frames)``.
    """
    if chunk_frames < 1:
        raise ConfigError(f"chunk_frames must be >= 1, got {chunk_frames}")
    if scheme.kind == "relative":
        raise ConfigError("streaming evaluation supports the none, absolute and rotary schemes")
    _check_scheme(params, scheme)
    T = x.shape[0]
    dh = params.head_dim
    inv = 1.0 / math.sqrt(dh)
    keys: list[Tensor] = []
    values: list[Tensor] = []
    outputs = []
    for s in range(0, T, chunk_frames):
        e = min(s + chunk_frames, T)
        q, k, v = _project(tc.slice_rows(x, s, e), params, scheme, s, None)
        keys.append(k)
        values.append(v)
        k_all, v_all = tc.concat_rows(keys), tc.concat_rows(values)
        heads = []
        for h in range(params.n_heads):
            qh = tc.slice_cols(q, h * dh, (h + 1) * dh)
            kh = tc.slice_cols(k_all, h * dh, (h + 1) * dh)
            lg = tc.matmul(tc.scale(qh, inv), tc.transpose(kh))
            heads.append(_attend(lg, tc.slice_cols(v_all, h * dh, (h + 1) * dh), None)[0])
        outputs.append(tc.matmul(tc.concat_cols(heads), params.w_o))
    return tc.concat_rows(outputs)
