"""Central finite-difference oracle for the hand-written backward passes."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import (
    PEScheme,
    build_chunk_mask,
    build_full_mask,
    init_attention,
    mhsa,
    sdpa,
)
from .conformer import ConformerConfig, conformer_block, encoder_forward, init_block, init_encoder, make_scheme
from .errors import OracleError
from .posemb import build_rope_cache, rel_shift, rope_apply
from .tensor import Tensor

STEP = 1e-5


@dataclass(frozen=True)
class GradReport:
    op: str
    max_rel_error: float
    max_abs_error: float
    threshold: float
    passed: bool

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.op:<28} rel={self.max_rel_error:.2e} abs={self.max_abs_error:.2e} [{status}]"


def finite_diff(f: Callable[[np.ndarray], float], x, step: float = STEP) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.empty_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x0.copy()))
        flat[i] = orig - step
        fm = float(f(x0.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(1, |a|, |n|) elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def compare(op: str, analytic: np.ndarray, numeric: np.ndarray, threshold: float) -> GradReport:
    rel = float(relative_error(analytic, numeric).max(initial=0.0))
    ab = float(np.abs(np.asarray(analytic) - numeric).max(initial=0.0))
    return GradReport(op, rel, ab, threshold, rel < threshold)


def check_function(
    op: str,
    loss: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    threshold: float = 1e-5,
    step: float = STEP,
) -> GradReport:
    """Compare analytic and numeric gradients of ``loss(*tensors)`` w.r.t. every input."""
    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    loss(*leaves).backward()
    analytic, numeric = [], []
    for i, leaf in enumerate(leaves):

        def f(xi, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = Tensor(xi)
            with tc.no_grad():
                return loss(*args).item()

        numeric.append(finite_diff(f, inputs[i], step).reshape(-1))
        g = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        analytic.append(g.reshape(-1))
    return compare(op, np.concatenate(analytic), np.concatenate(numeric), threshold)


def check_parameters(
    op: str,
    loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    threshold: float = 1e-5,
    step: float = STEP,
) -> GradReport:
    """Like ``check_function`` but for leaf tensors captured inside ``loss``.

    The leaves' data is swapped in place during the numeric pass and restored
    afterwards.
    """
    tc.zero_grad(params)
    loss().backward()
    analytic, numeric = [], []
    for p in params:
        analytic.append((p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1))
        saved = p.data

        def f(xi, p=p):
            p.data = xi
            with tc.no_grad():
                return loss().item()

        try:
            numeric.append(finite_diff(f, saved, step).reshape(-1))
        finally:
            p.data = saved
    tc.zero_grad(params)
    return compare(op, np.concatenate(analytic), np.concatenate(numeric), threshold)


# -- registry ---------------------------------------------------------------


def _readout(rng: np.random.Generator, shape) -> np.ndarray:
    # Random weights so that e.g. sum(softmax) = const does not hide errors.
    return rng.uniform(-1.0, 1.0, size=shape)


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _matmul(sizes, rng):
    m, k, n = (tuple(sizes) + (3, 3, 3))[:3]
    r = _readout(rng, (m, n))
    return (lambda a, b: tc.weighted_sum(tc.matmul(a, b), r)), [_u(rng, m, k), _u(rng, k, n)]


def _unary(fn):
    def build(sizes, rng):
        m, n = (tuple(sizes) + (4, 4))[:2]
        x = _u(rng, m, n)
        with tc.no_grad():
            r = _readout(rng, fn(Tensor(x)).shape)
        return (lambda x: tc.weighted_sum(fn(x), r)), [x]

    return build


def _binary(fn):
    def build(sizes, rng):
        m, n = (tuple(sizes) + (4, 4))[:2]
        r = _readout(rng, (m, n))
        return (lambda a, b: tc.weighted_sum(fn(a, b), r)), [_u(rng, m, n), _u(rng, m, n)]

    return build


def _masked_softmax(sizes, rng):
    n = sizes[0] if sizes else 4
    add = build_chunk_mask(n, 2).additive()
    r = _readout(rng, (n, n))
    return (lambda x: tc.weighted_sum(tc.softmax_rows(x, add), r)), [_u(rng, n, n)]


def _layernorm(sizes, rng):
    m, n = (tuple(sizes) + (4, 4))[:2]
    r = _readout(rng, (m, n))
    return (lambda x, g, b: tc.weighted_sum(tc.layernorm(x, g, b), r)), [_u(rng, m, n), _u(rng, n), _u(rng, n)]


def _add_bias(sizes, rng):
    m, n = (tuple(sizes) + (4, 4))[:2]
    r = _readout(rng, (m, n))
    return (lambda x, b: tc.weighted_sum(tc.add_bias(x, b), r)), [_u(rng, m, n), _u(rng, n)]


def _conv(causal):
    def build(sizes, rng):
        T, C, K = (tuple(sizes) + (6, 3, 3))[:3]
        pads = (K - 1, 0) if causal else ((K - 1) // 2, (K - 1) // 2)
        r = _readout(rng, (T, C))
        return (lambda x, w: tc.weighted_sum(tc.depthwise_conv1d(x, w, *pads), r)), [_u(rng, T, C), _u(rng, K, C)]

    return build


def _structural(sizes, rng):
    m, n = (tuple(sizes) + (4, 4))[:2]
    r = _readout(rng, (m, 2 * n))

    def loss(a, b):
        joined = tc.concat_cols([a, tc.transpose(tc.transpose(b))])
        return tc.weighted_sum(joined, r) + tc.weighted_sum(tc.slice_cols(joined, 1, n + 1), r[:, :n])

    return loss, [_u(rng, m, n), _u(rng, m, n)]


def _rope(sizes, rng):
    T, d = (tuple(sizes) + (6, 8))[:2]
    cache = build_rope_cache(T + 3, d)
    r = _readout(rng, (T, d))
    return (lambda x: tc.weighted_sum(rope_apply(x, 2, cache), r)), [_u(rng, T, d)]


def _rel_shift(sizes, rng):
    T = sizes[0] if sizes else 5
    r = _readout(rng, (T, T))
    return (lambda x: tc.weighted_sum(rel_shift(x), r)), [_u(rng, T, 2 * T - 1)]


def _sdpa(sizes, rng):
    T, d = (tuple(sizes) + (5, 4))[:2]
    mask = build_chunk_mask(T, 2)
    r = _readout(rng, (T, d))
    return (lambda q, k, v: tc.weighted_sum(sdpa(q, k, v, mask)[0], r)), [_u(rng, T, d) for _ in range(3)]


def _mhsa(kind):
    def build(sizes, rng):
        T, d = (tuple(sizes) + (5, 8))[:2]
        heads = 2
        params = init_attention(d, heads, rng, relative=kind == "relative", max_len=T)
        scheme = make_scheme(ConformerConfig(1, d, heads, scheme=kind), T + 2)
        mask = build_chunk_mask(T, 2)
        r = _readout(rng, (T, d))
        return (lambda x: tc.weighted_sum(mhsa(x, params, scheme, mask, start_pos=1), r)), [_u(rng, T, d)]

    return build


def _block(kind):
    def build(sizes, rng):
        T, d = (tuple(sizes) + (4, 8))[:2]
        cfg = ConformerConfig(1, d, 2, ffn_expansion=2, conv_kernel=3, scheme=kind)
        params = init_block(cfg, rng, T)
        scheme = make_scheme(cfg, T)
        mask = build_full_mask(T)
        r = _readout(rng, (T, d))
        return (lambda x: tc.weighted_sum(conformer_block(x, params, mask, scheme), r)), [_u(rng, T, d)]

    return build


def _encoder(kind):
    def build(sizes, rng):
        T, d = (tuple(sizes) + (5, 8))[:2]
        cfg = ConformerConfig(2, d, 2, ffn_expansion=2, conv_kernel=3, scheme=kind)
        enc = init_encoder(cfg, T, seed=int(rng.integers(1 << 31)))
        mask = build_chunk_mask(T, 2)
        r = _readout(rng, (T, d))
        return (lambda x: tc.weighted_sum(encoder_forward(x, enc, mask), r)), [_u(rng, T, d)]

    return build


OPS: dict[str, Callable] = {
    "matmul": _matmul,
    "transpose+concat+slice": _structural,
    "add": _binary(tc.add),
    "sub": _binary(tc.sub),
    "mul": _binary(tc.mul),
    "scale": _unary(lambda x: tc.scale(x, -1.7)),
    "add_bias": _add_bias,
    "sigmoid": _unary(tc.sigmoid),
    "swish": _unary(tc.swish),
    "glu": _unary(tc.glu),
    "softmax_rows": _unary(tc.softmax_rows),
    "softmax_rows_masked": _masked_softmax,
    "layernorm": _layernorm,
    "depthwise_conv1d_same": _conv(False),
    "depthwise_conv1d_causal": _conv(True),
    "rope_apply": _rope,
    "rel_shift": _rel_shift,
    "sdpa": _sdpa,
    **{f"mhsa_{k}": _mhsa(k) for k in ("none", "absolute", "rotary", "relative")},
    **{f"conformer_block_{k}": _block(k) for k in ("none", "absolute", "rotary", "relative")},
    **{f"encoder_{k}": _encoder(k) for k in ("none", "absolute", "rotary", "relative")},
}


def check(op: str, sizes: Sequence[int] = (), seed: int = 0, threshold: float = 1e-5) -> GradReport:
    """Gradient check of a registered op on seeded random inputs of the given sizes."""
    try:
        build = OPS[op]
    except KeyError:
        raise KeyError(f"unknown op {op!r}; known: {sorted(OPS)}") from None
    rng = np.random.default_rng(seed)
    loss, inputs = build(tuple(sizes), rng)
    return check_function(op, loss, inputs, threshold)
