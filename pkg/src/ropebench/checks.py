"""Invariant and gradient suites behind ``ropebench check``, plus derived goldens."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import gradcheck
from . import tensor as tc
from .attention import (
    PEScheme,
    attention_logits,
    build_chunk_mask,
    build_full_mask,
    init_attention,
    mhsa,
    sdpa,
    streaming_mhsa,
)
from .conformer import ConformerConfig, encoder_forward, init_encoder, pe_parameter_count
from .posemb import (
    build_rope_cache,
    relpos_table,
    rope_angles,
    rope_apply,
    rope_dense_matrix,
    sinusoidal_absolute,
)
from .tensor import Tensor


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rope_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for d in (2, 4, 8, 16, 64):
        cache = build_rope_cache(40, d)
        x = rng.uniform(-1, 1, (16, d))
        got = rope_apply(Tensor(x), 3, cache).data
        want = np.stack([rope_dense_matrix(3 + t, d).matrix @ x[t] for t in range(16)])
        worst = max(worst, float(np.abs(got - want).max()))
    return worst < 1e-9, f"max abs error {worst:.2e}"


def _rope_algebra() -> tuple[bool, str]:
    d = 8
    r1 = rope_dense_matrix(1, d).matrix
    worst = 0.0
    power = np.eye(d)
    for t in range(17):
        rt = rope_dense_matrix(t, d).matrix
        worst = max(worst, np.abs(rt - power).max(), np.abs(rt.T @ rt - np.eye(d)).max())
        power = power @ r1
    for t in range(0, 33, 4):
        for u in range(0, 33, 5):
            prod = rope_dense_matrix(t, d).matrix @ rope_dense_matrix(u, d).matrix
            worst = max(worst, np.abs(prod - rope_dense_matrix(t + u, d).matrix).max())
    return worst < 1e-9, f"max deviation {worst:.2e}"


def _rope_norm() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    cache = build_rope_cache(64, 16)
    x = rng.uniform(-1, 1, (64, 16))
    y = rope_apply(Tensor(x), 0, cache).data
    err = float(np.abs(np.linalg.norm(y, axis=1) - np.linalg.norm(x, axis=1)).max())
    return err < 1e-12, f"max norm change {err:.2e}"


def _angles() -> tuple[bool, str]:
    th = rope_angles(64)
    ok = th[0] == 1.0 and bool(np.all(np.diff(th) < 0)) and th[-1] > 0
    return ok, f"theta_1={th[0]}, theta_32={th[-1]:.3e}"


def _shift_invariance() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    T, d, h = 12, 16, 2
    params = init_attention(d, h, rng)
    x = Tensor(rng.uniform(-1, 1, (T, d)))
    cache = build_rope_cache(T + 101, d // h)
    rot = PEScheme.rotary(cache)
    base = attention_logits(x, params, rot, 0)
    worst = 0.0
    for s in (1, 7, 50, 100):
        shifted = attention_logits(x, params, rot, s)
        worst = max(worst, max(float(np.abs(a.data - b.data).max()) for a, b in zip(base, shifted)))
    absolute = PEScheme.absolute()
    gap = max(
        float(np.abs(a.data - b.data).max())
        for a, b in zip(attention_logits(x, params, absolute, 0), attention_logits(x, params, absolute, 1))
    )
    return worst < 1e-9 and gap > 1e-3, f"rotary drift {worst:.2e}, absolute gap {gap:.2e}"


def _permutation() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    T, d = 8, 8
    params = init_attention(d, 2, rng)
    x = rng.uniform(-1, 1, (T, d))
    perm = rng.permutation(T)
    none = PEScheme.none()
    a = mhsa(Tensor(x[perm]), params, none, build_full_mask(T)).data
    b = mhsa(Tensor(x), params, none, build_full_mask(T)).data[perm]
    err = float(np.abs(a - b).max())
    return err < 1e-9, f"max error {err:.2e}"


def _primitives() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    sm = tc.softmax_rows(Tensor(rng.uniform(-1, 1, (8, 8)))).data
    sum_err = float(np.abs(sm.sum(axis=1) - 1).max())
    a, b, c = (Tensor(rng.uniform(-1, 1, (4, 4))) for _ in range(3))
    assoc = float(np.abs(((a @ b) @ c).data - (a @ (b @ c)).data).max())
    return sum_err < 1e-12 and assoc < 1e-9, f"softmax row-sum err {sum_err:.1e}, matmul assoc err {assoc:.1e}"


def _chunk_mask() -> tuple[bool, str]:
    m = build_chunk_mask(4, 2).allowed
    want = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]], dtype=bool)
    causal = np.array_equal(build_chunk_mask(5, 1).allowed, np.tril(np.ones((5, 5), dtype=bool)))
    full = build_chunk_mask(5, 9) == build_full_mask(5)
    return np.array_equal(m, want) and causal and full, "T=4/chunk=2 pattern, causal and full limits"


def _streaming() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    T, chunk = 12, 4
    cfg = ConformerConfig(2, 8, 2, ffn_expansion=2, conv_kernel=5, scheme="rotary")
    enc = init_encoder(cfg, T, seed=6)
    mask = build_chunk_mask(T, chunk)
    x = rng.uniform(-1, 1, (T, 8))
    with tc.no_grad():
        y0 = encoder_forward(Tensor(x), enc, mask).data
        leaks = 0
        for j in range(1, T // chunk):
            xp = x.copy()
            xp[j * chunk : (j + 1) * chunk] += rng.normal(size=(chunk, 8))
            yp = encoder_forward(Tensor(xp), enc, mask).data
            leaks += int(not np.array_equal(y0[: j * chunk], yp[: j * chunk]))
        params = enc.layers[0].attn
        full = mhsa(Tensor(x), params, enc.scheme, mask).data
        streamed = streaming_mhsa(Tensor(x), params, enc.scheme, chunk).data
    err = float(np.abs(full - streamed).max())
    return leaks == 0 and err < 1e-9, f"{leaks} causality leaks, streamed-vs-masked error {err:.2e}"


def _pe_params() -> tuple[bool, str]:
    counts = {
        s: pe_parameter_count(init_encoder(ConformerConfig(2, 16, 4, scheme=s), 8, 0))
        for s in ("rotary", "relative")
    }
    return counts["rotary"] == 0 and counts["relative"] > 0, f"PE parameters {counts}"


def _fd_self_test() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    a = rng.uniform(-1, 1, 10)
    g = gradcheck.finite_diff(lambda x: float(a @ x), rng.uniform(-1, 1, 10))
    err = float(np.abs(g - a).max())
    return err < 1e-10, f"linear-function error {err:.1e}"


INVARIANTS: dict[str, Callable[[], tuple[bool, str]]] = {
    "fd-oracle-self-test": _fd_self_test,
    "primitives": _primitives,
    "rope-angles": _angles,
    "rope-vs-dense-oracle": _rope_oracle,
    "rope-group-identities": _rope_algebra,
    "rope-norm-preservation": _rope_norm,
    "rope-shift-invariance": _shift_invariance,
    "no-pe-permutation-equivariance": _permutation,
    "chunk-mask-pattern": _chunk_mask,
    "streaming-causality": _streaming,
    "pe-parameter-count": _pe_params,
}

GRAD_THRESHOLD = 1e-5
END_TO_END_THRESHOLD = 1e-4


def run_checks() -> list[CheckResult]:
    results = []
    for name, fn in INVARIANTS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))
    for op in gradcheck.OPS:
        thr = END_TO_END_THRESHOLD if op.startswith("encoder_") else GRAD_THRESHOLD
        try:
            rep = gradcheck.check(op, seed=11, threshold=thr)
            results.append(CheckResult(f"grad:{op}", rep.passed, f"rel error {rep.max_rel_error:.2e} < {thr:g}"))
        except Exception as exc:
            results.append(CheckResult(f"grad:{op}", False, f"{type(exc).__name__}: {exc}"))
    return results


def golden_values() -> dict:
    """Recompute the derived example values pinned in the test suite."""
    x = Tensor([[1.0, 0.0]])
    cache = build_rope_cache(2, 2)
    q = Tensor([[1.0], [1.0]])
    k = Tensor([[0.0], [math.log(3.0)]])
    _, weights = sdpa(q, k, Tensor([[1.0], [2.0]]), build_full_mask(2))
    rel = relpos_table(3, 4)
    return {
        "matmul_2x2_by_2x1": (Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])).data.ravel().tolist(),
        "softmax_1_2_3": tc.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data.ravel().tolist(),
        "rope_angles_d8": rope_angles(8).tolist(),
        "rope_cache_d2_t1": {"cos": cache.cos_table[1].tolist(), "sin": cache.sin_table[1].tolist()},
        "rope_apply_d2_t1_e1": rope_apply(Tensor(np.zeros((2, 2)) + [[0, 0], [1, 0]]), 0, cache).data[1].tolist(),
        "sinusoidal_t1_first_sine": float(sinusoidal_absolute(2, 4)[1, 0]),
        "relpos_offsets_pm1_T3": {"plus": rel[1].tolist(), "minus": rel[3].tolist()},
        "sdpa_T2_weights_row0": weights.data[0].tolist(),
        "chunk_mask_T4_c2": build_chunk_mask(4, 2).allowed.astype(int).tolist(),
        "rope_apply_row_identity_t0": rope_apply(x, 0, cache).data.ravel().tolist(),
    }
