"""Acceptance suite: one test per criterion, each printed as a PASS/FAIL line in the summary."""

import time

import numpy as np
import pytest

from ropebench import cli, gradcheck, posemb
from ropebench import tensor as tc
from ropebench.attention import (
    PEScheme,
    attention_logits,
    build_chunk_mask,
    init_attention,
    mhsa,
    streaming_mhsa,
)
from ropebench.bench import (
    BenchConfig,
    BenchRecord,
    SweepResult,
    emit_csv,
    emit_plot,
    fit_loglog_slope,
    is_nondecreasing,
    read_csv,
    run_sweep,
)
from ropebench.conformer import ConformerConfig, encoder_forward, init_encoder, pe_parameter_count
from ropebench.posemb import build_rope_cache, rope_apply, rope_dense_matrix
from ropebench.tensor import Tensor


def test_c1_rotary_matches_dense_rotation(criterion):
    with criterion(1, "rotary kernel equals dense block-diagonal rotation", 5.0) as c:
        rng = np.random.default_rng(101)
        worst = 0.0
        for d in (2, 4, 8, 16, 64):
            cache = build_rope_cache(64, d)
            for T in (1, 7, 33, 64):
                x = rng.uniform(-1, 1, (T, d))
                start = int(rng.integers(0, 65 - T))
                got = rope_apply(Tensor(x), start, cache).data
                want = np.stack([rope_dense_matrix(start + t, d).matrix @ x[t] for t in range(T)])
                worst = max(worst, float(np.abs(got - want).max()))
        c.detail = f"max abs error {worst:.2e}"
        assert worst < 1e-9


def test_c2_rotation_group_identities(criterion):
    with criterion(2, "R_t = R_1^t, R_t^T R_t = I, R_t R_u = R_(t+u)", 5.0) as c:
        worst = 0.0
        for d in (2, 8, 16):
            r1 = rope_dense_matrix(1, d).matrix
            power = np.eye(d)
            for t in range(17):
                rt = rope_dense_matrix(t, d).matrix
                worst = max(worst, np.abs(rt - power).max(), np.abs(rt.T @ rt - np.eye(d)).max())
                power = power @ r1
            for t in range(0, 40, 3):
                for u in range(0, 40, 7):
                    prod = rope_dense_matrix(t, d).matrix @ rope_dense_matrix(u, d).matrix
                    worst = max(worst, np.abs(prod - rope_dense_matrix(t + u, d).matrix).max())
        c.detail = f"max deviation {worst:.2e}"
        assert worst < 1e-9


def test_c3_shift_invariance(criterion):
    with criterion(3, "rotary logits invariant to a common shift; absolute is not", 10.0) as c:
        rng = np.random.default_rng(103)
        T, d, h = 24, 32, 4
        params = init_attention(d, h, rng)
        x = Tensor(rng.uniform(-1, 1, (T, d)))
        rot = PEScheme.rotary(build_rope_cache(T + 100, d // h))
        base = attention_logits(x, params, rot, 0)
        drift = 0.0
        for s in range(1, 101):
            shifted = attention_logits(x, params, rot, s)
            drift = max(drift, max(float(np.abs(a.data - b.data).max()) for a, b in zip(base, shifted)))
        ab = PEScheme.absolute()
        gap = max(
            float(np.abs(a.data - b.data).max())
            for a, b in zip(attention_logits(x, params, ab, 0), attention_logits(x, params, ab, 1))
        )
        c.detail = f"rotary drift {drift:.2e}, absolute gap {gap:.2e}"
        assert drift < 1e-9 and gap > 1e-3


def test_c4_gradients(criterion):
    with criterion(4, "analytic gradients match central differences", 60.0) as c:
        reports = []
        for op in gradcheck.OPS:
            end_to_end = op.startswith("encoder_")
            reports.append((gradcheck.check(op, seed=104, threshold=1e-4 if end_to_end else 1e-5), end_to_end))
        prim = max(r.max_rel_error for r, e in reports if not e)
        e2e = max(r.max_rel_error for r, e in reports if e)
        failed = [r.op for r, _ in reports if not r.passed]
        c.detail = f"{len(reports)} ops, worst primitive {prim:.1e}, worst 2-layer encoder {e2e:.1e}"
        assert all(f"encoder_{k}" in gradcheck.OPS for k in ("none", "absolute", "rotary", "relative"))
        assert not failed, failed


@pytest.fixture(scope="module")
def default_sweep():
    """The default desk-scale sweep restricted to the two schemes criterion 5 compares."""
    config = BenchConfig(schemes=("rotary", "relative"), model=ConformerConfig())
    t0 = time.perf_counter()
    result = run_sweep(config)
    return config, result, time.perf_counter() - t0


@pytest.mark.slow
def test_c5_complexity_shape(criterion, default_sweep, tmp_path):
    with criterion(5, "PE overhead growth: rotary linear, relative faster", 600.0) as c:
        config, result, elapsed = default_sweep
        rot_slope = fit_loglog_slope(result.overhead_points("rotary"))
        rel_slope = fit_loglog_slope(result.overhead_points("relative"))
        ratios = [result.ratios[n] for n in config.lengths]
        emit_csv(result, tmp_path / "sweep.csv")
        emit_plot(result, tmp_path / "sweep.svg")
        rot = {r.length: r.mean_s for r in result.for_scheme("rotary")}
        rel = {r.length: r.mean_s for r in result.for_scheme("relative")}
        c.detail = (
            f"sweep {elapsed:.0f} s; PE slopes rotary {rot_slope:.2f}, relative {rel_slope:.2f}; "
            f"ratios {' '.join(f'{r:.2f}' for r in ratios)}"
        )
        assert elapsed < 600.0
        assert len(result.records) == 2 * len(config.lengths)
        assert 0.8 <= rot_slope <= 1.3
        assert rel_slope - rot_slope > 0.3
        assert is_nondecreasing(ratios, tolerance=0.05)
        assert all(rot[n] <= rel[n] for n in config.lengths)


@pytest.mark.slow
def test_sweep_times_grow_with_length(default_sweep):
    _, result, _ = default_sweep
    for s in ("rotary", "relative"):
        assert is_nondecreasing([r.mean_s for r in result.for_scheme(s)], tolerance=0.05)
        assert all(result.medians[(s, r.length)] > 0 for r in result.for_scheme(s))


def test_c6_streaming(criterion):
    with criterion(6, "chunked streaming is causal and matches the masked pass", 10.0) as c:
        rng = np.random.default_rng(106)
        T, chunk, d = 24, 4, 16
        enc = init_encoder(ConformerConfig(2, d, 4, ffn_expansion=2, conv_kernel=7), T, seed=106)
        mask = build_chunk_mask(T, chunk)
        x = rng.uniform(-1, 1, (T, d))
        leaks = 0
        with tc.no_grad():
            y0 = encoder_forward(Tensor(x), enc, mask).data
            for j in range(1, T // chunk):
                xp = x.copy()
                xp[j * chunk : (j + 1) * chunk] += rng.normal(size=(chunk, d))
                y1 = encoder_forward(Tensor(xp), enc, mask).data
                leaks += int(not np.array_equal(y0[: j * chunk], y1[: j * chunk]))
            err = 0.0
            for size in (1, 3, 4, 7):
                m = build_chunk_mask(T, size)
                for layer in enc.layers:
                    full = mhsa(Tensor(x), layer.attn, enc.scheme, m).data
                    streamed = streaming_mhsa(Tensor(x), layer.attn, enc.scheme, size).data
                    err = max(err, float(np.abs(full - streamed).max()))
        c.detail = f"{leaks} leaks across {T // chunk - 1} perturbed chunks, streamed error {err:.2e}"
        assert leaks == 0 and err < 1e-9


def test_c7_parameter_accounting(criterion):
    with criterion(7, "rotary adds no PE parameters, relative does", 10.0) as c:
        base = ConformerConfig()
        counts = {s: pe_parameter_count(init_encoder(ConformerConfig(scheme=s), 256)) for s in ("rotary", "relative")}
        c.detail = f"PE parameters {counts} at {base.n_layers} layers, d_model={base.d_model}"
        assert counts["rotary"] == 0 and counts["relative"] > 0


def test_c8_interface(criterion, tmp_path, monkeypatch, capsys):
    with criterion(8, "CSV round-trips; check exits 0 healthy, 2 when broken", 30.0) as c:
        rng = np.random.default_rng(108)
        records = [
            BenchRecord(s, n, float(rng.uniform(1e-4, 10)), float(rng.uniform(0, 1e-2)), 20)
            for n in (128, 256, 4096) for s in ("none", "rotary", "relative")
        ]
        records = [BenchRecord(r.scheme, r.length, float(f"{r.mean_s:.9g}"), float(f"{r.stddev_s:.9g}"), r.repeats)
                   for r in records]
        emit_csv(SweepResult(records), tmp_path / "a.csv")
        round_trip = read_csv(tmp_path / "a.csv") == records
        emit_csv(read_csv(tmp_path / "a.csv"), tmp_path / "b.csv")
        stable = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        healthy = cli.main(["check"])
        orig = posemb._rotate
        monkeypatch.setattr(posemb, "_rotate", lambda y, cos, sin, heads: orig(y, cos, -sin, heads))
        broken = cli.main(["check"])
        capsys.readouterr()
        c.detail = f"round trip {round_trip}, byte-stable {stable}, healthy exit {healthy}, mutated exit {broken}"
        assert round_trip and stable and healthy == 0 and broken == 2
