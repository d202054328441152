"""Sequence-length timing sweep for Conformer encoders under each PE scheme.

Every (scheme, length) cell gets ``warmup`` untimed passes followed by
``repeats`` timed passes on a single thread.  Besides whole-pass wall time,
each pass records the time spent inside positional-embedding stages, which
is the quantity whose growth rate separates rotary (linear) from relative
(quadratic) encodings.
"""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import hashlib
import logging
import math
import statistics
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tc
from .attention import SCHEMES, AttentionMask, StageTimer, build_chunk_mask, build_full_mask
from .conformer import ConformerConfig, Encoder, encoder_forward, init_encoder
from .errors import AnalysisError, BenchIOError, ConfigError
from .tensor import Tensor

log = logging.getLogger(__name__)

# glibc mallopt parameter ids
_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_ALLOCATOR_PINNED = False


def pin_allocator(threshold: int = 1 << 30) -> bool:
    """Stop glibc from returning large arrays to the OS between passes.

    By default every multi-megabyte temporary is mmapped fresh and
    page-faulted in, a cost that jumps irregularly with array size and
    distorts length scaling.  Process-wide and idempotent; returns False
    where the C library has no ``mallopt``.
    """
    global _ALLOCATOR_PINNED
    if _ALLOCATOR_PINNED:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_TRIM_THRESHOLD, threshold) == 1 and mallopt(_M_MMAP_THRESHOLD, threshold) == 1
    _ALLOCATOR_PINNED = ok
    if not ok:
        log.info("mallopt rejected the allocator thresholds; timings may include page-fault noise")
    return ok

CSV_HEADER = ("scheme", "length_frames", "mean_s", "stddev_s", "repeats")
FRAMES_PER_SECOND = 100
VOCAB_SIZE = 5000
MODES = ("forward", "forward-backward")


def sig9(x: float) -> float:
    """Round to the 9 significant digits used in CSV output."""
    return float(f"{x:.9g}")


@dataclass(frozen=True)
class BenchConfig:
    schemes: tuple[str, ...] = ("none", "absolute", "rotary", "relative")
    lengths: tuple[int, ...] = (128, 256, 512, 1024, 2048, 4096)
    repeats: int = 20
    warmup: int = 3
    model: ConformerConfig = field(default_factory=ConformerConfig)
    mode: str = "forward"
    seed: int = 0
    chunk_frames: int | None = None
    csv_path: str | None = None
    plot_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(self.schemes))
        object.__setattr__(self, "lengths", tuple(int(n) for n in self.lengths))
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigError(f"schemes must be a non-empty subset of {SCHEMES}, got {self.schemes}")
        if not self.lengths or self.lengths[0] < 1 or any(
            b <= a for a, b in zip(self.lengths, self.lengths[1:])
        ):
            raise ConfigError(f"lengths must be positive and strictly increasing, got {self.lengths}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.chunk_frames is not None and self.chunk_frames < 1:
            raise ConfigError(f"chunk_frames must be >= 1, got {self.chunk_frames}")


@dataclass(frozen=True)
class BenchRecord:
    scheme: str
    length: int
    mean_s: float
    stddev_s: float
    repeats: int

    def __post_init__(self):
        if self.mean_s < 0 or self.stddev_s < 0:
            raise ValueError(f"negative timing in {self}")


@dataclass
class SweepResult:
    """Records plus per-cell diagnostics that are not part of the CSV."""

    records: list[BenchRecord]
    medians: dict[tuple[str, int], float] = field(default_factory=dict)
    pe_overhead: dict[tuple[str, int], float] = field(default_factory=dict)
    checksums: dict[tuple[str, int], str] = field(default_factory=dict)

    @property
    def ratios(self) -> dict[int, float]:
        """Per length, mean time of the relative scheme over the rotary scheme."""
        rel = {r.length: r.mean_s for r in self.records if r.scheme == "relative"}
        rot = {r.length: r.mean_s for r in self.records if r.scheme == "rotary"}
        return {n: rel[n] / rot[n] for n in sorted(rel.keys() & rot.keys()) if rot[n] > 0}

    def for_scheme(self, scheme: str) -> list[BenchRecord]:
        return sorted((r for r in self.records if r.scheme == scheme), key=lambda r: r.length)

    def overhead_points(self, scheme: str) -> list[tuple[int, float]]:
        return sorted((n, t) for (s, n), t in self.pe_overhead.items() if s == scheme)


def gen_input(length: int, d_model: int, seed: int = 0) -> Tensor:
    """Seeded U(-1, 1) frames; the stream depends on both ``seed`` and ``length``."""
    rng = np.random.default_rng((seed, length))
    return Tensor(rng.uniform(-1.0, 1.0, size=(length, d_model)))


class Workload:
    """Everything a timed pass needs, built outside the timed region."""

    def __init__(self, encoder: Encoder, x: Tensor, mask: AttentionMask, mode: str, seed: int = 0):
        self.encoder = encoder
        self.x = x
        self.mask = mask
        self.mode = mode
        self.readout = None
        if mode == "forward-backward":
            rng = np.random.default_rng((seed, VOCAB_SIZE))
            d = encoder.config.d_model
            bound = 1.0 / math.sqrt(d)
            self.readout = Tensor(rng.uniform(-bound, bound, (d, VOCAB_SIZE)), requires_grad=True)

    @classmethod
    def build(
        cls,
        config: ConformerConfig,
        length: int,
        *,
        seed: int = 0,
        mode: str = "forward",
        chunk_frames: int | None = None,
        encoder: Encoder | None = None,
    ) -> Workload:
        if encoder is None:
            encoder = init_encoder(config, length, seed)
        mask = build_full_mask(length) if chunk_frames is None else build_chunk_mask(length, chunk_frames)
        return cls(encoder, gen_input(length, config.d_model, seed), mask, mode, seed)

    def run(self, profile: StageTimer | None = None) -> Tensor:
        if self.mode == "forward":
            with tc.no_grad():
                return encoder_forward(self.x, self.encoder, self.mask, profile=profile)
        y = encoder_forward(self.x, self.encoder, self.mask, profile=profile)
        # Linear projection to the token vocabulary with a sum readout gives
        # backward a genuine scalar loss path.
        tc.sum_all(tc.matmul(y, self.readout)).backward()
        return y

    def reset_grads(self) -> None:
        tc.zero_grad(self.encoder.parameters())
        if self.readout is not None:
            self.readout.grad = None


def time_once(workload: Workload, profile: StageTimer | None = None) -> float:
    """Wall-clock seconds of one pass, measured with a monotonic clock."""
    workload.reset_grads()
    t0 = time.perf_counter()
    workload.run(profile)
    dt = time.perf_counter() - t0
    if not dt > 0:
        raise RuntimeError(f"monotonic clock returned a non-positive duration ({dt!r})")
    return dt


def _checksum(y: Tensor) -> str:
    return hashlib.sha256(y.data.tobytes()).hexdigest()


def _warm(workload: Workload, warmup: int) -> None:
    for _ in range(warmup):
        workload.reset_grads()
        workload.run()


def _final_checksum(workload: Workload) -> str:
    workload.reset_grads()
    with tc.no_grad():
        return _checksum(encoder_forward(workload.x, workload.encoder, workload.mask))


def measure_cell(workload: Workload, repeats: int, warmup: int) -> tuple[list[float], list[float], str]:
    """Warm up, then time ``repeats`` passes; returns (pass times, PE times, output checksum)."""
    _warm(workload, warmup)
    times, pe = [], []
    for _ in range(repeats):
        prof = StageTimer()
        times.append(time_once(workload, prof))
        pe.append(prof["pe"])
    return times, pe, _final_checksum(workload)


def measure_interleaved(
    workloads: dict[str, Workload], repeats: int, warmup: int
) -> dict[str, tuple[list[float], list[float], str]]:
    """Like ``measure_cell`` for several workloads, alternating their timed passes.

    Rounds run in ABBA order so slow drift in machine speed lands on every
    workload equally instead of on whichever cell happened to run during it.
    A workload that runs out of memory is dropped with a warning.
    """
    live = {}
    for name, wl in workloads.items():
        try:
            _warm(wl, warmup)
            live[name] = wl
        except MemoryError:
            log.warning("out of memory while warming %s; cell skipped", name)
    times = {name: [] for name in live}
    pe = {name: [] for name in live}
    order = list(live)
    for r in range(repeats):
        for name in order if r % 2 == 0 else reversed(order):
            if name not in live:
                continue
            prof = StageTimer()
            try:
                times[name].append(time_once(live[name], prof))
            except MemoryError:
                log.warning("out of memory while timing %s; cell skipped", name)
                del live[name]
                continue
            pe[name].append(prof["pe"])
    return {name: (times[name], pe[name], _final_checksum(wl)) for name, wl in live.items()}


def run_sweep(config: BenchConfig, progress=None) -> SweepResult:
    """Time every (scheme, length) cell of ``config``.

    Lengths are the outer loop.  Within a length every scheme is warmed up,
    then the schemes' timed passes are interleaved (see
    ``measure_interleaved``) so they share the same machine conditions.  The
    sweep pins BLAS to one thread and pins the allocator (see
    ``pin_allocator``).  A cell that runs out of memory is skipped with a
    warning.
    """
    pin_allocator()
    max_len = config.lengths[-1]
    encoders = {
        s: init_encoder(replace(config.model, scheme=s), max_len, config.seed)
        for s in config.schemes
    }
    result = SweepResult(records=[])
    with threadpool_limits(limits=1):
        for n in config.lengths:
            workloads = {}
            for s in config.schemes:
                try:
                    workloads[s] = Workload.build(
                        encoders[s].config, n, seed=config.seed, mode=config.mode,
                        chunk_frames=config.chunk_frames, encoder=encoders[s],
                    )
                except MemoryError:
                    log.warning("out of memory for scheme=%s length=%d; cell skipped", s, n)
            measured = measure_interleaved(workloads, config.repeats, config.warmup)
            for s in config.schemes:
                if s not in measured:
                    continue
                times, pe, digest = measured[s]
                rec = BenchRecord(
                    scheme=s,
                    length=n,
                    mean_s=sig9(statistics.fmean(times)),
                    stddev_s=sig9(statistics.stdev(times) if len(times) > 1 else 0.0),
                    repeats=config.repeats,
                )
                result.records.append(rec)
                result.medians[(s, n)] = statistics.median(times)
                result.pe_overhead[(s, n)] = statistics.fmean(pe)
                result.checksums[(s, n)] = digest
                if progress is not None:
                    progress(rec, result)
    return result


def fit_loglog_slope(points: Iterable[BenchRecord | tuple[float, float]]) -> float:
    """Least-squares slope of log(seconds) against log(length)."""
    xs, ys = [], []
    for p in points:
        n, t = (p.length, p.mean_s) if isinstance(p, BenchRecord) else p
        if not (n > 0 and t > 0):
            raise AnalysisError(f"log-log fit needs positive lengths and times, got ({n}, {t})")
        xs.append(math.log(n))
        ys.append(math.log(t))
    if len(xs) < 3:
        raise AnalysisError(f"log-log fit needs at least 3 points, got {len(xs)}")
    return float(np.polyfit(xs, ys, 1)[0])


def is_nondecreasing(values: Sequence[float], tolerance: float = 0.05) -> bool:
    """True when no value falls more than ``tolerance`` (relative) below the running max."""
    peak = -math.inf
    for v in values:
        if v < peak * (1.0 - tolerance):
            return False
        peak = max(peak, v)
    return True


# -- artifacts ----------------------------------------------------------------


def emit_csv(result: SweepResult | Sequence[BenchRecord], path: str | Path) -> None:
    records = result.records if isinstance(result, SweepResult) else list(result)
    if not records:
        raise AnalysisError("nothing to write: the sweep produced no records")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in records:
                w.writerow([r.scheme, r.length, f"{r.mean_s:.9g}", f"{r.stddev_s:.9g}", r.repeats])
    except OSError as exc:
        raise BenchIOError(f"cannot write CSV to {path}: {exc.strerror or exc}") from exc


def read_csv(path: str | Path) -> list[BenchRecord]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise BenchIOError(f"cannot read CSV from {path}: {exc.strerror or exc}") from exc
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: header must be {','.join(CSV_HEADER)}")
    return [
        BenchRecord(scheme=s, length=int(n), mean_s=float(m), stddev_s=float(sd), repeats=int(r))
        for s, n, m, sd, r in rows[1:]
    ]


def emit_plot(result: SweepResult, path: str | Path) -> None:
    """SVG with absolute time per scheme (top) and relative/rotary ratio (bottom)."""
    if not result.records:
        raise AnalysisError("nothing to plot: the sweep produced no records")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 7), sharex=True)
    for s in SCHEMES:
        recs = result.for_scheme(s)
        if recs:
            top.plot([r.length for r in recs], [r.mean_s for r in recs], marker="o", label=s)
    top.set_xscale("log", base=2)
    top.set_yscale("log")
    top.set_ylabel("mean wall time per pass (s)")
    top.legend()
    ratios = result.ratios
    if ratios:
        bottom.plot(list(ratios), list(ratios.values()), marker="o", color="tab:red")
    bottom.axhline(1.0, color="grey", lw=0.8)
    bottom.set_ylabel("time relative / rotary")
    bottom.set_xlabel(f"length (frames; {FRAMES_PER_SECOND} frames = 1 s)")
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg")
    except OSError as exc:
        raise BenchIOError(f"cannot write plot to {path}: {exc.strerror or exc}") from exc
    finally:
        plt.close(fig)
