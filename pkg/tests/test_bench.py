import csv
import math
import statistics
import time
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from ropebench.bench import (
    CSV_HEADER,
    BenchConfig,
    BenchRecord,
    SweepResult,
    Workload,
    emit_csv,
    emit_plot,
    fit_loglog_slope,
    gen_input,
    is_nondecreasing,
    measure_cell,
    measure_interleaved,
    pin_allocator,
    read_csv,
    run_sweep,
    time_once,
)
from ropebench.conformer import ConformerConfig
from ropebench.errors import AnalysisError, BenchIOError, ConfigError
from ropebench.posemb import build_rope_cache, rope_apply

TINY = ConformerConfig(1, 16, 2, ffn_expansion=2, conv_kernel=3)


def tiny_sweep(**kw):
    cfg = BenchConfig(**{"schemes": ("rotary", "relative"), "lengths": (8, 16, 32), "repeats": 3, "warmup": 1,
                         "model": TINY, **kw})
    return cfg, run_sweep(cfg)


@pytest.fixture(scope="module")
def sweep():
    return tiny_sweep()


class TestInput:
    def test_shape_and_range(self):
        x = gen_input(50, 16, seed=3).data
        assert x.shape == (50, 16) and np.abs(x).max() <= 1.0

    def test_deterministic(self):
        assert np.array_equal(gen_input(20, 8, 1).data, gen_input(20, 8, 1).data)
        assert not np.array_equal(gen_input(20, 8, 1).data, gen_input(20, 8, 2).data)


class TestTiming:
    def test_positive(self):
        assert time_once(Workload.build(TINY, 8)) > 0

    def test_doubling_layers_doubles_time(self):
        def median_time(layers):
            wl = Workload.build(ConformerConfig(layers, 64, 4), 256)
            for _ in range(3):
                time_once(wl)
            return statistics.median(time_once(wl) for _ in range(15))

        with threadpool_limits(1):
            one, two = median_time(1), median_time(2)
        assert 1.6 <= two / one <= 2.4, two / one

    def test_no_pe_not_slower_than_relative(self):
        def mean_time(kind, n):
            wl = Workload.build(ConformerConfig(2, 64, 4, scheme=kind), n)
            for _ in range(2):
                time_once(wl)
            return statistics.fmean(time_once(wl) for _ in range(7))

        pin_allocator()
        with threadpool_limits(1):
            for n in (128, 256, 512):
                assert mean_time("none", n) <= mean_time("relative", n), n

    def test_rope_apply_alone_is_linear(self):
        cache = build_rope_cache(4096, 32)
        points = []
        with threadpool_limits(1):
            for n in (128, 256, 512, 1024, 2048, 4096):
                x = gen_input(n, 128, seed=1)
                rope_apply(x, 0, cache)
                times = []
                for _ in range(20):
                    t0 = time.perf_counter()
                    rope_apply(x, 0, cache)
                    times.append(time.perf_counter() - t0)
                points.append((n, statistics.median(times)))
        assert 0.8 <= fit_loglog_slope(points) <= 1.3, points

    def test_stable_at_small_size(self):
        with threadpool_limits(1):
            times, _, _ = measure_cell(Workload.build(ConformerConfig(2, 64, 4), 128), 20, 3)
        assert statistics.stdev(times) / statistics.fmean(times) < 0.2

    def test_interleaved_matches_separate_cells(self):
        wls = {s: Workload.build(replace(TINY, scheme=s), 8) for s in ("rotary", "relative")}
        got = measure_interleaved(wls, repeats=3, warmup=1)
        assert set(got) == {"rotary", "relative"}
        for s, (times, pe, digest) in got.items():
            assert len(times) == len(pe) == 3 and all(t > 0 for t in times)
            assert digest == measure_cell(wls[s], 1, 0)[2]

    def test_pin_allocator_idempotent(self):
        first = pin_allocator()
        assert isinstance(first, bool) and pin_allocator() == first

    def test_forward_backward_fills_grads(self):
        wl = Workload.build(TINY, 8, mode="forward-backward")
        time_once(wl)
        assert all(p.grad is not None for p in wl.encoder.parameters())
        assert wl.readout.grad.shape == (16, 5000)
        wl.reset_grads()
        assert wl.encoder.parameters()[0].grad is None

    def test_forward_leaves_no_graph(self):
        wl = Workload.build(TINY, 8)
        assert not wl.run().requires_grad


class TestSweep:
    def test_record_count(self, sweep):
        cfg, res = sweep
        assert len(res.records) == 6
        assert [(r.scheme, r.length) for r in res.records[:2]] == [("rotary", 8), ("relative", 8)]
        assert all(r.repeats == 3 and r.mean_s > 0 for r in res.records)

    def test_diagnostics(self, sweep):
        _, res = sweep
        assert set(res.medians) == set(res.pe_overhead) == {(r.scheme, r.length) for r in res.records}
        assert all(v > 0 for v in res.pe_overhead.values())
        assert sorted(res.ratios) == [8, 16, 32]

    def test_checksums_deterministic(self, sweep):
        _, res = sweep
        _, again = tiny_sweep()
        assert res.checksums == again.checksums
        assert res.checksums[("rotary", 8)] != res.checksums[("relative", 8)]

    def test_chunked_sweep(self):
        _, res = tiny_sweep(chunk_frames=4, lengths=(8, 16, 24))
        assert len(res.records) == 6


class TestAnalysis:
    def test_slope_one(self):
        assert abs(fit_loglog_slope([(n, 3e-4 * n) for n in (128, 256, 512, 1024)]) - 1.0) < 1e-9

    def test_slope_two(self):
        recs = [BenchRecord("relative", n, 1e-7 * n * n, 0.0, 1) for n in (100, 200, 400)]
        assert abs(fit_loglog_slope(recs) - 2.0) < 1e-9

    def test_too_few_points(self):
        with pytest.raises(AnalysisError):
            fit_loglog_slope([(1, 1.0), (2, 2.0)])

    def test_non_positive(self):
        with pytest.raises(AnalysisError):
            fit_loglog_slope([(1, 1.0), (2, 0.0), (4, 3.0)])

    def test_nondecreasing(self):
        assert is_nondecreasing([1.0, 1.2, 1.15, 1.5])
        assert not is_nondecreasing([1.0, 1.5, 1.3])
        assert is_nondecreasing([])


class TestArtifacts:
    def test_csv_format_and_round_trip(self, sweep, tmp_path):
        _, res = sweep
        path = tmp_path / "out.csv"
        emit_csv(res, path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_HEADER) == "scheme,length_frames,mean_s,stddev_s,repeats"
        assert len(lines) == 1 + len(res.records)
        assert read_csv(path) == res.records
        rows = list(csv.reader(lines))
        assert all(math.isfinite(float(r[2])) for r in rows[1:])

    def test_bad_header(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n")
        with pytest.raises(ValueError):
            read_csv(p)

    def test_svg_parses(self, sweep, tmp_path):
        _, res = sweep
        path = tmp_path / "plot.svg"
        emit_plot(res, path)
        assert ET.parse(path).getroot().tag.endswith("svg")

    def test_unwritable_path(self, sweep, tmp_path):
        _, res = sweep
        with pytest.raises(BenchIOError, match="nope"):
            emit_csv(res, tmp_path / "nope" / "out.csv")

    def test_empty_result(self, tmp_path):
        with pytest.raises(AnalysisError):
            emit_csv(SweepResult(records=[]), tmp_path / "e.csv")


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(schemes=("alibi",)), dict(schemes=()), dict(lengths=(256, 128)), dict(lengths=(0, 4)),
         dict(repeats=0), dict(warmup=-1), dict(mode="train"), dict(chunk_frames=0)],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            BenchConfig(**kwargs)

    def test_defaults(self):
        c = BenchConfig()
        assert c.lengths == (128, 256, 512, 1024, 2048, 4096) and c.repeats == 20 and c.warmup == 3
        assert c.mode == "forward" and c.schemes == ("none", "absolute", "rotary", "relative")
