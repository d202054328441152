"""Command-line entry point: ``ropebench sweep | check | goldens``.

Exit codes: 0 success, 1 usage error, 2 check-suite failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attention import SCHEMES
from .bench import FRAMES_PER_SECOND, MODES, BenchConfig, emit_csv, emit_plot, fit_loglog_slope, run_sweep
from .conformer import ConformerConfig
from .errors import AnalysisError, BenchIOError, ConfigError

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3

# flag name -> (parser for config-file values, builtin default)
SWEEP_OPTIONS = {
    "schemes": (lambda s: tuple(p.strip() for p in s.split(",") if p.strip()), BenchConfig.schemes),
    "lengths": (lambda s: tuple(int(p) for p in s.split(",") if p.strip()), BenchConfig.lengths),
    "repeats": (int, BenchConfig.repeats),
    "warmup": (int, BenchConfig.warmup),
    "layers": (int, ConformerConfig.n_layers),
    "d_model": (int, ConformerConfig.d_model),
    "heads": (int, ConformerConfig.n_heads),
    "mode": (str, BenchConfig.mode),
    "seed": (int, BenchConfig.seed),
    "theta_base": (float, ConformerConfig.theta_base),
    "chunk_frames": (int, None),
    "csv": (str, None),
    "plot": (str, None),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ropebench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sw = sub.add_parser("sweep", help="time encoder passes across sequence lengths")
    sw.add_argument("--config", help="key=value file mirroring these flags; flags win")
    sw.add_argument("--schemes", help=f"comma list from {','.join(SCHEMES)}")
    sw.add_argument("--lengths", help="comma list of strictly increasing frame counts")
    sw.add_argument("--repeats", type=int)
    sw.add_argument("--warmup", type=int)
    sw.add_argument("--layers", dest="layers", type=int)
    sw.add_argument("--d-model", dest="d_model", type=int)
    sw.add_argument("--heads", type=int)
    sw.add_argument("--mode", choices=MODES)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--theta-base", dest="theta_base", type=float)
    sw.add_argument("--chunk-frames", dest="chunk_frames", type=int)
    sw.add_argument("--csv", metavar="PATH")
    sw.add_argument("--plot", metavar="PATH", help="SVG output")

    sub.add_parser("check", help="run invariant and gradient suites")

    gd = sub.add_parser("goldens", help="recompute derived example values as JSON")
    gd.add_argument("--out", metavar="PATH")
    return parser


def read_config_file(path: str) -> dict[str, object]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise BenchIOError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in SWEEP_OPTIONS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = SWEEP_OPTIONS[key][0](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def sweep_config(args: argparse.Namespace) -> BenchConfig:
    file_values = read_config_file(args.config) if args.config else {}
    merged = {}
    for key, (convert, default) in SWEEP_OPTIONS.items():
        flag = getattr(args, key)
        if flag is not None and key in ("schemes", "lengths"):
            try:
                merged[key] = convert(flag)
            except ValueError as exc:
                raise UsageError(f"bad value for --{key}: {exc}") from None
        elif flag is not None:
            merged[key] = flag
        else:
            merged[key] = file_values.get(key, default)
    model = ConformerConfig(
        n_layers=merged["layers"],
        d_model=merged["d_model"],
        n_heads=merged["heads"],
        theta_base=merged["theta_base"],
    )
    return BenchConfig(
        schemes=merged["schemes"],
        lengths=merged["lengths"],
        repeats=merged["repeats"],
        warmup=merged["warmup"],
        model=model,
        mode=merged["mode"],
        seed=merged["seed"],
        chunk_frames=merged["chunk_frames"],
        csv_path=merged["csv"],
        plot_path=merged["plot"],
    )


def cmd_sweep(args) -> int:
    config = sweep_config(args)

    def progress(rec, result):
        pe = result.pe_overhead[(rec.scheme, rec.length)]
        print(
            f"{rec.scheme:>9} {rec.length:>7} frames ({rec.length / FRAMES_PER_SECOND:6.2f} s)"
            f"  mean {rec.mean_s:.4e} s  sd {rec.stddev_s:.2e}  median {result.medians[(rec.scheme, rec.length)]:.4e}"
            f"  pe {pe:.3e} s",
            file=sys.stderr,
            flush=True,
        )

    result = run_sweep(config, progress)
    print("scheme,length_frames,mean_s,median_s,pe_overhead_s")
    for r in result.records:
        key = (r.scheme, r.length)
        print(f"{r.scheme},{r.length},{r.mean_s:.9g},{result.medians[key]:.9g},{result.pe_overhead[key]:.9g}")
    for n, ratio in result.ratios.items():
        print(f"ratio relative/rotary @ {n}: {ratio:.4f}")
    for s in config.schemes:
        pts = [p for p in result.overhead_points(s) if p[1] > 0]
        try:
            print(f"log-log slope {s}: pass {fit_loglog_slope(result.for_scheme(s)):.3f}", end="")
            print(f", PE overhead {fit_loglog_slope(pts):.3f}" if len(pts) >= 3 else "")
        except AnalysisError as exc:
            print(f"log-log slope {s}: n/a ({exc})")
    if config.csv_path:
        emit_csv(result, config.csv_path)
    if config.plot_path:
        emit_plot(result, config.plot_path)
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<34} {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_goldens(args) -> int:
    from .checks import golden_values

    text = json.dumps(golden_values(), indent=2, sort_keys=True) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise BenchIOError(f"cannot write goldens to {args.out}: {exc.strerror or exc}") from exc
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"sweep": cmd_sweep, "check": cmd_check, "goldens": cmd_goldens}
    try:
        return handlers[args.command](args)
    except (UsageError, ConfigError, AnalysisError) as exc:
        print(f"ropebench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BenchIOError, OSError) as exc:
        print(f"ropebench: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RuntimeError as exc:
        print(f"ropebench: aborted: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
