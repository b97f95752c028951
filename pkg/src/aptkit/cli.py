"""Command-line entry point: ``aptkit <subcommand> CONFIG [--set key.path=value ...]``."""

from __future__ import annotations

import os

# BLAS pools must be capped before numpy loads
_threads = os.environ.get("APTKIT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ConfigError, defaults_echo, validate_config  # noqa: E402
from . import experiment as ex  # noqa: E402

SUBCOMMANDS = ("gen-data", "augment", "select-features", "train", "transfer", "align", "detect",
               "evaluate", "report", "run")

_PIPELINE_UPTO = {
    "select-features": "select_features",
    "train": "train_autoencoder",
    "transfer": "fine_tune_transfer",
    "align": "siamese",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aptkit", description="Contrastive-transfer APT detection experiments.")
    parser.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. nn.epochs=10 (repeatable)")
        p.add_argument("--echo", action="store_true", help="print the fully defaulted config first")
        p.add_argument("-q", "--quiet", action="store_true")
        if name == "report":
            p.add_argument("--results", help="results.csv to read (default: <output_dir>/results.csv)")
    return parser


def _say(quiet):
    return None if quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))


def _single_command(cfg, name, work) -> int:
    """Run one stage under a manifest; ``work(out)`` returns the artifact names it wrote."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc}", file=sys.stderr)
        return ex.EXIT_IO
    manifest = ex.Manifest(cfg, out, name)
    code = ex.EXIT_OK
    try:
        manifest.add(manifest.stage(name, lambda: work(out)))
    except ex.StageFailure as exc:
        cause = exc.cause
        manifest.data["failure"] = {"stage": name, "error": f"{type(cause).__name__}: {cause}"}
        io_like = isinstance(cause, (OSError, ex.MatrixParseError, ex.SchemaError))
        code = ex.EXIT_IO if io_like else ex.EXIT_STAGE
        print(f"error: {exc}", file=sys.stderr)
    manifest.data["status"] = "ok" if code == ex.EXIT_OK else "failed"
    try:
        manifest.save()
    except OSError:
        return ex.EXIT_IO
    return code


def _pipeline_work(cfg, upto):
    def work(out):
        p, src, tgt = ex.first_seed_pipeline(cfg, upto)
        return ex.write_pipeline_artifacts(p, src, tgt, out)
    return work


def _grid_work(cfg, first_seed_only: bool, say):
    from dataclasses import replace

    run_cfg = replace(cfg, seeds=cfg.seeds[:1]) if first_seed_only else cfg

    def work(out):
        data = {s: ex.load_datasets(run_cfg, s) for s in run_cfg.seeds}
        grid = ex.run_protocol_grid(
            lambda s: data[s][cfg.source.name][0], {cfg.target.name: lambda s: data[s][cfg.target.name][0]},
            cfg.methods, cfg.protocols, cfg.protocol, run_cfg.seeds,
            progress=(lambda k, c: say(ex._cell_line(k, c))) if say else None)
        if first_seed_only:
            return ["scores.csv"] if ex.write_scores(grid, out / "scores.csv", cfg.target.name, cfg.seeds[0]) else []
        tags = {cfg.source.name: cfg.source.os_tag, cfg.target.name: cfg.target.os_tag}
        names = ex.emit_report(grid, out, tags)
        if grid.failures():
            # results.csv already holds nan rows for these cells
            raise RuntimeError(f"{len(grid.failures())} grid cells failed")
        return names
    return work


def _report_work(results):
    def work(out):
        path = Path(results) if results else out / "results.csv"
        grid, tags = ex.grid_from_results(path)
        names = ex.emit_report(grid, out, tags)
        print((out / "report.txt").read_text(encoding="utf-8"), end="")
        return names
    return work


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(defaults_echo())
        return ex.EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return ex.EXIT_CONFIG
    try:
        cfg = validate_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return ex.EXIT_IO
    if args.echo:
        print(cfg.echo())
    say = _say(args.quiet)

    cmd = args.command
    if cmd == "run":
        code = ex.run_experiment(cfg, progress=say)
    elif cmd == "gen-data":
        code = _single_command(cfg, cmd, lambda out: ex.save_datasets(cfg, out))
    elif cmd == "augment":
        code = _single_command(cfg, cmd, lambda out: ex.save_augmented(cfg, out))
    elif cmd in _PIPELINE_UPTO:
        code = _single_command(cfg, cmd, _pipeline_work(cfg, _PIPELINE_UPTO[cmd]))
    elif cmd == "detect":
        code = _single_command(cfg, cmd, _grid_work(cfg, True, say))
    elif cmd == "evaluate":
        code = _single_command(cfg, cmd, _grid_work(cfg, False, say))
    else:
        code = _single_command(cfg, cmd, _report_work(args.results))
    if say:
        say(f"{cmd}: exit {code}, outputs in {cfg.output_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
