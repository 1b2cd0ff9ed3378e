"""Command line entry point: ``cmlab <gen-data|run|trajectory|report|heatmap>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .artifacts import atomic_write_text, format_heatmap_csv, loads_report, parse_heatmap_csv, render_heatmap_svg
from .data import build_benchmark, write_benchmark
from .errors import CMLError, ConfigError
from .runner import H2L, L2H, ExperimentConfig, emit_artifacts, format_summary, run_experiment, run_trajectory
from .strategies import STRATEGIES

FORMATS = {"csv": ("csv",), "svg": ("svg",), "all": ("csv", "svg")}


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _strategies(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STRATEGIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown strategy {bad[0]!r}; choose from {', '.join(STRATEGIES)}")
    return names


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None):
        changes["seeds"] = args.seed
    if getattr(args, "strategy", None):
        changes["strategies"] = args.strategy
    if getattr(args, "out", None):
        changes["out_dir"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg.validate()


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    bench = build_benchmark(cfg.benchmark_spec())
    paths = write_benchmark(bench, cfg.out_dir, seed=cfg.seeds[0])
    print(f"wrote {len(paths)} files to {cfg.out_dir}")
    return 0


def _run_and_emit(cfg: ExperimentConfig, result, args) -> int:
    paths = emit_artifacts(result, cfg.out_dir, FORMATS[args.format])
    print(format_summary(result))
    print(f"wrote {len(paths)} files to {cfg.out_dir}")
    failed = [a for a in result.manifest.arms if a.status != "ok"]
    for a in failed:
        print(f"arm failed: {a.strategy} seed {a.seed} {a.language}: {a.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    return _run_and_emit(cfg, run_experiment(cfg), args)


def cmd_trajectory(args) -> int:
    cfg = _load_config(args)
    orders = cfg.trajectories or [H2L, L2H]
    return _run_and_emit(cfg, run_trajectory(cfg, orders), args)


def cmd_report(args) -> int:
    path = Path(args.out) / "report.json"
    report = loads_report(path.read_text(encoding="utf-8"))
    if args.format == "json":
        print(path.read_text(encoding="utf-8"), end="")
        return 0
    print(f"config {report['config_hash']}  seeds {report['seeds']}")
    for name, r in sorted(report["strategies"].items()):
        s = r["summary"]
        print(f"{name:11s} AvgPercentLoss={s['avg_percent_loss']:.4f} NumImprovedLangs={s['num_improved_langs']:.3f} "
              f"SumRatio={s['sum_ratio']:.3f} MaxRatio={s['max_ratio']:.3f} "
              f"closest={r['closest_language_mean']:.3f}")
    for key, t in sorted(report["trajectories"].items()):
        print(f"{key:15s} worst-case loss={t['mean_worst_case_loss']:.4f} "
              f"worst stage of mean={t['worst_case_stage_of_mean']}")
    return 0


def cmd_heatmap(args) -> int:
    root = Path(args.out)
    csvs = sorted(p for sub in ("heatmaps", "trajectories") for p in (root / sub).glob("*.csv"))
    if not csvs:
        print(f"no heatmap CSV files under {root}", file=sys.stderr)
        return 1
    formats = FORMATS[args.format]
    for path in csvs:
        rows, cols, values = parse_heatmap_csv(path.read_text(encoding="utf-8"))
        if "csv" in formats:
            atomic_write_text(path, format_heatmap_csv(cols, values, rows))
        if "svg" in formats:
            atomic_write_text(path.with_suffix(".svg"), render_heatmap_svg(cols, values, path.stem, rows))
    print(f"rendered {len(csvs)} heatmaps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmlab", description="Continual multilingual learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy=True, fmt=True):
        p.add_argument("--config", type=Path, help="flat JSON experiment config")
        p.add_argument("--seed", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--out", type=Path, help="output directory")
        if strategy:
            p.add_argument("--strategy", type=_strategies, help="fft, sft, laft or laft-uriel (comma list)")
        if fmt:
            p.add_argument("--format", choices=sorted(FORMATS), default="all", help="heatmap formats")

    common(sub.add_parser("gen-data", help="write the synthetic benchmark to disk"), strategy=False, fmt=False)
    common(sub.add_parser("run", help="inception plus one continuation arm per language"))
    common(sub.add_parser("trajectory", help="sequential continuation through every language"))
    rep = sub.add_parser("report", help="summarise a finished run")
    rep.add_argument("--out", type=Path, required=True, help="run directory")
    rep.add_argument("--format", choices=["text", "json"], default="text")
    hm = sub.add_parser("heatmap", help="re-render heatmaps of a finished run")
    hm.add_argument("--out", type=Path, required=True, help="run directory")
    hm.add_argument("--format", choices=sorted(FORMATS), default="svg")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "trajectory": cmd_trajectory,
            "report": cmd_report, "heatmap": cmd_heatmap}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CMLError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
