"""Experiment runner: synth, build, train, eval, ablate, report.

Exit codes: 0 success, 2 contract/config errors, 3 data-integrity
(leakage) failures. Configuration comes from an INI file with
[data]/[model]/[train]/[run] sections; --set section.key=value flags
override file values, and the merged text is echoed into run outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ChronomodalError, ConfigError, LeakageError
from .experiments import (ABLATION_AXES, ablate_run, apply_overrides,
                          atomic_write_json, build_dataset, emit_reports,
                          evaluate_run, load_dataset, load_ini,
                          model_config_from, read_json, seeds_from,
                          synth_dataset, train_config_from, train_run)
from .records import SECTION_MODES
from .synth import SIGNAL_MODES, SyntheticSpec

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_INTEGRITY = 3


def _echo_config(cfg: dict) -> str:
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        for key in sorted(cfg[section]):
            lines.append(f"{key} = {cfg[section][key]}")
        lines.append("")
    return "\n".join(lines)


def _resolve(args) -> dict:
    cfg = load_ini(args.config) if args.config else {}
    return apply_overrides(cfg, args.set or [])


def _require_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force "
                          f"to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    out = _require_out(args.out, args.force)
    spec = SyntheticSpec(n_subjects=args.subjects, min_visits=args.min_visits,
                         max_visits=args.max_visits, dim=args.dim,
                         label_count=args.label_count, signal=args.signal,
                         signal_strength=args.signal_strength,
                         noise=args.noise,
                         recency_halflife_days=args.recency_halflife_days)
    stats = synth_dataset(spec, args.seed, out)
    print(f"synth: wrote dataset to {out}")
    for key in ("subjects", "samples_prefilter", "samples_postfilter"):
        if key in stats:
            print(f"  {key}: {stats[key]}")
    for name, count in stats.get("samples_per_split", {}).items():
        print(f"  samples[{name}]: {count}")
    return EXIT_OK


def cmd_build(args) -> int:
    out = _require_out(args.out, args.force)
    stats = build_dataset(args.images, args.reports, args.store, out,
                          section_mode=args.sections,
                          min_history=args.min_history,
                          delimiter=args.delimiter,
                          split_seed=args.split_seed)
    print(f"build: wrote dataset to {out}")
    order = ("image_rows", "report_rows", "merged_records",
             "dropped_image_rows", "dropped_report_rows", "subjects",
             "samples_prefilter", "duplicate_samples_removed",
             "blank_impression_anchors_removed", "samples_postfilter")
    for key in order:
        if key in stats:
            print(f"  {key}: {stats[key]}")
    for name, count in stats["samples_per_split"].items():
        subjects = stats["subjects_per_split"][name]
        print(f"  split[{name}]: {count} samples / {subjects} subjects")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    data_dir = args.data or cfg.get("data", {}).get("dir")
    if not data_dir:
        raise ConfigError("no dataset: pass --data or set [data] dir")
    dataset = load_dataset(data_dir)
    model_cfg = model_config_from(cfg, dataset.store.dim, dataset.labels)
    train_cfg = train_config_from(cfg)
    seeds = seeds_from(cfg, args.seeds)
    out = _require_out(args.out, args.force)
    train_run(out, dataset, model_cfg, train_cfg, seeds,
              config_echo=_echo_config(cfg), jobs=args.jobs)
    print(f"train: {len(seeds)} seed runs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    data_dir = args.data or cfg.get("data", {}).get("dir")
    if not data_dir:
        raise ConfigError("no dataset: pass --data or set [data] dir")
    dataset = load_dataset(data_dir)
    aggregate = evaluate_run(args.run, dataset, args.split, args.baseline)
    macro = aggregate["macro"]

    def show(value):
        return "n/a" if value is None else f"{value:.4f}"

    print(f"eval[{args.split}]: macro AUROC "
          f"{show(macro['auroc_mean'])} +/- {show(macro['auroc_std'])}, "
          f"macro AUPRC {show(macro['auprc_mean'])} +/- {show(macro['auprc_std'])}")
    if "p_vs_baseline" in aggregate:
        print(f"  p vs baseline: {aggregate['p_vs_baseline']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    data_dir = args.data or cfg.get("data", {}).get("dir")
    if not data_dir:
        raise ConfigError("no dataset: pass --data or set [data] dir")
    dataset = load_dataset(data_dir)
    model_cfg = model_config_from(cfg, dataset.store.dim, dataset.labels)
    train_cfg = train_config_from(cfg)
    seeds = seeds_from(cfg, args.seeds)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    out = _require_out(args.out, args.force)
    grid = ablate_run(out, dataset, model_cfg, train_cfg, args.axis, values,
                      seeds, split=args.split, config_echo=_echo_config(cfg),
                      jobs=args.jobs)
    print(f"ablate[{args.axis}]: {len(grid['rows'])} x {len(seeds)} cells")
    for row in grid["rows"]:
        mean = row["auroc_mean"]
        shown = "nan" if mean is None else f"{mean:.4f}"
        print(f"  {args.axis}={row['value']}: AUROC {shown} "
              f"(delta {row['delta_vs_baseline']})")
    return EXIT_OK


def cmd_report(args) -> int:
    runs = [Path(p) for p in args.runs]
    summary = emit_reports(runs, args.out, args.split)
    print(f"report: tables {summary['tables']} in {args.out}")
    if summary["partial"]:
        print(f"  PARTIAL: missing runs {summary['missing_runs']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chronomodal",
        description="Longitudinal multi-modal diagnosis experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=300)
    p.add_argument("--min-visits", type=int, default=1)
    p.add_argument("--max-visits", type=int, default=6)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--label-count", type=int, default=4)
    p.add_argument("--signal", choices=SIGNAL_MODES,
                   default="history_text_recent")
    p.add_argument("--signal-strength", type=float, default=2.5)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--recency-halflife-days", type=float, default=14.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="construct a dataset from tables + store")
    p.add_argument("--images", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sections", choices=SECTION_MODES, default="impression")
    p.add_argument("--min-history", type=int, default=0)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="train one run per seed")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run's checkpoints")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--data")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--baseline", help="run directory to test against")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis, seeds crossed")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--data")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--seeds")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="emit tables and plot data from runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LeakageError as exc:
        print(f"data-integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ChronomodalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
