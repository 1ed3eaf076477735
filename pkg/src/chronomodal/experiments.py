"""Config-driven experiment orchestration: runs, evaluation, ablations.

A dataset directory holds manifest.jsonl, store.bin, splits.json, and
meta.json (label names plus stage counts). A run directory gets one
subdirectory per seed with the train log (JSON-lines, config echo as
the header line), the best checkpoint, and evaluation reports, plus an
aggregate with rank-sum p-values. Every artifact write is atomic
(temp + rename) and every emitted number is a pure function of
(config, seed, inputs).
"""

from __future__ import annotations

import configparser

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .metrics import (MetricReport, SubgroupKey, age_bin, compute_report,
                      seed_aggregate, subgroup_metrics)
from .model import DiagnosisModel, ModelConfig
from .pipeline import (assign_splits, build_samples, dedup_filter,
                       leakage_check, manifest_read, manifest_write,
                       merge_records, sort_samples, split_patients)
from .records import read_table, write_table
from .store import EmbeddingStore, embstore_read, embstore_write
from .synth import SyntheticSpec, records_to_tables, synth_cohort
from .training import (Checkpoint, TrainConfig, checkpoint_load,
                       checkpoint_save, fit, predict_scores)

ABLATION_AXES = ("num_reports", "time_window_days", "positional", "pooling",
                 "fusion", "sections", "modality_combo")

MODALITY_COMBOS = {
    "image_only": {"modalities": ("image",)},
    "text_only": {"modalities": ("text",)},
    "multimodal": {"modalities": ("image", "text")},
    "ensemble": {"modalities": ("image", "text"), "fusion": "ensemble"},
}


# ---------------------------------------------------------------------------
# atomic artifact writes
# ---------------------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# config files: INI sections, flag overrides win
# ---------------------------------------------------------------------------

def load_ini(path) -> dict:
    parser = configparser.ConfigParser()
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string(text)
    return {section: dict(parser.items(section)) for section in parser.sections()}


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """Apply "section.key=value" strings on top of the file values."""
    out = {section: dict(values) for section, values in cfg.items()}
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, "
                              f"got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        out.setdefault(section, {})[key.strip()] = value.strip()
    return out


def _coerce(raw: str, kind):
    raw = raw.strip()
    if raw == "":
        return None
    if kind is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return kind(raw)


def model_config_from(cfg: dict, store_dim: int, labels: Sequence[str]) -> ModelConfig:
    section = cfg.get("model", {})
    kwargs = {"store_dim": store_dim, "labels": tuple(labels)}
    int_keys = ("model_dim", "heads", "layers", "ff_dim", "k_images", "k_text",
                "vilt_layers", "mbt_layers", "mbt_fusion_layers",
                "mbt_bottleneck", "meter_layers", "concat_hidden",
                "block_rank", "block_core", "num_reports")
    float_keys = ("dropout", "rope_base", "position_scale", "time_window_days")
    str_keys = ("positional", "pooling", "fusion")
    for key, value in section.items():
        if key in int_keys:
            kwargs[key] = _coerce(value, int)
        elif key in float_keys:
            kwargs[key] = _coerce(value, float)
        elif key in str_keys:
            kwargs[key] = value.strip()
        elif key == "modalities":
            kwargs[key] = tuple(v.strip() for v in value.split(",") if v.strip())
        else:
            raise ConfigError(f"unknown [model] key {key!r}")
    kwargs = {k: v for k, v in kwargs.items()
              if not (v is None and k in int_keys + float_keys)}
    return ModelConfig(**kwargs)


def train_config_from(cfg: dict) -> TrainConfig:
    section = cfg.get("train", {})
    kwargs = {}
    int_keys = ("batch_size", "epochs", "seed")
    float_keys = ("peak_lr_encoder", "peak_lr_tst", "weight_decay",
                  "warmup_frac", "min_lr_ratio", "pos_weight")
    for key, value in section.items():
        if key in int_keys:
            kwargs[key] = _coerce(value, int)
        elif key in float_keys:
            kwargs[key] = _coerce(value, float)
        elif key == "betas":
            parts = [float(v) for v in value.split(",")]
            kwargs["betas"] = tuple(parts)
        else:
            raise ConfigError(f"unknown [train] key {key!r}")
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    return TrainConfig(**kwargs)


def seeds_from(cfg: dict, flag: Optional[str] = None) -> list:
    raw = flag if flag is not None else cfg.get("run", {}).get("seeds", "0,1,2,3,4")
    seeds = [int(v) for v in str(raw).split(",") if str(v).strip() != ""]
    if not seeds:
        raise ConfigError("seed list must be non-empty")
    return seeds


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list
    store: EmbeddingStore
    labels: list
    meta: dict = field(default_factory=dict)


def write_dataset(out_dir, samples, store, labels, meta: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_write(samples, out / "manifest.jsonl")
    embstore_write(store, out / "store.bin")
    splits = {"train": sorted({s.subject_id for s in samples if s.split == "train"}),
              "val": sorted({s.subject_id for s in samples if s.split == "val"}),
              "test": sorted({s.subject_id for s in samples if s.split == "test"})}
    atomic_write_json(out / "splits.json", splits)
    atomic_write_json(out / "meta.json", {"labels": list(labels), **meta})


def load_dataset(data_dir) -> Dataset:
    data = Path(data_dir)
    meta = read_json(data / "meta.json")
    labels = list(meta["labels"])
    samples = manifest_read(data / "manifest.jsonl", labels)
    store = embstore_read(data / "store.bin")
    for sample in samples:
        for key, _ in list(sample.history_reports) + list(sample.history_images):
            if key not in store:
                raise ContractError(f"manifest references missing embedding {key!r}")
        if sample.anchor.image_embedding_key and \
                sample.anchor.image_embedding_key not in store:
            raise ContractError(f"missing anchor embedding "
                                f"{sample.anchor.image_embedding_key!r}")
    return Dataset(samples, store, labels, meta)


def build_dataset(images_path, reports_path, store_path, out_dir, *,
                  section_mode: str = "impression", min_history: int = 0,
                  delimiter: str = ",", fractions=(0.8, 0.1, 0.1),
                  split_seed: int = 0) -> dict:
    """Full construction: merge, expand, filter, split, write. Returns counts."""
    images = read_table(images_path, delimiter)
    reports = read_table(reports_path, delimiter)
    header = list(reports[0].keys()) if reports else []
    base_cols = {"subject_id", "study_id", "chart_time", "text_embedding_key",
                 "history", "indication", "comparison", "findings", "impression"}
    labels = [c for c in header if c not in base_cols]
    if not labels:
        raise ConfigError(f"{reports_path}: no label columns found")
    stats: dict = {}
    records = merge_records(images, reports, labels, stats)
    samples = build_samples(records, min_history, stats)
    samples = dedup_filter(samples, records, section_mode, stats)
    samples = sort_samples(samples)
    split = split_patients([r.subject_id for r in records], fractions, split_seed)
    assign_splits(samples, split)
    leakage_check(samples)
    store = embstore_read(store_path)
    for sample in samples:
        for key, _ in sample.history_reports + sample.history_images:
            if key not in store:
                raise ContractError(f"history key {key!r} missing from store")
    stats["samples_per_split"] = {
        name: sum(1 for s in samples if s.split == name)
        for name in ("train", "val", "test")}
    stats["subjects_per_split"] = {
        name: len({s.subject_id for s in samples if s.split == name})
        for name in ("train", "val", "test")}
    stats["section_mode"] = section_mode
    stats["min_history"] = min_history
    write_dataset(out_dir, samples, store, labels, {"stage_counts": stats})
    return stats


def synth_dataset(spec: SyntheticSpec, seed: int, out_dir, *,
                  fractions=(0.8, 0.1, 0.1)) -> dict:
    """Generate a cohort and run it through the same pipeline stages."""
    records, store = synth_cohort(spec, seed)
    image_rows, report_rows = records_to_tables(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "images.csv", image_rows, list(image_rows[0].keys()))
    write_table(out / "reports.csv", report_rows, list(report_rows[0].keys()))
    stats: dict = {}
    samples = build_samples(records, 0, stats)
    samples = sort_samples(dedup_filter(samples, records, "impression", stats))
    split = split_patients([r.subject_id for r in records], fractions, seed)
    assign_splits(samples, split)
    leakage_check(samples)
    stats["samples_per_split"] = {
        name: sum(1 for s in samples if s.split == name)
        for name in ("train", "val", "test")}
    write_dataset(out_dir, samples, store, list(spec.labels),
                  {"stage_counts": stats, "synth_spec": spec.to_json_dict(),
                   "synth_seed": seed})
    return stats


# ---------------------------------------------------------------------------
# training runs and evaluation
# ---------------------------------------------------------------------------

def run_seed(out_dir, dataset: Dataset, model_cfg: ModelConfig,
             train_cfg: TrainConfig, seed: int, config_echo: str) -> Checkpoint:
    seed_dir = Path(out_dir) / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(**{**train_cfg.to_json_dict(), "seed": seed,
                        "betas": tuple(train_cfg.betas)})
    model = DiagnosisModel(model_cfg, seed=seed)
    ckpt, log = fit(model, dataset.samples, dataset.store, tc)
    ckpt.meta = {"model_config": model_cfg.to_json_dict(),
                 "train_config": tc.to_json_dict(),
                 "seed": seed, "config_echo": config_echo}
    lines = [json.dumps({"config_echo": config_echo,
                         "model_config": model_cfg.to_json_dict(),
                         "train_config": tc.to_json_dict()}, sort_keys=True)]
    lines += [json.dumps(entry, sort_keys=True) for entry in log]
    atomic_write_text(seed_dir / "train_log.jsonl", "\n".join(lines) + "\n")
    checkpoint_save(ckpt, seed_dir / "model.ckpt")
    return ckpt


def train_run(out_dir, dataset: Dataset, model_cfg: ModelConfig,
              train_cfg: TrainConfig, seeds: Sequence[int],
              config_echo: str = "", jobs: int = 1) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "run.json", {
        "seeds": list(seeds), "model_config": model_cfg.to_json_dict(),
        "train_config": train_cfg.to_json_dict()})
    if config_echo:
        atomic_write_text(out / "config.echo.ini", config_echo)
    if jobs <= 1:
        for seed in seeds:
            run_seed(out, dataset, model_cfg, train_cfg, seed, config_echo)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_seed, out, dataset, model_cfg, train_cfg,
                               seed, config_echo) for seed in seeds]
        for future in futures:
            future.result()


def _subgroup_key(sample) -> SubgroupKey:
    demo = sample.anchor.demographics
    return SubgroupKey(sex=demo.sex, age_bin=age_bin(demo.age_years),
                       race=demo.race)


def evaluate_checkpoint(ckpt: Checkpoint, dataset: Dataset,
                        split: str = "test") -> MetricReport:
    model_cfg = ModelConfig.from_json_dict(ckpt.meta["model_config"])
    if tuple(model_cfg.labels) != tuple(dataset.labels):
        raise ContractError(f"checkpoint labels {model_cfg.labels} != dataset "
                            f"labels {tuple(dataset.labels)}")
    model = DiagnosisModel(model_cfg, seed=int(ckpt.meta.get("seed", 0)))
    model.load_params(ckpt.params)
    subset = [s for s in dataset.samples if s.split == split]
    if not subset:
        raise ConfigError(f"no samples in split {split!r}")
    scores = predict_scores(model, subset, dataset.store)
    targets = np.asarray([s.label_targets for s in subset])
    report = compute_report(scores, targets, dataset.labels)
    report.subgroups = subgroup_metrics(subset, scores, _subgroup_key,
                                        targets, dataset.labels)
    return report


def evaluate_run(run_dir, dataset: Dataset, split: str = "test",
                 baseline_dir=None) -> dict:
    run = Path(run_dir)
    seeds = read_json(run / "run.json")["seeds"]
    reports = []
    for seed in seeds:
        ckpt = checkpoint_load(run / f"seed{seed}" / "model.ckpt")
        report = evaluate_checkpoint(ckpt, dataset, split)
        atomic_write_json(run / f"seed{seed}" / f"report.{split}.json",
                          report.to_json_dict())
        reports.append(report)
    baseline_reports = None
    if baseline_dir is not None:
        baseline_reports = load_run_reports(baseline_dir, split)
    aggregate = seed_aggregate(reports, baseline_reports)
    if baseline_dir is not None:
        aggregate["baseline"] = str(baseline_dir)
    atomic_write_json(run / f"aggregate.{split}.json", aggregate)
    return aggregate


def load_run_reports(run_dir, split: str = "test") -> list:
    run = Path(run_dir)
    seeds = read_json(run / "run.json")["seeds"]
    reports = []
    for seed in seeds:
        path = run / f"seed{seed}" / f"report.{split}.json"
        if not path.exists():
            raise ContractError(f"missing report {path}; evaluate that run first")
        reports.append(MetricReport.from_json_dict(read_json(path)))
    return reports


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

def _apply_axis(model_cfg: ModelConfig, axis: str, value) -> ModelConfig:
    base = model_cfg.to_json_dict()
    base.pop("norm_placement", None)
    base.pop("activation", None)
    if axis == "num_reports":
        base["num_reports"] = int(value)
    elif axis == "time_window_days":
        base["time_window_days"] = None if value in ("inf", None) else float(value)
    elif axis == "positional":
        base["positional"] = str(value)
    elif axis == "pooling":
        base["pooling"] = str(value)
    elif axis == "fusion":
        base["fusion"] = str(value)
    elif axis == "modality_combo":
        if value not in MODALITY_COMBOS:
            raise ConfigError(f"modality_combo must be one of "
                              f"{sorted(MODALITY_COMBOS)}, got {value!r}")
        base.update({k: v for k, v in MODALITY_COMBOS[value].items()})
    else:
        raise ConfigError(f"axis {axis!r} not handled here")
    base["labels"] = tuple(base["labels"])
    base["modalities"] = tuple(base["modalities"])
    return ModelConfig(**base)


def ablate_run(out_dir, dataset: Dataset, model_cfg: ModelConfig,
               train_cfg: TrainConfig, axis: str, values: Sequence,
               seeds: Sequence[int], split: str = "test",
               config_echo: str = "", jobs: int = 1) -> dict:
    """Cross-product (axis value x seed), everything else held fixed.

    The first value is the grid's baseline for the delta column. A cell
    whose samples all lose their history at some value is recorded as
    degenerate rather than aborting the grid.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    if axis == "sections":
        raise ConfigError("the sections axis re-runs dataset construction; "
                          "build one dataset per section mode and compare runs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    baseline_macro = None
    for value in values:
        cell_dir = out / f"value_{value}"
        cell_cfg = _apply_axis(model_cfg, axis, value)
        degenerate = _cell_degenerate(dataset, cell_cfg)
        train_run(cell_dir, dataset, cell_cfg, train_cfg, seeds, config_echo,
                  jobs)
        aggregate = evaluate_run(cell_dir, dataset, split)
        mean = aggregate["macro"]["auroc_mean"]
        row = {"value": value, "auroc_mean": mean,
               "auroc_std": aggregate["macro"]["auroc_std"],
               "auprc_mean": aggregate["macro"]["auprc_mean"],
               "auprc_std": aggregate["macro"]["auprc_std"],
               "n_seeds": len(seeds), "degenerate": degenerate}
        if baseline_macro is None:
            baseline_macro = mean
            row["delta_vs_baseline"] = 0.0
        else:
            row["delta_vs_baseline"] = (None if mean is None
                                        else mean - baseline_macro)
        rows.append(row)
    grid = {"axis": axis, "values": list(values), "seeds": list(seeds),
            "split": split, "rows": rows}
    atomic_write_json(out / "grid.json", grid)
    return grid


def _cell_degenerate(dataset: Dataset, cfg: ModelConfig) -> bool:
    """True when the axis value empties every sample's report history."""
    from .model import filter_history
    any_left = any(filter_history(s.history_reports, cfg.num_reports,
                                  cfg.time_window_days)
                   for s in dataset.samples)
    any_had = any(s.history_reports for s in dataset.samples)
    return any_had and not any_left


# ---------------------------------------------------------------------------
# report emission: delimiter-separated tables + plot-data series
# ---------------------------------------------------------------------------

def emit_reports(run_dirs: Sequence, out_dir, split: str = "test") -> dict:
    """Tables and plot series derived purely from run artifacts on disk."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    missing = []
    per_label_rows = []
    subgroup_rows = []
    series = []
    macro = {}
    for run_dir in run_dirs:
        run = Path(run_dir)
        name = run.name
        grid_path = run / "grid.json"
        if grid_path.exists():
            grid = read_json(grid_path)
            points = sorted(
                (row for row in grid["rows"]),
                key=lambda r: (float(r["value"])
                               if str(r["value"]).replace(".", "", 1)
                               .replace("-", "", 1).isdigit() else 0.0))
            series.append({"run": name, "axis": grid["axis"],
                           "points": [{"value": p["value"],
                                       "auroc_mean": p["auroc_mean"],
                                       "auroc_std": p["auroc_std"],
                                       "delta_vs_baseline": p.get(
                                           "delta_vs_baseline")}
                                      for p in points]})
            continue
        agg_path = run / f"aggregate.{split}.json"
        if not agg_path.exists():
            missing.append(str(run))
            continue
        agg = read_json(agg_path)
        macro[name] = agg["macro"]
        for label in agg["labels"]:
            stats = agg["per_label"][label]
            per_label_rows.append({
                "label": label, "model": name,
                "auroc": _fmt(stats["auroc_mean"]),
                "auroc_std": _fmt(stats["auroc_std"]),
                "auprc": _fmt(stats["auprc_mean"]),
                "auprc_std": _fmt(stats["auprc_std"])})
        reports = load_run_reports(run, split)
        cells: dict = {}
        for report in reports:
            for axis, by_cell in report.subgroups.items():
                for cell, stats in by_cell.items():
                    slot = cells.setdefault((axis, cell), {"auroc": [],
                                                           "count": stats["count"]})
                    if stats["macro_auroc"] is not None:
                        slot["auroc"].append(stats["macro_auroc"])
        for (axis, cell), slot in sorted(cells.items()):
            vals = slot["auroc"]
            subgroup_rows.append({
                "model": name, "axis": axis, "cell": cell,
                "count": slot["count"],
                "auroc_mean": _fmt(float(np.mean(vals)) if vals else None),
                "auroc_std": _fmt(float(np.std(vals, ddof=1))
                                  if len(vals) > 1 else 0.0 if vals else None)})
    if per_label_rows:
        write_table(out / "per_label_table.csv", per_label_rows,
                    ["label", "model", "auroc", "auroc_std", "auprc",
                     "auprc_std"])
    if subgroup_rows:
        write_table(out / "subgroup_table.csv", subgroup_rows,
                    ["model", "axis", "cell", "count", "auroc_mean",
                     "auroc_std"])
    if series:
        atomic_write_json(out / "ablation_series.json", series)
    comparison = None
    if len(macro) >= 2:
        names = sorted(macro)
        base = macro[names[0]]
        comparison = []
        for name in names:
            entry = {"model": name,
                     "auroc_mean": _fmt(macro[name]["auroc_mean"]),
                     "delta_auroc": _fmt(
                         None if macro[name]["auroc_mean"] is None
                         or base["auroc_mean"] is None
                         else macro[name]["auroc_mean"] - base["auroc_mean"])}
            comparison.append(entry)
        write_table(out / "model_comparison.csv", comparison,
                    ["model", "auroc_mean", "delta_auroc"])
    summary = {"partial": bool(missing), "missing_runs": missing,
               "tables": sorted(p.name for p in out.glob("*.csv")),
               "series": bool(series)}
    atomic_write_json(out / "report_summary.json", summary)
    return summary


def _fmt(value):
    return "" if value is None else f"{value:.6f}"
