"""Rank-based evaluation metrics and seed-level significance tests.

AUROC uses the rank-sum formulation with midranks for ties; AUPRC is
average precision with tied scores collapsed into threshold blocks
(each block contributes its positives times the precision at the block
boundary). The one-tailed rank-sum test enumerates rank assignments
exactly for small samples and falls back to a tie- and continuity-
corrected normal approximation for larger ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, UndefinedMetricError

AGE_BINS = ("<40", "40-60", "60-80", ">80")
SUBGROUP_AXES = ("sex", "age", "race")

EXACT_RANKSUM_LIMIT = 12  # enumerate when n + m is at most this


@dataclass
class ScoreSet:
    scores: list[float]
    labels: list[int]

    def __post_init__(self):
        if len(self.scores) != len(self.labels):
            raise ContractError(f"{len(self.scores)} scores vs {len(self.labels)} labels")
        if any(l not in (0, 1) for l in self.labels):
            raise ContractError("labels must be 0 or 1")


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="mergesort")
    ranks = np.empty(arr.size, dtype=np.float64)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(s: ScoreSet) -> float:
    """Probability a random positive outranks a random negative."""
    labels = np.asarray(s.labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC undefined with {n_pos} positives / {n_neg} negatives")
    ranks = midranks(s.scores)
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(s: ScoreSet) -> float:
    """Average precision with tied scores handled as one threshold block."""
    labels = np.asarray(s.labels)
    scores = np.asarray(s.scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        block_pos = int(sorted_labels[i:j + 1].sum())
        tp += block_pos
        seen = j + 1
        if block_pos:
            ap += block_pos * (tp / seen)
        i = j + 1
    return float(ap / n_pos)


def wilcoxon_one_tailed(x: Sequence[float], y: Sequence[float],
                        alternative: str = "greater",
                        method: str = "auto") -> float:
    """Rank-sum p-value for the hypothesis that y tends greater than x.

    Under method="auto", exact enumeration over rank assignments runs
    when n + m <= 12 and a normal approximation with tie correction and
    continuity correction takes over beyond that; method="exact" or
    "normal" forces one path. Identical groups carry no evidence and
    return 1.0.
    """
    if alternative != "greater":
        raise ContractError(f"only alternative='greater' is supported, got {alternative!r}")
    if method not in ("auto", "exact", "normal"):
        raise ContractError(f"method must be auto/exact/normal, got {method!r}")
    x = list(x)
    y = list(y)
    if not x or not y:
        raise ContractError("both samples must be non-empty")
    n, m = len(x), len(y)
    pooled = np.asarray(x + y, dtype=np.float64)
    ranks = midranks(pooled)
    observed = float(ranks[n:].sum())
    total_n = n + m
    use_exact = (method == "exact"
                 or (method == "auto" and total_n <= EXACT_RANKSUM_LIMIT))
    if use_exact:
        hits = 0
        count = 0
        for combo in combinations(range(total_n), m):
            count += 1
            if ranks[list(combo)].sum() >= observed - 1e-9:
                hits += 1
        return hits / count
    mean = m * (total_n + 1) / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum())
    variance = (n * m / 12.0) * ((total_n + 1)
                                 - tie_term / (total_n * (total_n - 1)))
    if variance <= 0.0:
        return 1.0
    z = (observed - mean - 0.5) / math.sqrt(variance)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def spearman_rank(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman correlation via Pearson on midranks."""
    rx = midranks(x)
    ry = midranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# per-label and subgroup reports
# ---------------------------------------------------------------------------

def age_bin(age_years: float) -> str:
    """Left-closed bins: [0,40), [40,60), [60,80), [80,inf)."""
    if age_years < 40:
        return "<40"
    if age_years < 60:
        return "40-60"
    if age_years < 80:
        return "60-80"
    return ">80"


@dataclass
class SubgroupKey:
    sex: str
    age_bin: str
    race: str


@dataclass
class MetricReport:
    """Per-label and macro AUROC/AUPRC with optional subgroup slices."""

    labels: tuple
    per_label: dict
    macro_auroc: Optional[float]
    macro_auprc: Optional[float]
    skipped_auroc: list
    skipped_auprc: list
    n_samples: int
    subgroups: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "per_label": self.per_label,
            "macro_auroc": self.macro_auroc,
            "macro_auprc": self.macro_auprc,
            "skipped_auroc": list(self.skipped_auroc),
            "skipped_auprc": list(self.skipped_auprc),
            "n_samples": self.n_samples,
            "subgroups": self.subgroups,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricReport":
        return cls(labels=tuple(d["labels"]), per_label=d["per_label"],
                   macro_auroc=d["macro_auroc"], macro_auprc=d["macro_auprc"],
                   skipped_auroc=list(d["skipped_auroc"]),
                   skipped_auprc=list(d["skipped_auprc"]),
                   n_samples=d["n_samples"], subgroups=d.get("subgroups", {}))


def _score_labels(scores: np.ndarray, targets: np.ndarray, labels: Sequence[str]):
    per_label = {}
    aurocs, auprcs = [], []
    skipped_roc, skipped_pr = [], []
    for idx, name in enumerate(labels):
        col = ScoreSet(list(scores[:, idx]), [int(v) for v in targets[:, idx]])
        entry = {"n_pos": int(sum(col.labels)),
                 "n_neg": int(len(col.labels) - sum(col.labels))}
        try:
            entry["auroc"] = auroc(col)
            aurocs.append(entry["auroc"])
        except UndefinedMetricError:
            entry["auroc"] = None
            skipped_roc.append(name)
        try:
            entry["auprc"] = auprc(col)
            auprcs.append(entry["auprc"])
        except UndefinedMetricError:
            entry["auprc"] = None
            skipped_pr.append(name)
        per_label[name] = entry
    macro_roc = float(np.mean(aurocs)) if aurocs else None
    macro_pr = float(np.mean(auprcs)) if auprcs else None
    return per_label, macro_roc, macro_pr, skipped_roc, skipped_pr


def compute_report(scores: np.ndarray, targets: np.ndarray,
                   labels: Sequence[str]) -> MetricReport:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.shape[1] != len(labels):
        raise ContractError(f"scores {scores.shape}, targets {targets.shape}, "
                            f"{len(labels)} labels")
    per_label, macro_roc, macro_pr, sk_roc, sk_pr = _score_labels(scores, targets, labels)
    return MetricReport(tuple(labels), per_label, macro_roc, macro_pr,
                        sk_roc, sk_pr, scores.shape[0])


def subgroup_metrics(samples: Sequence, scores: np.ndarray,
                     key_extractor: Callable[[object], SubgroupKey],
                     targets: np.ndarray, labels: Sequence[str]) -> dict:
    """Metrics within each demographic cell, absent cells reported with counts.

    Returns {axis: {cell: {"macro_auroc", "macro_auprc", "count", skips}}}
    for the sex / age-bin / race axes; a cell where every label is
    single-class appears with metrics None rather than failing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    keys = [key_extractor(s) for s in samples]
    axes = {"sex": [k.sex for k in keys],
            "age": [k.age_bin for k in keys],
            "race": [k.race for k in keys]}
    out = {}
    for axis, values in axes.items():
        cells = {}
        for cell in sorted(set(values)):
            idx = [i for i, v in enumerate(values) if v == cell]
            sub_scores = scores[idx]
            sub_targets = targets[idx]
            per_label, macro_roc, macro_pr, sk_roc, sk_pr = _score_labels(
                sub_scores, sub_targets, labels)
            cells[cell] = {"count": len(idx),
                           "macro_auroc": macro_roc,
                           "macro_auprc": macro_pr,
                           "skipped_auroc": sk_roc,
                           "skipped_auprc": sk_pr}
        out[axis] = cells
    return out


def seed_aggregate(per_seed_reports: Sequence[MetricReport],
                   baseline_reports: Optional[Sequence[MetricReport]] = None) -> dict:
    """Mean +/- sample std across seeds, with rank-sum p-values vs baseline.

    The p-value tests whether the aggregated model's macro metric tends
    greater than the baseline's across seeds.
    """
    reports = list(per_seed_reports)
    if not reports:
        raise ContractError("need at least one report")
    labels = reports[0].labels
    for rep in reports:
        if rep.labels != labels:
            raise ContractError(f"label sets differ: {rep.labels} vs {labels}")

    def mean_std(values: list) -> tuple:
        # sorted so the result is exactly invariant to seed order
        vals = sorted(v for v in values if v is not None)
        if not vals:
            return None, None, 0
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return mean, std, len(vals)

    per_label = {}
    for name in labels:
        roc_mean, roc_std, roc_n = mean_std([r.per_label[name]["auroc"] for r in reports])
        pr_mean, pr_std, pr_n = mean_std([r.per_label[name]["auprc"] for r in reports])
        per_label[name] = {"auroc_mean": roc_mean, "auroc_std": roc_std,
                           "auprc_mean": pr_mean, "auprc_std": pr_std,
                           "n_seeds_defined": roc_n}
    macro_roc = [r.macro_auroc for r in reports]
    macro_pr = [r.macro_auprc for r in reports]
    roc_mean, roc_std, _ = mean_std(macro_roc)
    pr_mean, pr_std, _ = mean_std(macro_pr)
    agg = {"labels": list(labels), "n_seeds": len(reports),
           "per_label": per_label,
           "macro": {"auroc_mean": roc_mean, "auroc_std": roc_std,
                     "auprc_mean": pr_mean, "auprc_std": pr_std},
           "macro_values": {"auroc": macro_roc, "auprc": macro_pr}}
    if baseline_reports is not None:
        base = list(baseline_reports)
        p_values = {}
        for metric, values in (("auroc", macro_roc), ("auprc", macro_pr)):
            base_vals = [getattr(r, f"macro_{metric}") for r in base]
            if all(v is not None for v in values + base_vals):
                p_values[metric] = wilcoxon_one_tailed(base_vals, values)
            else:
                p_values[metric] = None
        agg["p_vs_baseline"] = p_values
    return agg
