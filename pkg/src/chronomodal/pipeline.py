"""Longitudinal cohort construction.

Five stages: inner-join the image and report tables, drop the anchor
timestamp's own report from every history, expand each subject's
timeline into one sample per anchor timestamp, remove duplicates and
blank-impression entries, and split by subject so no patient straddles
train/val/test. A leakage check (no history at or after the anchor
time) runs on every manifest written or read; violations are hard
failures.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, LeakageError
from .records import (Demographics, StudyRecord, TemporalSample, _parse_int,
                      binarize_labels, compose_report_text)

SECONDS_PER_HOUR = 3600.0


@dataclass
class CohortSplit:
    train: set
    val: set
    test: set

    def assign(self, subject_id: str) -> str:
        if subject_id in self.train:
            return "train"
        if subject_id in self.val:
            return "val"
        if subject_id in self.test:
            return "test"
        raise ContractError(f"subject {subject_id!r} not in any split")

    def to_json_dict(self) -> dict:
        return {"train": sorted(self.train), "val": sorted(self.val),
                "test": sorted(self.test)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "CohortSplit":
        return cls(set(d["train"]), set(d["val"]), set(d["test"]))


def merge_records(images: Sequence[dict], reports: Sequence[dict],
                  label_names: Sequence[str],
                  stats: Optional[dict] = None) -> list:
    """Inner-join the two tables on (subject_id, study_id).

    Rows lacking a partner in the other table are dropped and counted.
    Duplicate (subject, study) pairs join multiplicatively and survive
    until dedup_filter.
    """
    stats = stats if stats is not None else {}
    by_key: dict = {}
    for row in reports:
        by_key.setdefault((row["subject_id"], row["study_id"]), []).append(row)
    used_reports: set = set()
    records = []
    dropped_images = 0
    for lineno, img in enumerate(images, start=2):
        key = (img["subject_id"], img["study_id"])
        partners = by_key.get(key, [])
        if not partners:
            dropped_images += 1
            continue
        for rep in partners:
            used_reports.add(id(rep))
            sections = {name: (rep.get(name) or None)
                        for name in ("history", "indication", "comparison",
                                     "findings", "impression")}
            labels = {}
            for name in label_names:
                if name not in rep:
                    raise ContractError(f"report table missing label column {name!r}")
                labels[name] = rep[name]
            records.append(StudyRecord(
                subject_id=img["subject_id"],
                study_id=img["study_id"],
                chart_time=_parse_int(img["chart_time"], "images", lineno, "chart_time"),
                image_embedding_key=img.get("image_embedding_key") or None,
                text_embedding_key=rep.get("text_embedding_key") or None,
                sections=sections,
                labels=labels,
                demographics=Demographics(
                    sex=img["sex"],
                    age_years=_parse_int(img["age_years"], "images", lineno, "age_years"),
                    race=img["race"]),
            ))
    dropped_reports = sum(1 for row in reports if id(row) not in used_reports)
    stats["image_rows"] = len(images)
    stats["report_rows"] = len(reports)
    stats["merged_records"] = len(records)
    stats["dropped_image_rows"] = dropped_images
    stats["dropped_report_rows"] = dropped_reports
    if dropped_images or dropped_reports:
        warnings.warn(f"merge dropped {dropped_images} image rows and "
                      f"{dropped_reports} report rows without a join partner")
    return records


def build_samples(records: Sequence[StudyRecord], min_history: int = 0,
                  stats: Optional[dict] = None) -> list:
    """One sample per anchor timestamp, history strictly earlier.

    Per subject, timestamps t1 < ... < tn yield one sample per anchor
    tk whose history is every earlier study's report (and image);
    offsets are anchor time minus history time, in hours. Ties on
    chart_time are broken deterministically by study_id with a warning.
    """
    stats = stats if stats is not None else {}
    by_subject: dict = {}
    for rec in records:
        by_subject.setdefault(rec.subject_id, []).append(rec)
    samples = []
    tie_warnings = 0
    for subject_id in sorted(by_subject):
        recs = sorted(by_subject[subject_id],
                      key=lambda r: (r.chart_time, r.study_id))
        times = [r.chart_time for r in recs]
        if len(set(times)) != len(times):
            tie_warnings += 1
        for k, anchor in enumerate(recs):
            history_reports = []
            history_images = []
            for prior in recs[:k]:
                if prior.chart_time >= anchor.chart_time:
                    continue  # equal-time study is its own anchor, never history
                offset = (anchor.chart_time - prior.chart_time) / SECONDS_PER_HOUR
                if prior.text_embedding_key:
                    history_reports.append((prior.text_embedding_key, offset))
                if prior.image_embedding_key:
                    history_images.append((prior.image_embedding_key, offset))
            if len(history_reports) < min_history:
                continue
            samples.append(TemporalSample(
                subject_id=subject_id,
                anchor=anchor,
                history_reports=history_reports,
                history_images=history_images,
                label_targets=binarize_labels(anchor.labels, list(anchor.labels)),
            ))
    if tie_warnings:
        warnings.warn(f"{tie_warnings} subjects had tied chart_times; "
                      f"tiebreak by study_id")
    stats["subjects"] = len(by_subject)
    stats["samples_prefilter"] = len(samples)
    stats["tie_warnings"] = tie_warnings
    return samples


def dedup_filter(samples: Sequence[TemporalSample],
                 records: Sequence[StudyRecord],
                 section_mode: str = "impression",
                 stats: Optional[dict] = None) -> list:
    """Remove duplicates and blank-impression entries.

    Duplicate anchors (same subject and study) collapse to one sample;
    exact-duplicate (key, offset) history entries collapse to one.
    History reports whose impression is blank are dropped, as are
    reports missing the sections the section mode requires; anchors
    with a blank impression drop the whole sample.
    """
    stats = stats if stats is not None else {}
    section_of: dict = {}
    for rec in records:
        if rec.text_embedding_key:
            section_of.setdefault(rec.text_embedding_key, rec.sections)
    kept = []
    seen_anchors = set()
    dup_samples = dup_entries = blank_history = blank_anchors = section_skips = 0
    for sample in samples:
        anchor_key = (sample.subject_id, sample.anchor.study_id,
                      sample.anchor.chart_time)
        if anchor_key in seen_anchors:
            dup_samples += 1
            continue
        seen_anchors.add(anchor_key)
        if sample.anchor.impression_blank():
            blank_anchors += 1
            continue
        new_reports = []
        seen_entries = set()
        for key, offset in sample.history_reports:
            if (key, offset) in seen_entries:
                dup_entries += 1
                continue
            seen_entries.add((key, offset))
            sections = section_of.get(key, {})
            impression = sections.get("impression")
            if impression is None or not impression.strip():
                blank_history += 1
                continue
            if compose_report_text(sections, section_mode) is None:
                section_skips += 1
                continue
            new_reports.append((key, offset))
        new_images = []
        seen_img = set()
        for key, offset in sample.history_images:
            if (key, offset) in seen_img:
                dup_entries += 1
                continue
            seen_img.add((key, offset))
            new_images.append((key, offset))
        kept.append(TemporalSample(
            subject_id=sample.subject_id, anchor=sample.anchor,
            history_reports=new_reports, history_images=new_images,
            label_targets=list(sample.label_targets), split=sample.split))
    stats["duplicate_samples_removed"] = dup_samples
    stats["duplicate_entries_removed"] = dup_entries
    stats["blank_impression_history_removed"] = blank_history
    stats["blank_impression_anchors_removed"] = blank_anchors
    stats["section_mode_skips"] = section_skips
    stats["samples_postfilter"] = len(kept)
    return kept


def split_patients(subjects: Sequence[str],
                   fractions: tuple = (0.8, 0.1, 0.1),
                   seed: int = 0) -> CohortSplit:
    """Shuffle subjects with a seeded PRNG and cut by cumulative fraction.

    Splitting is by subject count, never by sample count, so every
    sample of a subject inherits one split.
    """
    unique = sorted(set(subjects))
    if len(unique) < 3:
        raise ConfigError(f"need at least 3 subjects to split, got {len(unique)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    order = [unique[i] for i in rng.permutation(len(unique))]
    n = len(order)
    cut1 = int(np.floor(n * fractions[0]))
    cut2 = int(np.floor(n * (fractions[0] + fractions[1])))
    return CohortSplit(train=set(order[:cut1]), val=set(order[cut1:cut2]),
                       test=set(order[cut2:]))


def assign_splits(samples: Sequence[TemporalSample], split: CohortSplit) -> None:
    for sample in samples:
        sample.split = split.assign(sample.subject_id)


def sort_samples(samples: list) -> list:
    """Canonical ordering regardless of construction order."""
    return sorted(samples, key=lambda s: (s.subject_id, s.anchor.chart_time,
                                          s.anchor.study_id))


def leakage_check(samples: Sequence[TemporalSample]) -> None:
    """Hard guard: every history item sits strictly before its anchor."""
    for sample in samples:
        for key, offset in list(sample.history_reports) + list(sample.history_images):
            if offset <= 0:
                raise LeakageError(
                    f"subject {sample.subject_id} anchor {sample.anchor.study_id}: "
                    f"history item {key!r} has non-positive offset {offset}")


# ---------------------------------------------------------------------------
# manifest serialization (JSON-lines, one record per sample)
# ---------------------------------------------------------------------------

def sample_to_json_dict(sample: TemporalSample) -> dict:
    return {
        "subject_id": sample.subject_id,
        "anchor_study_id": sample.anchor.study_id,
        "anchor_chart_time": sample.anchor.chart_time,
        "image_key": sample.anchor.image_embedding_key,
        "history_reports": [[k, o] for k, o in sample.history_reports],
        "history_images": [[k, o] for k, o in sample.history_images],
        "label_targets": list(sample.label_targets),
        "demographics": sample.anchor.demographics.to_json_dict(),
        "split": sample.split,
    }


def sample_from_json_dict(d: dict, label_names: Sequence[str]) -> TemporalSample:
    anchor = StudyRecord(
        subject_id=d["subject_id"], study_id=d["anchor_study_id"],
        chart_time=int(d["anchor_chart_time"]),
        image_embedding_key=d["image_key"], text_embedding_key=None,
        sections={}, labels={},
        demographics=Demographics.from_json_dict(d["demographics"]))
    if len(d["label_targets"]) != len(label_names):
        raise ContractError(f"manifest row has {len(d['label_targets'])} targets, "
                            f"expected {len(label_names)}")
    return TemporalSample(
        subject_id=d["subject_id"], anchor=anchor,
        history_reports=[(k, float(o)) for k, o in d["history_reports"]],
        history_images=[(k, float(o)) for k, o in d["history_images"]],
        label_targets=[int(v) for v in d["label_targets"]],
        split=d.get("split"))


def manifest_write(samples: Sequence[TemporalSample], path) -> None:
    leakage_check(samples)
    with open(path, "w", encoding="utf-8") as handle:
        for sample in samples:
            handle.write(json.dumps(sample_to_json_dict(sample), sort_keys=True))
            handle.write("\n")


def manifest_read(path, label_names: Sequence[str]) -> list:
    samples = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(sample_from_json_dict(json.loads(line), label_names))
            except (KeyError, ValueError) as exc:
                raise ContractError(f"{path}:{lineno}: malformed manifest row "
                                    f"({exc})") from exc
    leakage_check(samples)
    return samples
