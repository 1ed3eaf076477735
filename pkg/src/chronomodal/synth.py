"""Seeded synthetic cohorts with plantable label signal.

Each generator mode hides the label-bearing signal in a designated
modality and time window so desk-scale experiments can demonstrate a
specific effect:

* current_image_only   -- per-visit label readable from the current scan
* history_text_recent  -- chronic per-subject label written into every
                          report; scans are pure noise
* history_text_stale   -- the condition flips ~30 days before each
                          subject's latest visit, so reports older than
                          the window carry contradicted findings
* cross_modal_xor      -- label is the XOR of an image bit and a text
                          bit; neither modality alone is informative
* history_trend        -- label reflects whether a latent severity walk
                          is recently above its historical average,
                          visible only through time-aware pooling

Generation is deterministic per (spec, seed): same inputs produce
byte-identical embedding stores and tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .records import DEFAULT_LABELS, Demographics, StudyRecord
from .store import MODALITY_IMAGE, MODALITY_TEXT, EmbeddingStore

SIGNAL_MODES = ("current_image_only", "history_text_recent",
                "history_text_stale", "cross_modal_xor", "history_trend")

HOURS_PER_DAY = 24.0
BASE_EPOCH = 1_500_000_000  # arbitrary positive anchor for chart times

SEX_CHOICES = ("F", "M")
SEX_WEIGHTS = (0.42, 0.58)
RACE_CHOICES = ("White", "Black", "Asian", "Other")
RACE_WEIGHTS = (0.661, 0.118, 0.033, 0.188)
AGE_BIN_EDGES = ((18, 40), (40, 60), (60, 80), (80, 95))
AGE_BIN_WEIGHTS = (0.096, 0.296, 0.464, 0.144)


@dataclass
class SyntheticSpec:
    n_subjects: int = 300
    min_visits: int = 1
    max_visits: int = 6
    dim: int = 32
    label_count: int = 4
    signal: str = "history_text_recent"
    signal_strength: float = 2.5
    noise: float = 1.0
    recency_halflife_days: float = 14.0
    stale_flip_days: float = 30.0       # condition change this long before last visit
    gap_days_lo: float = 1.0
    gap_days_hi: float = 10.0
    stale_jump_lo: float = 40.0         # old-cluster gaps for the stale mode
    stale_jump_hi: float = 120.0
    labels: tuple = field(default=())

    def __post_init__(self):
        if self.signal not in SIGNAL_MODES:
            raise ConfigError(f"signal must be one of {SIGNAL_MODES}, "
                              f"got {self.signal!r}")
        if self.n_subjects < 1 or self.min_visits < 1 or self.max_visits < self.min_visits:
            raise ConfigError("invalid subject/visit counts")
        if self.dim < 2 or self.label_count < 1:
            raise ConfigError("dim must be >= 2 and label_count >= 1")
        if not self.labels:
            base = list(DEFAULT_LABELS)
            while len(base) < self.label_count:
                base.append(f"Synthetic Finding {len(base)}")
            self.labels = tuple(base[:self.label_count])
        elif len(self.labels) != self.label_count:
            raise ConfigError(f"{len(self.labels)} label names for "
                              f"label_count={self.label_count}")

    def to_json_dict(self) -> dict:
        return {"n_subjects": self.n_subjects, "min_visits": self.min_visits,
                "max_visits": self.max_visits, "dim": self.dim,
                "label_count": self.label_count, "signal": self.signal,
                "signal_strength": self.signal_strength, "noise": self.noise,
                "recency_halflife_days": self.recency_halflife_days,
                "stale_flip_days": self.stale_flip_days,
                "gap_days_lo": self.gap_days_lo, "gap_days_hi": self.gap_days_hi,
                "stale_jump_lo": self.stale_jump_lo,
                "stale_jump_hi": self.stale_jump_hi,
                "labels": list(self.labels)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["labels"] = tuple(d.get("labels", ()))
        return cls(**d)


def _sample_demographics(rng: np.random.Generator) -> Demographics:
    sex = SEX_CHOICES[rng.choice(len(SEX_CHOICES), p=SEX_WEIGHTS)]
    race = RACE_CHOICES[rng.choice(len(RACE_CHOICES), p=RACE_WEIGHTS)]
    bin_idx = rng.choice(len(AGE_BIN_EDGES), p=AGE_BIN_WEIGHTS)
    lo, hi = AGE_BIN_EDGES[bin_idx]
    return Demographics(sex=sex, age_years=int(rng.integers(lo, hi)), race=race)


def _visit_offsets_days(rng: np.random.Generator, n_visits: int,
                        spec: SyntheticSpec) -> np.ndarray:
    """Days before the final visit, oldest first, final visit at 0."""
    gaps = []
    for _ in range(n_visits - 1):
        if spec.signal == "history_text_stale" and rng.random() < 0.5:
            gaps.append(rng.uniform(spec.stale_jump_lo, spec.stale_jump_hi))
        else:
            gaps.append(rng.uniform(spec.gap_days_lo, spec.gap_days_hi))
    offsets = np.concatenate([np.cumsum(gaps[::-1])[::-1], [0.0]]) if gaps else np.zeros(1)
    return offsets


def _subject_labels(rng: np.random.Generator, spec: SyntheticSpec,
                    offsets_days: np.ndarray) -> tuple:
    """Per-visit binary labels plus the latent values driving embeddings.

    Returns (labels[v, l], image_latent[v, l], text_latent[v, l]) where
    the latents are the +/-1 (or real-valued) signals each modality's
    embedding at that visit carries.
    """
    n_visits = offsets_days.size
    n_labels = spec.label_count
    labels = np.zeros((n_visits, n_labels), dtype=int)
    image_latent = np.zeros((n_visits, n_labels))
    text_latent = np.zeros((n_visits, n_labels))
    if spec.signal == "current_image_only":
        labels = rng.integers(0, 2, size=(n_visits, n_labels))
        image_latent = 2.0 * labels - 1.0
    elif spec.signal == "history_text_recent":
        chronic = rng.integers(0, 2, size=n_labels)
        labels[:] = chronic
        text_latent[:] = 2.0 * chronic - 1.0
    elif spec.signal == "history_text_stale":
        late = rng.integers(0, 2, size=n_labels)
        for v, off in enumerate(offsets_days):
            state = late if off <= spec.stale_flip_days else 1 - late
            labels[v] = state
            text_latent[v] = 2.0 * state - 1.0
    elif spec.signal == "cross_modal_xor":
        text_bit = rng.integers(0, 2, size=n_labels)
        image_bits = rng.integers(0, 2, size=(n_visits, n_labels))
        labels = np.bitwise_xor(image_bits, text_bit[None, :])
        image_latent = 2.0 * image_bits - 1.0
        text_latent[:] = 2.0 * text_bit - 1.0
    else:  # history_trend
        walk = np.cumsum(rng.normal(0.0, 1.0, size=(n_visits, n_labels)), axis=0)
        text_latent = walk
        half = spec.recency_halflife_days
        for v in range(n_visits):
            if v < 2:
                labels[v] = rng.integers(0, 2, size=n_labels)
                continue
            hist = walk[:v]
            gaps = offsets_days[:v] - offsets_days[v]
            weights = np.exp(-np.log(2.0) * gaps / half)
            weighted = (weights[:, None] * hist).sum(axis=0) / weights.sum()
            labels[v] = (weighted > hist.mean(axis=0)).astype(int)
    return labels, image_latent, text_latent


def synth_cohort(spec: SyntheticSpec, seed: int) -> tuple:
    """Generate (records, store) deterministically from (spec, seed)."""
    rng = np.random.default_rng(seed)
    dim = spec.dim
    n_labels = spec.label_count
    # fixed per-cohort signal directions, one per (label, modality)
    def unit_rows(n):
        mat = rng.normal(0.0, 1.0, size=(n, dim))
        return mat / np.linalg.norm(mat, axis=1, keepdims=True)

    u_image = unit_rows(n_labels)
    u_text = unit_rows(n_labels)
    records = []
    store = EmbeddingStore(dim=dim)
    for s in range(spec.n_subjects):
        subject_id = f"s{s:05d}"
        demo = _sample_demographics(rng)
        n_visits = int(rng.integers(spec.min_visits, spec.max_visits + 1))
        offsets_days = _visit_offsets_days(rng, n_visits, spec)
        labels, image_latent, text_latent = _subject_labels(rng, spec, offsets_days)
        last_time = BASE_EPOCH + int(rng.integers(0, 10_000)) * 3600
        for v in range(n_visits):
            study_id = f"s{s:05d}-v{v:02d}"
            chart_time = last_time - int(round(offsets_days[v] * HOURS_PER_DAY * 3600))
            img_key = f"img-{study_id}"
            txt_key = f"txt-{study_id}"
            img_vec = rng.normal(0.0, spec.noise, size=dim)
            img_vec += spec.signal_strength * (image_latent[v] @ u_image)
            txt_vec = rng.normal(0.0, spec.noise, size=dim)
            txt_vec += spec.signal_strength * (text_latent[v] @ u_text)
            store.put(img_key, img_vec.astype(np.float32), MODALITY_IMAGE)
            store.put(txt_key, txt_vec.astype(np.float32), MODALITY_TEXT)
            label_states = {name: ("positive" if labels[v, li] else "negative")
                            for li, name in enumerate(spec.labels)}
            sections = {
                "history": None,
                "indication": None,
                "comparison": None,
                "findings": f"Synthetic findings for {study_id}.",
                "impression": f"Synthetic impression for {study_id}.",
            }
            records.append(StudyRecord(
                subject_id=subject_id, study_id=study_id, chart_time=chart_time,
                image_embedding_key=img_key, text_embedding_key=txt_key,
                sections=sections, labels=label_states, demographics=demo))
    return records, store


def records_to_tables(records) -> tuple:
    """Flatten records into (image_rows, report_rows) for table output."""
    image_rows = []
    report_rows = []
    for rec in records:
        image_rows.append({
            "subject_id": rec.subject_id, "study_id": rec.study_id,
            "chart_time": str(rec.chart_time),
            "image_embedding_key": rec.image_embedding_key or "",
            "sex": rec.demographics.sex,
            "age_years": str(rec.demographics.age_years),
            "race": rec.demographics.race,
        })
        row = {
            "subject_id": rec.subject_id, "study_id": rec.study_id,
            "chart_time": str(rec.chart_time),
            "text_embedding_key": rec.text_embedding_key or "",
        }
        for name in ("history", "indication", "comparison", "findings", "impression"):
            row[name] = rec.sections.get(name) or ""
        for name, state in rec.labels.items():
            row[name] = state
        report_rows.append(row)
    return image_rows, report_rows
