"""Study record schema, table ingestion, and report-section templating.

Input tables are UTF-8 delimiter-separated values with a header row
(RFC-4180 quoting). The image table carries the scan key and
demographics; the report table carries section texts, the text
embedding key, and one column per label with values in
{positive, negative, uncertain, missing}.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import ContractError

DEFAULT_LABELS = (
    "Atelectasis", "Cardiomegaly", "Consolidation", "Edema",
    "Enlarged Cardiomediastinum", "Fracture", "Lung Lesion", "Lung Opacity",
    "Pleural Effusion", "Pleural Other", "Pneumonia", "Pneumothorax",
    "Support Devices",
)

SECTION_NAMES = ("history", "indication", "comparison", "findings", "impression")
LABEL_STATES = ("positive", "negative", "uncertain", "missing")
SECTION_MODES = ("impression", "finding", "both")

IMAGE_COLUMNS = ("subject_id", "study_id", "chart_time", "image_embedding_key",
                 "sex", "age_years", "race")
REPORT_BASE_COLUMNS = ("subject_id", "study_id", "chart_time",
                       "text_embedding_key") + SECTION_NAMES


@dataclass
class Demographics:
    sex: str
    age_years: int
    race: str

    def to_json_dict(self) -> dict:
        return {"sex": self.sex, "age_years": self.age_years, "race": self.race}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Demographics":
        return cls(sex=d["sex"], age_years=int(d["age_years"]), race=d["race"])


@dataclass
class StudyRecord:
    """One timestamped study: scan reference, report sections, labels."""

    subject_id: str
    study_id: str
    chart_time: int                       # epoch seconds, strictly positive
    image_embedding_key: Optional[str]
    text_embedding_key: Optional[str]
    sections: dict
    labels: dict                          # label name -> state string
    demographics: Demographics

    def __post_init__(self):
        if self.chart_time <= 0:
            raise ContractError(f"chart_time must be positive, got {self.chart_time} "
                                f"for study {self.study_id}")
        for name, state in self.labels.items():
            if state not in LABEL_STATES:
                raise ContractError(f"label {name!r} has invalid state {state!r}")

    def impression_blank(self) -> bool:
        text = self.sections.get("impression")
        return text is None or not text.strip()


@dataclass
class TemporalSample:
    """One training/eval unit: anchor study plus strictly-earlier history."""

    subject_id: str
    anchor: StudyRecord
    history_reports: list = field(default_factory=list)   # (text key, offset hours)
    history_images: list = field(default_factory=list)    # (image key, offset hours)
    label_targets: list = field(default_factory=list)     # binary ints
    split: Optional[str] = None


def binarize_labels(labels: dict, label_names: Sequence[str]) -> list:
    """positive -> 1; negative, uncertain, missing -> 0."""
    out = []
    for name in label_names:
        state = labels.get(name, "missing")
        out.append(1 if state == "positive" else 0)
    return out


def compose_report_text(sections: dict, mode: str) -> Optional[str]:
    """Render a report's text per section mode; None when a required
    section is absent or blank (callers skip and count such reports)."""
    if mode not in SECTION_MODES:
        raise ContractError(f"section mode must be one of {SECTION_MODES}, got {mode!r}")

    def get(name):
        text = sections.get(name)
        if text is None or not text.strip():
            return None
        return text

    if mode == "impression":
        return get("impression")
    if mode == "finding":
        return get("findings")
    imp, fnd = get("impression"), get("findings")
    if imp is None or fnd is None:
        return None
    return f"Impression: {imp} Finding: {fnd}"


# ---------------------------------------------------------------------------
# table ingestion
# ---------------------------------------------------------------------------

def read_table(path, delimiter: str = ",") -> list:
    """Parse a delimited table into row dicts; errors carry line numbers."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle, delimiter=delimiter)
        if reader.fieldnames is None:
            raise ContractError(f"{path}: missing header row")
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise ContractError(f"{path}:{lineno}: row width does not match header")
            rows.append(dict(row))
    return rows


def write_table(path, rows: Sequence[dict], columns: Sequence[str],
                delimiter: str = ",") -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns),
                                delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _parse_int(value: str, path: str, lineno: int, column: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ContractError(f"{path}:{lineno}: column {column!r} is not an "
                            f"integer: {value!r}") from None
