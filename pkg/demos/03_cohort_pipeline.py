"""Longitudinal cohort construction, step by step, with the leakage guard.

Each subject's timeline expands into one sample per anchor timestamp;
history is strictly earlier, duplicate and blank-impression entries are
filtered, and splits are by subject. Any history item at or after its
anchor time is a hard failure, never a warning.

Run: python3 demos/03_cohort_pipeline.py
"""

from chronomodal import (LeakageError, build_samples, dedup_filter,
                         leakage_check, merge_records, split_patients)
from chronomodal.pipeline import assign_splits, sort_samples

LABELS = ["Atelectasis", "Edema"]


def image_row(subject, study, t):
    return {"subject_id": subject, "study_id": study, "chart_time": str(t),
            "image_embedding_key": f"img-{study}", "sex": "F",
            "age_years": "63", "race": "White"}


def report_row(subject, study, t, impression="Stable appearance."):
    row = {"subject_id": subject, "study_id": study, "chart_time": str(t),
           "text_embedding_key": f"txt-{study}", "history": "",
           "indication": "", "comparison": "", "findings": "Clear lungs.",
           "impression": impression}
    row.update({name: "negative" for name in LABELS})
    return row


DAY = 86400
images, reports = [], []
for subject, visits in (("pat-a", 2), ("pat-b", 3), ("pat-c", 5)):
    for v in range(visits):
        t = 1_600_000_000 + v * 3 * DAY
        study = f"{subject}-v{v}"
        images.append(image_row(subject, study, t))
        # one blank impression shows the filter at work
        impression = "" if (subject, v) == ("pat-c", 1) else "Stable."
        reports.append(report_row(subject, study, t, impression))

stats = {}
records = merge_records(images, reports, LABELS, stats)
samples = build_samples(records, stats=stats)
samples = sort_samples(dedup_filter(samples, records, stats=stats))
split = split_patients([r.subject_id for r in records], seed=0)
assign_splits(samples, split)

print("stage counts:")
for key in ("merged_records", "samples_prefilter",
            "blank_impression_history_removed",
            "blank_impression_anchors_removed", "samples_postfilter"):
    print(f"  {key}: {stats[key]}")
print("splits:", {k: sorted(v) for k, v in
                  (("train", split.train), ("val", split.val),
                   ("test", split.test))})

leakage_check(samples)
print("leakage check: clean")

# plant a same-time report and watch the guard trip
samples[-1].history_reports.append(("txt-future", 0.0))
try:
    leakage_check(samples)
except LeakageError as exc:
    print(f"leakage check correctly tripped: {exc}")
