"""Train a history-aware model on a synthetic cohort and evaluate it.

The cohort plants its label signal in historical report embeddings, so
the model only wins by actually reading the history. Takes a few
seconds on one core.

Run: python3 demos/04_train_and_evaluate.py
"""

import numpy as np

from chronomodal import (DiagnosisModel, ModelConfig, SyntheticSpec,
                         TrainConfig, compute_report, fit, predict_scores,
                         synth_cohort)
from chronomodal.experiments import _subgroup_key
from chronomodal.metrics import subgroup_metrics
from chronomodal.pipeline import (assign_splits, build_samples, dedup_filter,
                                  sort_samples, split_patients)

spec = SyntheticSpec(n_subjects=120, signal="history_text_recent", dim=16,
                     label_count=3, min_visits=2, max_visits=5)
records, store = synth_cohort(spec, seed=0)
samples = sort_samples(dedup_filter(build_samples(records), records))
assign_splits(samples, split_patients([r.subject_id for r in records], seed=0))
print(f"cohort: {len(samples)} samples over {spec.n_subjects} subjects")

cfg = ModelConfig(store_dim=spec.dim, labels=spec.labels, model_dim=16,
                  heads=2, layers=1, dropout=0.1, k_text=6, position_scale=5.0)
tc = TrainConfig(batch_size=16, epochs=5, seed=0,
                 peak_lr_encoder=3e-3, peak_lr_tst=1e-2)

model = DiagnosisModel(cfg, seed=0)
checkpoint, log = fit(model, samples, store, tc)
print("\nlearning curve (epoch, train loss, val macro AUROC):")
for entry in log:
    print(f"  {entry['epoch']}  {entry['train_loss']:.4f}  "
          f"{entry['val_macro_auroc']:.4f}")
print(f"best checkpoint: epoch {checkpoint.epoch} "
      f"(val macro AUROC {checkpoint.val_macro_auroc:.4f})")

test = [s for s in samples if s.split == "test"]
scores = predict_scores(model, test, store)
targets = np.asarray([s.label_targets for s in test])
report = compute_report(scores, targets, spec.labels)
print(f"\ntest macro AUROC {report.macro_auroc:.4f}, "
      f"macro AUPRC {report.macro_auprc:.4f}")
for name, entry in report.per_label.items():
    print(f"  {name}: AUROC {entry['auroc']:.3f}  "
          f"({entry['n_pos']} pos / {entry['n_neg']} neg)")

slices = subgroup_metrics(test, scores, _subgroup_key, targets, spec.labels)
print("\nAUROC by sex:")
for cell, stats in slices["sex"].items():
    shown = "n/a" if stats["macro_auroc"] is None else f"{stats['macro_auroc']:.3f}"
    print(f"  {cell}: {shown}  (n={stats['count']})")
