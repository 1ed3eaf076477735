"""Longitudinal multi-modal diagnosis models over embedding histories."""

from .autodiff import (Tape, Tensor, backward, bce_with_logits, gradient_check,
                       layer_norm, matmul, softmax_last)
from .encoder import (EmbeddingSequence, EncoderConfig, TimeSeriesEncoder,
                      assemble_sequence, mean_pool, tst_encode)
from .errors import (ChronomodalError, ConfigError, ContractError,
                     CorruptionError, DegenerateMaskError, FormatError,
                     LeakageError, NumericError, ShapeError,
                     UndefinedMetricError)
from .fusion import (FUSION_METHODS, FusionOutput, ensemble_average,
                     fuse_block, fuse_concat_mlp, fuse_mbt, fuse_meter,
                     fuse_vilt, fusion_flops)
from .metrics import (MetricReport, ScoreSet, SubgroupKey, auroc, auprc,
                      compute_report, seed_aggregate, subgroup_metrics,
                      wilcoxon_one_tailed)
from .model import Batch, DiagnosisModel, ModelConfig, assemble_batch
from .pipeline import (CohortSplit, build_samples, dedup_filter, leakage_check,
                       manifest_read, manifest_write, merge_records,
                       split_patients)
from .positional import (PositionalMode, normalize_offsets, positional_apply,
                         rope_apply, sincos_table)
from .records import (DEFAULT_LABELS, Demographics, StudyRecord,
                      TemporalSample, compose_report_text)
from .store import EmbeddingStore, embstore_read, embstore_write
from .synth import SIGNAL_MODES, SyntheticSpec, synth_cohort
from .training import (Checkpoint, TrainConfig, adamw_step, bce_multilabel,
                       checkpoint_load, checkpoint_save, cosine_warmup_lr, fit,
                       predict_scores)

__version__ = "0.1.0"
