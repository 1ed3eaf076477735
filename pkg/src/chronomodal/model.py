"""End-to-end diagnosis model over stored embeddings.

A trainable linear adapter lifts stored encoder embeddings into the
model width (standing in for encoder fine-tuning), learnable modality
tokens tag every valid slot, and one of the fusion routes combines the
current-scan image sequence with the report history sequence into
multi-label logits. Batch assembly pads every sample to the configured
sequence lengths, so per-sample encodings are batch-size independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, Linear, TimeSeriesEncoder
from .errors import ConfigError, ContractError
from .fusion import (FUSION_METHODS, BlockFusion, ConcatMlpFusion,
                     MbtFusion, MeterFusion, ViltFusion, ensemble_average,
                     fusion_flops)
from .positional import MODES, PositionalMode, normalize_offsets
from .records import TemporalSample
from .store import EmbeddingStore

MODALITIES = ("image", "text")
HOURS_PER_DAY = 24.0


@dataclass
class ModelConfig:
    store_dim: int
    labels: tuple
    model_dim: int = 64
    heads: int = 4
    layers: int = 2
    ff_dim: Optional[int] = None            # defaults to 4 * model_dim
    dropout: float = 0.1
    positional: str = "rope"
    rope_base: float = 10000.0
    position_scale: float = 49.0
    pooling: str = "tst"
    fusion: str = "vilt"
    modalities: tuple = ("image", "text")
    k_images: int = 1
    k_text: int = 50
    vilt_layers: int = 1
    mbt_layers: int = 6
    mbt_fusion_layers: int = 3
    mbt_bottleneck: int = 4
    meter_layers: int = 2
    concat_hidden: Optional[int] = None
    block_rank: int = 8
    block_core: int = 8
    num_reports: Optional[int] = None       # keep only the most recent N reports
    time_window_days: Optional[float] = None  # keep history within this window

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.modalities = tuple(self.modalities)
        if self.ff_dim is None:
            self.ff_dim = 4 * self.model_dim
        if self.fusion not in FUSION_METHODS:
            raise ConfigError(f"fusion must be one of {FUSION_METHODS}, "
                              f"got {self.fusion!r}")
        if self.positional not in MODES:
            raise ConfigError(f"positional must be one of {MODES}")
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ConfigError(f"modalities must be a subset of {MODALITIES}")
        if not self.labels:
            raise ConfigError("label list must be non-empty")
        if self.k_images < 1 or self.k_text < 0:
            raise ConfigError("k_images must be >= 1 and k_text >= 0")

    def positional_mode(self) -> PositionalMode:
        return PositionalMode(kind=self.positional, dim=self.model_dim,
                              rope_base=self.rope_base,
                              position_scale=self.position_scale)

    def encoder_config(self, layers: Optional[int] = None) -> EncoderConfig:
        return EncoderConfig(layers=self.layers if layers is None else layers,
                             heads=self.heads, model_dim=self.model_dim,
                             ff_dim=self.ff_dim, dropout=self.dropout,
                             positional=self.positional_mode(),
                             pooling=self.pooling)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        d["modalities"] = list(self.modalities)
        # architecture choices the reference recipe leaves open
        d["norm_placement"] = "pre"
        d["activation"] = "gelu"
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        d = {k: v for k, v in d.items()
             if k not in ("norm_placement", "activation")}
        d["labels"] = tuple(d["labels"])
        d["modalities"] = tuple(d["modalities"])
        return cls(**d)


@dataclass
class Batch:
    """Fixed-width arrays for one batch of samples."""

    image_data: np.ndarray    # B x K_img x store_dim
    image_valid: np.ndarray   # B x K_img bool
    image_pos: np.ndarray     # B x K_img normalized offsets
    text_data: np.ndarray
    text_valid: np.ndarray
    text_pos: np.ndarray
    targets: np.ndarray       # B x C float
    samples: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.targets.shape[0]


def filter_history(reports: Sequence[tuple], num_reports: Optional[int],
                   time_window_days: Optional[float]) -> list:
    """Apply the ablation caps: time window first, then most-recent-N."""
    kept = list(reports)
    if time_window_days is not None:
        limit = time_window_days * HOURS_PER_DAY
        kept = [(k, o) for k, o in kept if o <= limit]
    if num_reports is not None:
        kept = kept[len(kept) - num_reports:] if num_reports > 0 else []
    return kept


def assemble_batch(samples: Sequence[TemporalSample], store: EmbeddingStore,
                   cfg: ModelConfig) -> Batch:
    """Pack samples into fixed-K arrays with masks and normalized offsets.

    History slots run oldest to newest with padding at the tail; the
    anchor scan occupies the final image slot at offset zero. Offsets
    are normalized per sample over everything the sample includes.
    """
    batch = len(samples)
    k_img, k_txt = cfg.k_images, cfg.k_text
    d_in = cfg.store_dim
    image_data = np.zeros((batch, k_img, d_in))
    image_valid = np.zeros((batch, k_img), dtype=bool)
    image_pos = np.zeros((batch, k_img))
    text_data = np.zeros((batch, max(k_txt, 1), d_in))
    text_valid = np.zeros((batch, max(k_txt, 1)), dtype=bool)
    text_pos = np.zeros((batch, max(k_txt, 1)))
    targets = np.zeros((batch, len(cfg.labels)))
    for i, sample in enumerate(samples):
        if len(sample.label_targets) != len(cfg.labels):
            raise ContractError(f"sample has {len(sample.label_targets)} targets, "
                                f"model expects {len(cfg.labels)}")
        targets[i] = sample.label_targets
        reports = filter_history(sample.history_reports, cfg.num_reports,
                                 cfg.time_window_days)
        reports = reports[-k_txt:] if k_txt else []
        images_hist = filter_history(sample.history_images, None,
                                     cfg.time_window_days)
        images_hist = images_hist[-(k_img - 1):] if k_img > 1 else []
        entries_img = list(images_hist)
        if sample.anchor.image_embedding_key:
            entries_img.append((sample.anchor.image_embedding_key, 0.0))
        offsets_all = [0.0] + [o for _, o in reports] + [o for _, o in entries_img]
        normed = normalize_offsets(offsets_all)
        norm_of = dict(zip(offsets_all, normed))
        for j, (key, off) in enumerate(reports):
            text_data[i, j] = store.get(key)
            text_valid[i, j] = True
            text_pos[i, j] = norm_of[off]
        for j, (key, off) in enumerate(entries_img):
            image_data[i, j] = store.get(key)
            image_valid[i, j] = True
            image_pos[i, j] = norm_of[off]
    return Batch(image_data, image_valid, image_pos,
                 text_data, text_valid, text_pos, targets, list(samples))


class DiagnosisModel:
    """Adapter + sequence encoders + fusion route + linear classifier."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        self.adapters = {}
        self.modality_tokens = {}
        for modality in MODALITIES:
            if modality in cfg.modalities:
                self.adapters[modality] = Linear(rng, cfg.store_dim, d)
                self.modality_tokens[modality] = Tensor(
                    rng.normal(0.0, 0.02, size=d), requires_grad=True)
        self.multimodal = len(cfg.modalities) == 2
        self.cls: Optional[Tensor] = None
        self.fuser = None
        self.branch_encoders: dict = {}
        self.branch_cls: dict = {}
        self.branch_classifiers: dict = {}
        self.classifier: Optional[Linear] = None
        n_labels = len(cfg.labels)

        needs_branch_encoders = (not self.multimodal
                                 or cfg.fusion in ("concat_mlp", "block", "ensemble"))
        if needs_branch_encoders and cfg.pooling == "tst":
            for modality in cfg.modalities:
                self.branch_encoders[modality] = TimeSeriesEncoder(
                    cfg.encoder_config(), rng)
                self.branch_cls[modality] = Tensor(
                    rng.normal(0.0, 0.02, size=d), requires_grad=True)

        if self.multimodal:
            if cfg.fusion == "vilt":
                self.cls = Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True)
                self.fuser = ViltFusion(cfg.encoder_config(), rng, cfg.vilt_layers)
            elif cfg.fusion == "mbt":
                self.fuser = MbtFusion(cfg.encoder_config(), rng, cfg.mbt_layers,
                                       cfg.mbt_fusion_layers, cfg.mbt_bottleneck)
            elif cfg.fusion == "meter":
                self.fuser = MeterFusion(cfg.encoder_config(), rng, cfg.meter_layers)
            elif cfg.fusion == "concat_mlp":
                self.fuser = ConcatMlpFusion(rng, d, d, cfg.concat_hidden, d)
            elif cfg.fusion == "block":
                self.fuser = BlockFusion(rng, d, d, cfg.block_rank, cfg.block_rank,
                                         cfg.block_core, d)
        if self.multimodal and cfg.fusion == "ensemble":
            for modality in cfg.modalities:
                self.branch_classifiers[modality] = Linear(rng, d, n_labels)
        else:
            self.classifier = Linear(rng, d, n_labels)

    # -- forward ------------------------------------------------------------

    def _adapted(self, batch: Batch, modality: str) -> tuple:
        if modality == "image":
            raw, valid, pos = batch.image_data, batch.image_valid, batch.image_pos
        else:
            raw, valid, pos = batch.text_data, batch.text_valid, batch.text_pos
        x = self.adapters[modality](Tensor(raw))
        mask = Tensor(valid[:, :, None].astype(np.float64))
        token = ad.reshape(self.modality_tokens[modality],
                           (1, 1, self.cfg.model_dim))
        x = x * mask + token * mask
        return x, valid, pos

    def _pooled(self, x: Tensor, valid: np.ndarray) -> tuple:
        """Masked mean over slots; rows with no valid slot stay zero."""
        counts = valid.sum(axis=1)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
        pooled = ad.tensor_sum(x, axis=1) * Tensor(inv[:, None])
        return pooled, counts > 0

    def _branch_vector(self, batch: Batch, modality: str,
                       training: bool, rng) -> Tensor:
        """One modality to one vector: TST [CLS] output or masked mean."""
        x, valid, pos = self._adapted(batch, modality)
        if self.cfg.pooling == "mean":
            pooled, _ = self._pooled(x, valid)
            return pooled
        b = x.shape[0]
        cls = self.branch_cls[modality]
        tokens = ad.concat([_tile(cls, b), x], axis=1)
        full_valid = np.concatenate([np.ones((b, 1), dtype=bool), valid], axis=1)
        full_pos = np.concatenate([np.zeros((b, 1)), pos], axis=1)
        out = self.branch_encoders[modality].forward(tokens, full_valid, full_pos,
                                                     training, rng)
        return ad.reshape(ad.index(out, (slice(None), slice(0, 1))),
                          (b, self.cfg.model_dim))

    def _sequence_inputs(self, batch: Batch, modality: str,
                         training: bool, rng) -> tuple:
        """Token sequence for sequence-level fusion, honoring the pooling mode."""
        x, valid, pos = self._adapted(batch, modality)
        if self.cfg.pooling == "mean":
            pooled, nonempty = self._pooled(x, valid)
            x = ad.reshape(pooled, (x.shape[0], 1, self.cfg.model_dim))
            valid = nonempty[:, None]
            pos = np.zeros((x.shape[0], 1))
        return x, valid, pos

    def forward(self, batch: Batch, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Multi-label logits, shape B x num_labels."""
        cfg = self.cfg
        if not self.multimodal:
            modality = cfg.modalities[0]
            joint = self._branch_vector(batch, modality, training, rng)
            return self.classifier(joint)
        if cfg.fusion == "vilt":
            xa, va, pa = self._sequence_inputs(batch, "image", training, rng)
            xb, vb, pb = self._sequence_inputs(batch, "text", training, rng)
            b = xa.shape[0]
            tokens = ad.concat([_tile(self.cls, b), xa, xb], axis=1)
            valid = np.concatenate([np.ones((b, 1), dtype=bool), va, vb], axis=1)
            pos = np.concatenate([np.zeros((b, 1)), pa, pb], axis=1)
            joint = self.fuser.forward(tokens, valid, pos, training, rng)
            return self.classifier(joint)
        if cfg.fusion in ("mbt", "meter"):
            xa, va, pa = self._sequence_inputs(batch, "image", training, rng)
            xb, vb, pb = self._sequence_inputs(batch, "text", training, rng)
            joint = self.fuser.forward(xa, va, pa, xb, vb, pb, training, rng)
            return self.classifier(joint)
        if cfg.fusion in ("concat_mlp", "block"):
            x1 = self._branch_vector(batch, "image", training, rng)
            x2 = self._branch_vector(batch, "text", training, rng)
            joint = self.fuser.forward(x1, x2)
            return self.classifier(joint)
        # ensemble: average the two unimodal logit vectors
        logits = []
        for modality in cfg.modalities:
            vec = self._branch_vector(batch, modality, training, rng)
            logits.append(self.branch_classifiers[modality](vec))
        return ensemble_average(logits[0], logits[1])

    # -- parameters ----------------------------------------------------------

    def param_groups(self) -> dict:
        """Two optimizer groups: input adapters vs everything else."""
        encoder = {}
        for modality in sorted(self.adapters):
            for k, v in self.adapters[modality].params().items():
                encoder[f"adapter.{modality}.{k}"] = v
        head = {}
        for modality in sorted(self.modality_tokens):
            head[f"token.{modality}"] = self.modality_tokens[modality]
        if self.cls is not None:
            head["cls"] = self.cls
        for modality in sorted(self.branch_cls):
            head[f"branch_cls.{modality}"] = self.branch_cls[modality]
        for modality in sorted(self.branch_encoders):
            for k, v in self.branch_encoders[modality].params().items():
                head[f"branch_encoder.{modality}.{k}"] = v
        if self.fuser is not None:
            for k, v in self.fuser.params().items():
                head[f"fuser.{k}"] = v
        for modality in sorted(self.branch_classifiers):
            for k, v in self.branch_classifiers[modality].params().items():
                head[f"branch_classifier.{modality}.{k}"] = v
        if self.classifier is not None:
            for k, v in self.classifier.params().items():
                head[f"classifier.{k}"] = v
        return {"encoder": encoder, "head": head}

    def params(self) -> dict:
        groups = self.param_groups()
        out = {}
        out.update(groups["encoder"])
        out.update(groups["head"])
        return out

    def load_params(self, values: dict) -> None:
        own = self.params()
        if set(own) != set(values):
            missing = sorted(set(own) ^ set(values))
            raise ContractError(f"parameter names disagree around: {missing[:4]}")
        for name, tensor in own.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ContractError(f"parameter {name} shape {arr.shape} != "
                                    f"{tensor.data.shape}")
            tensor.data = arr.copy()
            tensor.grad = None

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.params().items()}

    def flops(self) -> dict:
        cfg = self.cfg
        return fusion_flops(cfg.fusion, cfg.k_images, cfg.k_text, cfg.model_dim,
                            cfg.ff_dim, tst_layers=cfg.layers,
                            num_labels=len(cfg.labels), store_dim=cfg.store_dim,
                            vilt_layers=cfg.vilt_layers, mbt_layers=cfg.mbt_layers,
                            mbt_bottleneck=cfg.mbt_bottleneck,
                            meter_layers=cfg.meter_layers,
                            concat_hidden=cfg.concat_hidden,
                            block_rank=cfg.block_rank, block_core=cfg.block_core)


def _tile(token: Tensor, batch: int) -> Tensor:
    row = ad.reshape(token, (1, 1, token.shape[-1]))
    return Tensor(np.ones((batch, 1, 1))) * row
