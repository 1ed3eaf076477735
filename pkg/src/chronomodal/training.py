"""Multi-label training loop with decoupled weight decay and
cosine-with-warmup scheduling.

Two parameter groups run at separate peak learning rates (input
adapters vs the sequence/fusion/classifier stack). Validation macro
AUROC is computed after every epoch and the returned checkpoint is the
epoch with the best value, earliest epoch winning ties. Every number
in the log is a pure function of (config, seed, data).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .errors import (ConfigError, ContractError, CorruptionError, FormatError,
                     NumericError, UndefinedMetricError)
from .metrics import ScoreSet, auroc
from .model import Batch, DiagnosisModel, ModelConfig, assemble_batch
from .store import EmbeddingStore

CHECKPOINT_MAGIC = b"TMCK1"


@dataclass
class TrainConfig:
    batch_size: int = 16
    peak_lr_encoder: Optional[float] = None   # default 1e-5 * (batch/64)
    peak_lr_tst: Optional[float] = None       # default 1e-4 * (batch/64)
    epochs: int = 15
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    warmup_frac: float = 0.10
    min_lr_ratio: float = 1e-3
    seed: int = 0
    pos_weight: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.peak_lr_encoder is None:
            self.peak_lr_encoder = 1e-5 * (self.batch_size / 64.0)
        if self.peak_lr_tst is None:
            self.peak_lr_tst = 1e-4 * (self.batch_size / 64.0)

    def to_json_dict(self) -> dict:
        return {"batch_size": self.batch_size,
                "peak_lr_encoder": self.peak_lr_encoder,
                "peak_lr_tst": self.peak_lr_tst, "epochs": self.epochs,
                "weight_decay": self.weight_decay, "betas": list(self.betas),
                "warmup_frac": self.warmup_frac, "min_lr_ratio": self.min_lr_ratio,
                "seed": self.seed, "pos_weight": self.pos_weight}

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        return cls(**d)


def bce_multilabel(logits: Tensor, targets: Tensor,
                   pos_weight: Optional[float] = None) -> Tensor:
    """Mean binary cross-entropy over every (sample, label) element."""
    return ad.bce_with_logits(logits, targets, pos_weight)


def cosine_warmup_lr(step: int, total: int, peak: float,
                     warmup_frac: float = 0.10, min_ratio: float = 1e-3) -> float:
    """Linear warmup to peak, then cosine decay to peak * min_ratio."""
    if total <= 0:
        raise ConfigError("total step count must be positive")
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    warmup = math.ceil(warmup_frac * total)
    if step < warmup:
        return peak * step / warmup
    floor = peak * min_ratio
    if total == warmup:
        return floor
    progress = (step - warmup) / (total - warmup)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def init_adamw_state(params: dict) -> dict:
    return {name: AdamWState(np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in params.items()}


def adamw_step(params: dict, grads: dict, state: dict, lr: float, wd: float,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One decoupled-weight-decay adaptive-moment update, in place.

    Decay shrinks parameters multiplicatively before the moment term;
    a non-finite gradient aborts the whole step with no mutation.
    """
    b1, b2 = betas
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        st = state[name]
        st.t += 1
        if wd:
            p.data -= lr * wd * p.data
        st.m = b1 * st.m + (1.0 - b1) * g
        st.v = b2 * st.v + (1.0 - b2) * (g * g)
        m_hat = st.m / (1.0 - b1 ** st.t)
        v_hat = st.v / (1.0 - b2 ** st.t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Checkpoint:
    params: dict                      # name -> float64 array snapshot
    epoch: int
    val_macro_auroc: Optional[float]
    meta: dict = field(default_factory=dict)


def predict_scores(model: DiagnosisModel, samples: Sequence,
                   store: EmbeddingStore, batch_size: int = 64) -> np.ndarray:
    """Per-label probabilities in eval mode, shape (n, num_labels)."""
    chunks = []
    for start in range(0, len(samples), batch_size):
        batch = assemble_batch(samples[start:start + batch_size], store, model.cfg)
        logits = model.forward(batch, training=False)
        chunks.append(1.0 / (1.0 + np.exp(-logits.data)))
    if not chunks:
        return np.zeros((0, len(model.cfg.labels)))
    return np.concatenate(chunks, axis=0)


def macro_val_auroc(model: DiagnosisModel, samples: Sequence,
                    store: EmbeddingStore, batch_size: int = 64) -> Optional[float]:
    if not samples:
        return None
    scores = predict_scores(model, samples, store, batch_size)
    targets = np.asarray([s.label_targets for s in samples])
    values = []
    for idx in range(targets.shape[1]):
        try:
            values.append(auroc(ScoreSet(list(scores[:, idx]),
                                         [int(v) for v in targets[:, idx]])))
        except UndefinedMetricError:
            continue
    return float(np.mean(values)) if values else None


def fit(model: DiagnosisModel, samples: Sequence, store: EmbeddingStore,
        cfg: TrainConfig) -> tuple:
    """Train on the train split, track validation after each epoch.

    Returns (best checkpoint, per-epoch log). The checkpoint is the
    parameter snapshot with the highest validation macro AUROC (ties
    resolved to the earliest epoch); with no validation samples the
    final epoch is returned.
    """
    train = [s for s in samples if s.split == "train"]
    val = [s for s in samples if s.split == "val"]
    if not train:
        raise ConfigError("empty train split")
    rng = np.random.default_rng(cfg.seed)
    groups = model.param_groups()
    states = {name: init_adamw_state(group) for name, group in groups.items()}
    peaks = {"encoder": cfg.peak_lr_encoder, "head": cfg.peak_lr_tst}
    batches_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    step = 0
    log = []
    best: Optional[Checkpoint] = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(train), cfg.batch_size):
            chunk = [train[i] for i in order[start:start + cfg.batch_size]]
            batch = assemble_batch(chunk, store, model.cfg)
            with Tape() as tape:
                logits = model.forward(batch, training=True, rng=rng)
                loss = bce_multilabel(logits, Tensor(batch.targets), cfg.pos_weight)
                backward(tape, loss)
            for gname, group in groups.items():
                lr = cosine_warmup_lr(step, total_steps, peaks[gname],
                                      cfg.warmup_frac, cfg.min_lr_ratio)
                grads = {name: p.grad for name, p in group.items()
                         if p.grad is not None}
                adamw_step(group, grads, states[gname], lr, cfg.weight_decay,
                           cfg.betas)
                for p in group.values():
                    p.grad = None
            epoch_loss += loss.item() * len(chunk)
            step += 1
        val_auroc = macro_val_auroc(model, val, store)
        entry = {"epoch": epoch,
                 "train_loss": epoch_loss / len(train),
                 "val_macro_auroc": val_auroc}
        log.append(entry)
        is_better = (best is None
                     or (val_auroc is not None
                         and (best.val_macro_auroc is None
                              or val_auroc > best.val_macro_auroc)))
        if val and is_better:
            best = Checkpoint(model.snapshot(), epoch, val_auroc)
    if best is None:
        best = Checkpoint(model.snapshot(), cfg.epochs - 1,
                          log[-1]["val_macro_auroc"] if log else None)
    return best, log


# ---------------------------------------------------------------------------
# checkpoint files: magic + JSON meta + named float64 parameter blobs, all LE
# ---------------------------------------------------------------------------

def checkpoint_save(ckpt: Checkpoint, path) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    meta = dict(ckpt.meta)
    meta["epoch"] = ckpt.epoch
    meta["val_macro_auroc"] = ckpt.val_macro_auroc
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", len(meta_raw)))
        handle.write(meta_raw)
        handle.write(struct.pack("<I", len(ckpt.params)))
        for name, arr in ckpt.params.items():
            raw = name.encode("utf-8")
            handle.write(struct.pack("<I", len(raw)))
            handle.write(raw)
            handle.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                handle.write(struct.pack("<Q", dim))
            handle.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def checkpoint_load(path) -> Checkpoint:
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise CorruptionError(f"{path}: truncated at offset {offset}")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (meta_len,) = take("<I")
    if offset + meta_len > len(data):
        raise CorruptionError(f"{path}: truncated metadata")
    meta = json.loads(data[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = take("<B")
        shape = tuple(take("<Q")[0] for _ in range(ndim))
        n_vals = int(np.prod(shape)) if shape else 1
        size = 8 * n_vals
        if offset + size > len(data):
            raise CorruptionError(f"{path}: truncated values for {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=n_vals,
                            offset=offset).reshape(shape).copy()
        offset += size
        params[name] = arr
    if offset != len(data):
        raise CorruptionError(f"{path}: {len(data) - offset} trailing bytes")
    epoch = int(meta.pop("epoch"))
    val = meta.pop("val_macro_auroc")
    return Checkpoint(params, epoch, val, meta)
