"""Masked sequence assembly and the time-series transformer encoder.

Per-timestamp embeddings are packed into fixed-length sequences with a
validity mask (padding slots are exact zero vectors and are excluded
from attention), tagged with a learnable modality token, and encoded
either by a pre-norm transformer over the valid slots plus a [CLS]
token, or by plain mean pooling over the valid slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .positional import PositionalMode, _pair_angles, positional_apply


@dataclass
class EmbeddingSequence:
    """Fixed-length K x D slot matrix with validity mask and time offsets.

    Invalid slots hold exact zero vectors; offsets_norm is 0 there.
    Slots run oldest to newest, padding at the tail.
    """

    data: Tensor                     # K x D
    valid: np.ndarray                # K bools
    offsets_norm: list[float]        # K floats in [0, 1]
    modality: str                    # "image" or "text"

    @property
    def length(self) -> int:
        return int(self.valid.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[-1])

    def rezero(self) -> "EmbeddingSequence":
        """Return a copy with invalid slots forced back to zero vectors."""
        cleaned = self.data.data * self.valid[:, None]
        return EmbeddingSequence(Tensor(cleaned), self.valid.copy(),
                                 list(self.offsets_norm), self.modality)


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    dropout: float = 0.1
    positional: PositionalMode = field(default_factory=PositionalMode)
    pooling: str = "tst"

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by "
                              f"heads {self.heads}")
        if self.pooling not in ("tst", "mean"):
            raise ConfigError(f"pooling must be 'tst' or 'mean', got {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


def assemble_sequence(embeddings: Sequence[tuple], k: int, modality: str,
                      modality_token: Tensor) -> EmbeddingSequence:
    """Pack (vector, normalized offset) pairs into a K-slot sequence.

    Entries arrive oldest to newest; when there are more than K, only
    the K most recent are kept. The modality token is added to every
    valid slot; padding slots stay exact zeros with valid=False.
    """
    d = modality_token.shape[-1]
    kept = list(embeddings)[-k:] if len(embeddings) > k else list(embeddings)
    raw = np.zeros((k, d), dtype=np.float64)
    valid = np.zeros(k, dtype=bool)
    offsets = [0.0] * k
    for i, (vec, off) in enumerate(kept):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (d,):
            raise ShapeError(f"embedding has shape {vec.shape}, expected ({d},)")
        raw[i] = vec
        valid[i] = True
        offsets[i] = float(off)
    base = Tensor(raw)
    tagged = base + modality_token * Tensor(valid[:, None].astype(np.float64))
    return EmbeddingSequence(tagged, valid, offsets, modality)


def mean_pool(seq: EmbeddingSequence) -> Tensor:
    """Arithmetic mean over valid slots; zero vector when none are valid."""
    count = int(seq.valid.sum())
    if count == 0:
        return Tensor(np.zeros(seq.dim))
    weights = (seq.valid.astype(np.float64) / count)[None, :]
    pooled = ad.matmul(Tensor(weights), seq.data)
    return ad.reshape(pooled, (seq.dim,))


# ---------------------------------------------------------------------------
# transformer machinery (shared with the fusion heads)
# ---------------------------------------------------------------------------

def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.w = xavier(rng, d_in, d_out)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


class MultiHeadAttention:
    """Masked multi-head attention; rotary positions act on Q/K only."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def _split(self, x: Tensor, batch: int, t: int) -> Tensor:
        x = ad.reshape(x, (batch, t, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))  # B, h, T, dh

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_valid: np.ndarray,
                 rope_angles_q: Optional[np.ndarray] = None,
                 rope_angles_k: Optional[np.ndarray] = None) -> Tensor:
        b, tq, _ = q_in.shape
        tk = kv_in.shape[1]
        q = self._split(self.wq(q_in), b, tq)
        k = self._split(self.wk(kv_in), b, tk)
        v = self._split(self.wv(kv_in), b, tk)
        if rope_angles_q is not None:
            q = ad.rotate_pairs(q, rope_angles_q[:, None, :, :])
            k = ad.rotate_pairs(k, rope_angles_k[:, None, :, :])
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = scores * (1.0 / math.sqrt(self.head_dim))
        # a batch row with no valid key has nothing to attend to: give the
        # softmax a placeholder column, then zero that row's output
        empty = ~key_valid.any(axis=-1)
        safe_valid = key_valid
        if empty.any():
            safe_valid = key_valid.copy()
            safe_valid[empty, 0] = True
        mask = np.broadcast_to(safe_valid[:, None, None, :], (b, 1, 1, tk))
        attn = ad.softmax_last(scores, mask)
        mixed = ad.matmul(attn, v)
        mixed = ad.transpose(mixed, (0, 2, 1, 3))
        mixed = ad.reshape(mixed, (b, tq, self.dim))
        out = self.wo(mixed)
        if empty.any():
            out = out * Tensor((~empty).astype(np.float64)[:, None, None])
        return out

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk),
                          ("wv", self.wv), ("wo", self.wo)):
            for pname, p in lin.params().items():
                out[f"{name}.{pname}"] = p
        return out


class TransformerBlock:
    """Pre-norm block: x + attn(LN(x)), then x + ffn(LN(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 ff_dim: int, dropout: float):
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.ln1 = LayerNorm(dim)
        self.ln2 = LayerNorm(dim)
        self.ff1 = Linear(rng, dim, ff_dim)
        self.ff2 = Linear(rng, ff_dim, dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, key_valid: np.ndarray,
                 rope_angles: Optional[np.ndarray] = None,
                 training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        normed = self.ln1(x)
        h = self.attn(normed, normed, key_valid, rope_angles, rope_angles)
        h = ad.dropout(h, self.dropout, rng, training)
        x = x + h
        f = self.ff2(ad.gelu(self.ff1(self.ln2(x))))
        f = ad.dropout(f, self.dropout, rng, training)
        return x + f

    def params(self) -> dict[str, Tensor]:
        out = {}
        for pname, p in self.attn.params().items():
            out[f"attn.{pname}"] = p
        for name, mod in (("ln1", self.ln1), ("ln2", self.ln2),
                          ("ff1", self.ff1), ("ff2", self.ff2)):
            for pname, p in mod.params().items():
                out[f"{name}.{pname}"] = p
        return out


def _collect(prefix: str, modules: dict) -> dict[str, Tensor]:
    out = {}
    for name, mod in modules.items():
        for pname, p in mod.params().items():
            out[f"{prefix}{name}.{pname}" if name else f"{prefix}{pname}"] = p
    return out


def rope_angles_for(positions: np.ndarray, head_dim: int, mode: PositionalMode) -> np.ndarray:
    """Per-token rotation angles, shape (..., T, head_dim/2)."""
    return _pair_angles(np.asarray(positions, dtype=np.float64) * mode.position_scale,
                        head_dim, mode.rope_base, 1.0)


class TimeSeriesEncoder:
    """Stack of masked pre-norm blocks over slot sequences plus [CLS].

    Consumes batched token tensors (B x T x D) with validity masks and
    per-token positions: normalized time offsets for rope/sincos, or
    integer slot indices for the learnable table.
    """

    MAX_SLOTS = 512

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.blocks = [TransformerBlock(rng, d, cfg.heads, cfg.ff_dim, cfg.dropout)
                       for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(d)
        self.pos_table = make_position_table(cfg.positional, d, rng,
                                             self.MAX_SLOTS)

    def forward(self, tokens: Tensor, valid: np.ndarray, positions: np.ndarray,
                training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Encode B x T x D tokens; invalid slots never feed attention."""
        mode = self.cfg.positional
        tokens = apply_additive_positional(tokens, valid, positions, mode,
                                           self.pos_table)
        angles = None
        if mode.kind == "rope":
            angles = rope_angles_for(positions, self.blocks[0].attn.head_dim
                                     if self.blocks else self.cfg.model_dim, mode)
        for block in self.blocks:
            tokens = block(tokens, valid, angles, training, rng)
        return self.final_ln(tokens)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            for pname, p in block.params().items():
                out[f"blocks.{i}.{pname}"] = p
        for pname, p in self.final_ln.params().items():
            out[f"final_ln.{pname}"] = p
        if self.pos_table is not None:
            out["pos_table"] = self.pos_table
        return out


def _slot_indices(valid: np.ndarray) -> np.ndarray:
    b, t = valid.shape
    return np.broadcast_to(np.arange(t, dtype=np.float64), (b, t))


def make_position_table(mode: PositionalMode, dim: int,
                        rng: np.random.Generator,
                        max_slots: int = 512) -> Optional[Tensor]:
    if mode.kind != "learnable":
        return None
    return Tensor(rng.normal(0.0, 0.02, size=(max_slots, dim)),
                  requires_grad=True)


def apply_additive_positional(tokens: Tensor, valid: np.ndarray,
                              positions: np.ndarray, mode: PositionalMode,
                              table: Optional[Tensor]) -> Tensor:
    """Add the sincos/learnable signal to token inputs; rope acts in
    attention and mode none is identity, so both pass through here."""
    if mode.kind == "sincos":
        return positional_apply(mode, tokens, positions)
    if mode.kind == "learnable":
        return positional_apply(mode, tokens, _slot_indices(valid), table)
    return tokens


def tst_encode(seqs: Sequence[EmbeddingSequence], cls: Tensor, cfg: EncoderConfig,
               encoder: Optional[TimeSeriesEncoder] = None,
               rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
    """Encode one sample's modality sequences behind a [CLS] token.

    Returns (cls_out, tokens_out) where tokens_out is (1 + sum K) x D.
    When no encoder is supplied, a fresh deterministic one is built
    (useful for shape checks; training code owns a persistent encoder).
    """
    for seq in seqs:
        if seq.dim != cfg.model_dim:
            raise ShapeError(f"sequence dim {seq.dim} != model_dim {cfg.model_dim}")
    if encoder is None:
        encoder = TimeSeriesEncoder(cfg, rng or np.random.default_rng(0))
    parts = [ad.reshape(cls, (1, cls.shape[-1]))] + [seq.data for seq in seqs]
    tokens = ad.concat(parts, axis=0)
    valid = np.concatenate([[True]] + [seq.valid for seq in seqs])
    positions = np.concatenate([[0.0]] + [np.asarray(seq.offsets_norm) for seq in seqs])
    t = tokens.shape[0]
    batched = ad.reshape(tokens, (1, t, cfg.model_dim))
    out = encoder.forward(batched, valid[None, :], positions[None, :])
    tokens_out = ad.reshape(out, (t, cfg.model_dim))
    cls_out = ad.reshape(ad.index(tokens_out, (slice(0, 1),)), (cfg.model_dim,))
    return cls_out, tokens_out
