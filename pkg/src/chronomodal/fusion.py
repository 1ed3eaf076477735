"""Modality-combination strategies.

Six interchangeable ways to combine the image and report pathways:

* vilt   -- early fusion: one transformer over [CLS | image | text] tokens
* mbt    -- mid fusion through a small set of shared bottleneck tokens
* concat_mlp -- two-layer perceptron over concatenated pooled vectors
* block  -- low-rank bilinear form between pooled vectors
* meter  -- co-attention stacks with symmetric cross-attention
* ensemble -- plain averaging of two unimodal logit vectors

Sequence-level methods (vilt, mbt, meter) consume token sequences;
vector-level methods (concat_mlp, block) consume pooled vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .encoder import (EmbeddingSequence, EncoderConfig, LayerNorm, Linear,
                      MultiHeadAttention, TimeSeriesEncoder, TransformerBlock,
                      apply_additive_positional, make_position_table,
                      rope_angles_for)

FUSION_METHODS = ("vilt", "mbt", "concat_mlp", "block", "meter", "ensemble")


@dataclass
class FusionOutput:
    """Either a pre-classifier joint vector or already-averaged logits."""

    joint: Optional[Tensor] = None
    logits: Optional[Tensor] = None

    def __post_init__(self):
        if (self.joint is None) == (self.logits is None):
            raise ContractError("exactly one of joint/logits must be set")


def ensemble_average(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Element-wise mean of two pre-sigmoid logit vectors."""
    if logits_a.shape != logits_b.shape:
        raise ShapeError(f"logit shapes differ: {logits_a.shape} vs {logits_b.shape}")
    return (logits_a + logits_b) * 0.5


def fuse_concat_mlp(x1: Tensor, x2: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """y = W2^T sigmoid(W1^T [x1 || x2]) for vectors x1, x2."""
    i, j = x1.shape[-1], x2.shape[-1]
    if w1.shape[0] != i + j:
        raise ShapeError(f"w1 expects {w1.shape[0]} inputs, got {i}+{j}")
    if w2.shape[0] != w1.shape[1]:
        raise ShapeError(f"w1 output {w1.shape[1]} != w2 input {w2.shape[0]}")
    cat = ad.concat([ad.reshape(x1, (i,)), ad.reshape(x2, (j,))], axis=0)
    col = ad.reshape(cat, (i + j, 1))
    hidden = ad.sigmoid(ad.matmul(ad.transpose(w1, (1, 0)), col))
    out = ad.matmul(ad.transpose(w2, (1, 0)), hidden)
    return ad.reshape(out, (w2.shape[1],))


def fuse_block(x1: Tensor, x2: Tensor, a: Tensor, b: Tensor,
               core: Tensor, c: Tensor) -> Tensor:
    """Low-rank bilinear fusion y = C (core x1 (x1^T A) x2 (x2^T B)).

    x1 is projected to rank L, x2 to rank M, both contracted against the
    L x M x N core, and the result mapped to the output by C (K x N).
    """
    if x1.shape[-1] != a.shape[0] or x2.shape[-1] != b.shape[0]:
        raise ShapeError(f"projection shapes {a.shape}/{b.shape} do not match "
                         f"inputs {x1.shape}/{x2.shape}")
    rank_l, rank_m, rank_n = core.shape
    if a.shape[1] != rank_l or b.shape[1] != rank_m or c.shape[1] != rank_n:
        raise ShapeError(f"core {core.shape} inconsistent with A {a.shape}, "
                         f"B {b.shape}, C {c.shape}")
    u = ad.matmul(ad.reshape(x1, (1, x1.shape[-1])), a)           # 1 x L
    v = ad.matmul(ad.reshape(x2, (1, x2.shape[-1])), b)           # 1 x M
    flat = ad.reshape(core, (rank_l, rank_m * rank_n))
    mixed = ad.reshape(ad.matmul(u, flat), (rank_m, rank_n))      # M x N
    w = ad.matmul(v, mixed)                                       # 1 x N
    out = ad.matmul(w, ad.transpose(c, (1, 0)))                   # 1 x K
    return ad.reshape(out, (c.shape[0],))


# ---------------------------------------------------------------------------
# sequence-level fusion heads (batched; functional wrappers below)
# ---------------------------------------------------------------------------

def _tile_token(token: Tensor, batch: int) -> Tensor:
    row = ad.reshape(token, (1, 1, token.shape[-1]))
    ones = Tensor(np.ones((batch, 1, 1)))
    return ones * row


class ViltFusion:
    """Single-stream early fusion: one transformer over all tokens."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, layers: int = 1):
        inner = EncoderConfig(layers=layers, heads=cfg.heads, model_dim=cfg.model_dim,
                              ff_dim=cfg.ff_dim, dropout=cfg.dropout,
                              positional=cfg.positional, pooling="tst")
        self.encoder = TimeSeriesEncoder(inner, rng)

    def forward(self, tokens: Tensor, valid: np.ndarray, positions: np.ndarray,
                training: bool = False, rng=None) -> Tensor:
        out = self.encoder.forward(tokens, valid, positions, training, rng)
        return ad.reshape(ad.index(out, (slice(None), slice(0, 1), slice(None))),
                          (tokens.shape[0], tokens.shape[-1]))

    def params(self) -> dict[str, Tensor]:
        return {f"encoder.{k}": v for k, v in self.encoder.params().items()}


class MbtFusion:
    """Bottleneck fusion: modalities exchange through shared fusion tokens.

    The first (layers - fusion_layers) blocks run each modality alone;
    in each fusion layer both modalities process [own tokens || fusion
    tokens] and the fusion-token update is the mean of the two branch
    updates. The joint vector is the mean of the final fusion tokens.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 layers: int = 6, fusion_layers: int = 3, bottleneck: int = 4):
        if bottleneck < 1:
            raise ConfigError(f"bottleneck length must be >= 1, got {bottleneck}")
        if fusion_layers > layers:
            raise ConfigError(f"fusion_layers {fusion_layers} > layers {layers}")
        d = cfg.model_dim
        self.cfg = cfg
        self.layers = layers
        self.fusion_layers = fusion_layers
        self.bottleneck = bottleneck
        self.blocks_a = [TransformerBlock(rng, d, cfg.heads, cfg.ff_dim, cfg.dropout)
                         for _ in range(layers)]
        self.blocks_b = [TransformerBlock(rng, d, cfg.heads, cfg.ff_dim, cfg.dropout)
                         for _ in range(layers)]
        self.fusion_tokens = Tensor(rng.normal(0.0, 0.02, size=(bottleneck, d)),
                                    requires_grad=True)
        self.final_ln = LayerNorm(d)
        self.pos_table = make_position_table(cfg.positional, d, rng)

    def _angles(self, positions: np.ndarray):
        if self.cfg.positional.kind != "rope":
            return None
        return rope_angles_for(positions, self.blocks_a[0].attn.head_dim,
                               self.cfg.positional)

    def forward(self, xa: Tensor, valid_a: np.ndarray, pos_a: np.ndarray,
                xb: Tensor, valid_b: np.ndarray, pos_b: np.ndarray,
                training: bool = False, rng=None) -> Tensor:
        batch = xa.shape[0]
        split = self.layers - self.fusion_layers
        mode = self.cfg.positional
        xa = apply_additive_positional(xa, valid_a, pos_a, mode, self.pos_table)
        xb = apply_additive_positional(xb, valid_b, pos_b, mode, self.pos_table)
        ang_a, ang_b = self._angles(pos_a), self._angles(pos_b)
        for layer in range(split):
            xa = self.blocks_a[layer](xa, valid_a, ang_a, training, rng)
            xb = self.blocks_b[layer](xb, valid_b, ang_b, training, rng)
        z = _tile_token(ad.reshape(self.fusion_tokens, (self.bottleneck * xa.shape[-1],)),
                        batch)
        z = ad.reshape(z, (batch, self.bottleneck, xa.shape[-1]))
        ones = np.ones((batch, self.bottleneck), dtype=bool)
        zeros = np.zeros((batch, self.bottleneck))
        va = np.concatenate([valid_a, ones], axis=1)
        vb = np.concatenate([valid_b, ones], axis=1)
        pa = np.concatenate([pos_a, zeros], axis=1)
        pb = np.concatenate([pos_b, zeros], axis=1)
        ta, tb = xa.shape[1], xb.shape[1]
        aa, ab = self._angles(pa), self._angles(pb)
        for layer in range(split, self.layers):
            ca = self.blocks_a[layer](ad.concat([xa, z], axis=1), va, aa, training, rng)
            cb = self.blocks_b[layer](ad.concat([xb, z], axis=1), vb, ab, training, rng)
            xa = ad.index(ca, (slice(None), slice(0, ta)))
            xb = ad.index(cb, (slice(None), slice(0, tb)))
            za = ad.index(ca, (slice(None), slice(ta, None)))
            zb = ad.index(cb, (slice(None), slice(tb, None)))
            z = (za + zb) * 0.5
        z = self.final_ln(z)
        return ad.tensor_mean(z, axis=1)

    def params(self) -> dict[str, Tensor]:
        out = {"fusion_tokens": self.fusion_tokens}
        for i, blk in enumerate(self.blocks_a):
            for k, v in blk.params().items():
                out[f"blocks_a.{i}.{k}"] = v
        for i, blk in enumerate(self.blocks_b):
            for k, v in blk.params().items():
                out[f"blocks_b.{i}.{k}"] = v
        for k, v in self.final_ln.params().items():
            out[f"final_ln.{k}"] = v
        if self.pos_table is not None:
            out["pos_table"] = self.pos_table
        return out


class _CoAttentionLayer:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.self_attn = MultiHeadAttention(rng, d, cfg.heads)
        self.cross_attn = MultiHeadAttention(rng, d, cfg.heads)
        self.ln_self = LayerNorm(d)
        self.ln_cross_q = LayerNorm(d)
        self.ln_cross_kv = LayerNorm(d)
        self.ln_ff = LayerNorm(d)
        self.ff1 = Linear(rng, d, cfg.ff_dim)
        self.ff2 = Linear(rng, cfg.ff_dim, d)

    def __call__(self, x: Tensor, own_valid, own_angles,
                 other: Tensor, other_valid, other_angles,
                 dropout: float, training, rng) -> Tensor:
        normed = self.ln_self(x)
        x = x + ad.dropout(self.self_attn(normed, normed, own_valid,
                                          own_angles, own_angles),
                           dropout, rng, training)
        x = x + ad.dropout(self.cross_attn(self.ln_cross_q(x), self.ln_cross_kv(other),
                                           other_valid, own_angles, other_angles),
                           dropout, rng, training)
        return x + ad.dropout(self.ff2(ad.gelu(self.ff1(self.ln_ff(x)))),
                              dropout, rng, training)

    def params(self) -> dict[str, Tensor]:
        out = {}
        mods = {"self_attn": self.self_attn, "cross_attn": self.cross_attn,
                "ln_self": self.ln_self, "ln_cross_q": self.ln_cross_q,
                "ln_cross_kv": self.ln_cross_kv, "ln_ff": self.ln_ff,
                "ff1": self.ff1, "ff2": self.ff2}
        for name, mod in mods.items():
            for k, v in mod.params().items():
                out[f"{name}.{k}"] = v
        return out


class MeterFusion:
    """Dual co-attention stacks; each branch cross-attends to the other.

    Branch tokens are [branch CLS || slots]; after the stacks, the two
    CLS outputs are concatenated and mapped by a perceptron head.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, layers: int = 2):
        d = cfg.model_dim
        self.cfg = cfg
        self.layers_a = [_CoAttentionLayer(cfg, rng) for _ in range(layers)]
        self.layers_b = [_CoAttentionLayer(cfg, rng) for _ in range(layers)]
        self.cls_a = Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True)
        self.cls_b = Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True)
        self.final_ln_a = LayerNorm(d)
        self.final_ln_b = LayerNorm(d)
        self.head1 = Linear(rng, 2 * d, d)
        self.head2 = Linear(rng, d, d)
        self.pos_table = make_position_table(cfg.positional, d, rng)

    def branch_cls_outputs(self, xa: Tensor, valid_a, pos_a,
                           xb: Tensor, valid_b, pos_b,
                           training: bool = False, rng=None) -> tuple:
        batch, d = xa.shape[0], xa.shape[-1]
        xa = ad.concat([_tile_token(self.cls_a, batch), xa], axis=1)
        xb = ad.concat([_tile_token(self.cls_b, batch), xb], axis=1)
        cls_col = np.ones((batch, 1), dtype=bool)
        zero_col = np.zeros((batch, 1))
        va = np.concatenate([cls_col, valid_a], axis=1)
        vb = np.concatenate([cls_col, valid_b], axis=1)
        pa = np.concatenate([zero_col, pos_a], axis=1)
        pb = np.concatenate([zero_col, pos_b], axis=1)
        mode = self.cfg.positional
        xa = apply_additive_positional(xa, va, pa, mode, self.pos_table)
        xb = apply_additive_positional(xb, vb, pb, mode, self.pos_table)
        aa = ab = None
        if self.cfg.positional.kind == "rope":
            head_dim = self.layers_a[0].self_attn.head_dim
            aa = rope_angles_for(pa, head_dim, self.cfg.positional)
            ab = rope_angles_for(pb, head_dim, self.cfg.positional)
        drop = self.cfg.dropout
        for lay_a, lay_b in zip(self.layers_a, self.layers_b):
            na = lay_a(xa, va, aa, xb, vb, ab, drop, training, rng)
            nb = lay_b(xb, vb, ab, xa, va, aa, drop, training, rng)
            xa, xb = na, nb
        ca = ad.reshape(ad.index(self.final_ln_a(xa),
                                 (slice(None), slice(0, 1))), (batch, d))
        cb = ad.reshape(ad.index(self.final_ln_b(xb),
                                 (slice(None), slice(0, 1))), (batch, d))
        return ca, cb

    def forward(self, xa: Tensor, valid_a, pos_a, xb: Tensor, valid_b, pos_b,
                training: bool = False, rng=None) -> Tensor:
        ca, cb = self.branch_cls_outputs(xa, valid_a, pos_a, xb, valid_b, pos_b,
                                         training, rng)
        return self.head2(ad.gelu(self.head1(ad.concat([ca, cb], axis=1))))

    def params(self) -> dict[str, Tensor]:
        out = {"cls_a": self.cls_a, "cls_b": self.cls_b}
        for i, lay in enumerate(self.layers_a):
            for k, v in lay.params().items():
                out[f"layers_a.{i}.{k}"] = v
        for i, lay in enumerate(self.layers_b):
            for k, v in lay.params().items():
                out[f"layers_b.{i}.{k}"] = v
        for name, mod in (("final_ln_a", self.final_ln_a),
                          ("final_ln_b", self.final_ln_b),
                          ("head1", self.head1), ("head2", self.head2)):
            for k, v in mod.params().items():
                out[f"{name}.{k}"] = v
        if self.pos_table is not None:
            out["pos_table"] = self.pos_table
        return out


class ConcatMlpFusion:
    def __init__(self, rng: np.random.Generator, dim_a: int, dim_b: int,
                 hidden: Optional[int] = None, out_dim: Optional[int] = None):
        hidden = hidden or (dim_a + dim_b)
        out_dim = out_dim or dim_a
        std1 = np.sqrt(2.0 / (dim_a + dim_b + hidden))
        std2 = np.sqrt(2.0 / (hidden + out_dim))
        self.w1 = Tensor(rng.normal(0.0, std1, size=(dim_a + dim_b, hidden)),
                         requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, std2, size=(hidden, out_dim)),
                         requires_grad=True)

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        cat = ad.concat([x1, x2], axis=-1)
        return ad.matmul(ad.sigmoid(ad.matmul(cat, self.w1)), self.w2)

    def params(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "w2": self.w2}


class BlockFusion:
    def __init__(self, rng: np.random.Generator, dim_a: int, dim_b: int,
                 rank_l: int = 8, rank_m: int = 8, core_n: int = 8,
                 out_dim: Optional[int] = None):
        out_dim = out_dim or dim_a
        self.a = Tensor(rng.normal(0.0, np.sqrt(2.0 / (dim_a + rank_l)),
                                   size=(dim_a, rank_l)), requires_grad=True)
        self.b = Tensor(rng.normal(0.0, np.sqrt(2.0 / (dim_b + rank_m)),
                                   size=(dim_b, rank_m)), requires_grad=True)
        self.core = Tensor(rng.normal(0.0, 1.0 / np.sqrt(rank_l * rank_m),
                                      size=(rank_l, rank_m, core_n)), requires_grad=True)
        self.c = Tensor(rng.normal(0.0, np.sqrt(2.0 / (core_n + out_dim)),
                                   size=(out_dim, core_n)), requires_grad=True)

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        batch = x1.shape[0]
        rank_l, rank_m, rank_n = self.core.shape
        u = ad.matmul(x1, self.a)
        v = ad.matmul(x2, self.b)
        flat = ad.reshape(self.core, (rank_l, rank_m * rank_n))
        mixed = ad.reshape(ad.matmul(u, flat), (batch, rank_m, rank_n))
        w = ad.reshape(ad.matmul(ad.reshape(v, (batch, 1, rank_m)), mixed),
                       (batch, rank_n))
        return ad.matmul(w, ad.transpose(self.c, (1, 0)))

    def params(self) -> dict[str, Tensor]:
        return {"a": self.a, "b": self.b, "core": self.core, "c": self.c}


# ---------------------------------------------------------------------------
# single-sample wrappers over the batched heads
# ---------------------------------------------------------------------------

def _pack_pair(image_seq: EmbeddingSequence, text_seq: EmbeddingSequence):
    if image_seq.dim != text_seq.dim:
        raise ShapeError(f"modality dims differ: {image_seq.dim} vs {text_seq.dim}")
    xa = ad.reshape(image_seq.data, (1,) + tuple(image_seq.data.shape))
    xb = ad.reshape(text_seq.data, (1,) + tuple(text_seq.data.shape))
    va = image_seq.valid[None, :]
    vb = text_seq.valid[None, :]
    pa = np.asarray(image_seq.offsets_norm)[None, :]
    pb = np.asarray(text_seq.offsets_norm)[None, :]
    return xa, va, pa, xb, vb, pb


def fuse_vilt(image_seq: EmbeddingSequence, text_seq: EmbeddingSequence,
              cls: Tensor, cfg: EncoderConfig,
              fusion: Optional[ViltFusion] = None,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Early fusion of one sample's sequences; returns the joint vector."""
    xa, va, pa, xb, vb, pb = _pack_pair(image_seq, text_seq)
    if fusion is None:
        fusion = ViltFusion(cfg, rng or np.random.default_rng(0))
    tokens = ad.concat([ad.reshape(cls, (1, 1, cls.shape[-1])), xa, xb], axis=1)
    valid = np.concatenate([np.ones((1, 1), dtype=bool), va, vb], axis=1)
    positions = np.concatenate([np.zeros((1, 1)), pa, pb], axis=1)
    joint = fusion.forward(tokens, valid, positions)
    return ad.reshape(joint, (cls.shape[-1],))


def fuse_mbt(image_seq: EmbeddingSequence, text_seq: EmbeddingSequence,
             cfg: EncoderConfig, fusion: Optional[MbtFusion] = None,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    xa, va, pa, xb, vb, pb = _pack_pair(image_seq, text_seq)
    if fusion is None:
        fusion = MbtFusion(cfg, rng or np.random.default_rng(0))
    joint = fusion.forward(xa, va, pa, xb, vb, pb)
    return ad.reshape(joint, (image_seq.dim,))


def fuse_meter(image_seq: EmbeddingSequence, text_seq: EmbeddingSequence,
               cfg: EncoderConfig, fusion: Optional[MeterFusion] = None,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    xa, va, pa, xb, vb, pb = _pack_pair(image_seq, text_seq)
    if fusion is None:
        fusion = MeterFusion(cfg, rng or np.random.default_rng(0))
    joint = fusion.forward(xa, va, pa, xb, vb, pb)
    return ad.reshape(joint, (image_seq.dim,))


# ---------------------------------------------------------------------------
# FLOP accounting (forward multiply-adds, counted as 2 FLOPs each)
# ---------------------------------------------------------------------------

def _attn_flops(t_q: int, t_k: int, d: int) -> float:
    proj = 2.0 * (t_q + 2 * t_k) * d * d + 2.0 * t_q * d * d
    scores = 2.0 * t_q * t_k * d * 2
    return proj + scores


def _block_flops(t: int, d: int, ff: int) -> float:
    return _attn_flops(t, t, d) + 2.0 * 2 * t * d * ff


def fusion_flops(method: str, k_images: int, k_text: int, dim: int, ff_dim: int,
                 tst_layers: int = 2, num_labels: int = 13,
                 store_dim: Optional[int] = None, vilt_layers: int = 1,
                 mbt_layers: int = 6, mbt_bottleneck: int = 4,
                 meter_layers: int = 2, concat_hidden: Optional[int] = None,
                 block_rank: int = 8, block_core: int = 8) -> dict[str, float]:
    """Analytic forward-FLOP estimate split into fusion head vs total.

    The boundary matters: the fusion figure covers only the layers where
    modalities interact; the total adds per-modality encoders, input
    adapters, and the classifier.
    """
    if method not in FUSION_METHODS:
        raise ConfigError(f"unknown fusion method {method!r}")
    store_dim = store_dim or dim
    t_img, t_txt = k_images, k_text
    t_all = 1 + t_img + t_txt
    adapters = 2.0 * (t_img + t_txt) * store_dim * dim
    classifier = 2.0 * dim * num_labels
    per_modality_tst = tst_layers * (_block_flops(1 + t_img, dim, ff_dim)
                                     + _block_flops(1 + t_txt, dim, ff_dim))

    if method == "vilt":
        fusion = vilt_layers * _block_flops(t_all, dim, ff_dim)
        total = adapters + fusion + classifier
    elif method == "mbt":
        split = mbt_layers - 3
        solo = split * (_block_flops(t_img, dim, ff_dim)
                        + _block_flops(t_txt, dim, ff_dim))
        fused = 3 * (_block_flops(t_img + mbt_bottleneck, dim, ff_dim)
                     + _block_flops(t_txt + mbt_bottleneck, dim, ff_dim))
        fusion = solo + fused
        total = adapters + fusion + classifier
    elif method == "meter":
        per_layer = (_block_flops(1 + t_img, dim, ff_dim)
                     + _block_flops(1 + t_txt, dim, ff_dim)
                     + _attn_flops(1 + t_img, 1 + t_txt, dim)
                     + _attn_flops(1 + t_txt, 1 + t_img, dim))
        fusion = meter_layers * per_layer + 2.0 * (2 * dim) * dim + 2.0 * dim * dim
        total = adapters + fusion + classifier
    elif method == "concat_mlp":
        hidden = concat_hidden or 2 * dim
        fusion = 2.0 * (2 * dim) * hidden + 2.0 * hidden * dim
        total = adapters + per_modality_tst + fusion + classifier
    elif method == "block":
        fusion = (2.0 * dim * block_rank * 2
                  + 2.0 * block_rank * block_rank * block_core
                  + 2.0 * block_rank * block_core + 2.0 * block_core * dim)
        total = adapters + per_modality_tst + fusion + classifier
    else:  # ensemble
        fusion = float(num_labels)
        total = adapters + per_modality_tst + fusion + 2.0 * classifier
    return {"fusion_flops": float(fusion), "total_flops": float(total)}
