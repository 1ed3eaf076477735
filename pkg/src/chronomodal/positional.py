"""Positional signals for time-series slots.

Raw chart-time offsets (hours before the anchor study, anchor = 0) are
min-max normalized into [0, 1]; the four positional modes (none,
sine-cosine, learnable, rotary) turn those normalized offsets into
signals the sequence encoder consumes. Rotary encoding rotates
query/key pairs inside attention so inner products depend only on
position differences; the additive modes act on the token inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError

MODES = ("none", "sincos", "learnable", "rope")

# Normalized offsets span [0, 1]; scaling by 49 gives them the angular
# range of a 50-slot integer position sequence.
DEFAULT_ROPE_BASE = 10000.0
DEFAULT_POSITION_SCALE = 49.0


@dataclass
class PositionalMode:
    """Which positional signal to use and its knobs."""

    kind: str = "rope"
    dim: int = 64
    rope_base: float = DEFAULT_ROPE_BASE
    position_scale: float = DEFAULT_POSITION_SCALE

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown positional mode {self.kind!r}; pick one of {MODES}")
        if self.kind in ("rope", "sincos") and self.dim % 2 != 0:
            raise ConfigError(f"mode {self.kind!r} needs an even dimension, got {self.dim}")


def normalize_offsets(offsets: Sequence[float]) -> list[float]:
    """Min-max normalize offsets into [0, 1].

    The smallest offset maps to 0 and the largest to 1. When all offsets
    coincide (single timestamp) the output is all zeros: the division
    degenerates there, and 0 anchors the sequence at "most recent".
    """
    arr = np.asarray(list(offsets), dtype=np.float64)
    if arr.size == 0:
        raise ContractError("cannot normalize an empty offset list")
    if not np.all(np.isfinite(arr)):
        raise NumericError("offsets must be finite")
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return [0.0] * arr.size
    return list((arr - lo) / (hi - lo))


def _pair_angles(positions: np.ndarray, d: int, base: float, scale: float) -> np.ndarray:
    """Angles theta_j * p for each position p and pair j, shape (..., d/2)."""
    j = np.arange(d // 2, dtype=np.float64)
    theta = base ** (-2.0 * j / d)
    return (positions * scale)[..., None] * theta


def rope_apply(x: Tensor, positions: Sequence[float], base: float = DEFAULT_ROPE_BASE,
               scale: float = 1.0) -> Tensor:
    """Rotate each feature pair of x by its position-dependent angle.

    Row k of x is rotated pairwise by theta_j * positions[k] * scale with
    theta_j = base^(-2j/d). Pair norms are preserved exactly, and the
    inner product of two rotated vectors depends only on the difference
    of their positions.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise ConfigError(f"rotary encoding needs even dimension, got {d}")
    pos = np.asarray(list(positions), dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        raise NumericError("positions must be finite")
    angles = _pair_angles(pos, d, base, scale)
    return ad.rotate_pairs(x, angles)


def sincos_table(positions: Sequence[float], d: int, base: float = DEFAULT_ROPE_BASE,
                 scale: float = 1.0) -> Tensor:
    """Interleaved [sin, cos] table, one row per position.

    Row entries are sin(theta_j p) at even indices and cos(theta_j p)
    at odd ones, added to token inputs by positional_apply.
    """
    if d % 2 != 0:
        raise ConfigError(f"sine-cosine encoding needs even dimension, got {d}")
    pos = np.asarray(list(positions), dtype=np.float64)
    angles = _pair_angles(pos, d, base, scale)
    table = np.empty(pos.shape + (d,), dtype=np.float64)
    table[..., 0::2] = np.sin(angles)
    table[..., 1::2] = np.cos(angles)
    return Tensor(table)


def positional_apply(mode: PositionalMode, seq: Tensor, positions: Sequence[float],
                     learned_table: Optional[Tensor] = None) -> Tensor:
    """Apply an additive positional signal to a K x d token sequence.

    none -> identity; sincos -> seq + table(positions); learnable ->
    seq + learned_table rows indexed by integer slot. Rotary encoding is
    multiplicative and lives inside attention (rope_apply on the query
    and key projections), so here it is a no-op on token inputs.
    """
    if mode.kind in ("none", "rope"):
        return seq
    if mode.kind == "sincos":
        return seq + sincos_table(positions, seq.shape[-1], mode.rope_base,
                                  mode.position_scale)
    if mode.kind == "learnable":
        if learned_table is None:
            raise ConfigError("learnable positional mode requires a learned table")
        idx = np.asarray(list(positions))
        slots = idx.astype(np.int64)
        if not np.array_equal(idx, slots):
            raise ContractError("learnable mode expects integer slot positions")
        if slots.size and slots.max() >= learned_table.shape[0]:
            raise ConfigError(
                f"slot {int(slots.max())} outside learned table of "
                f"length {learned_table.shape[0]}")
        rows = ad.index(learned_table, (slots,))
        return seq + rows
    raise ConfigError(f"unknown positional mode {mode.kind!r}")
