"""Offset normalization and the four positional-signal modes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronomodal import autodiff as ad
from chronomodal.autodiff import Tensor
from chronomodal.encoder import MultiHeadAttention, rope_angles_for
from chronomodal.errors import ConfigError, ContractError, NumericError
from chronomodal.positional import (PositionalMode, normalize_offsets,
                                    positional_apply, rope_apply, sincos_table)

RNG = np.random.default_rng(7)


# ---------------------------------------------------------------------------
# normalize_offsets
# ---------------------------------------------------------------------------

def test_normalize_endpoints():
    assert normalize_offsets([0.0, 5.0, 10.0]) == [0.0, 0.5, 1.0]


def test_normalize_degenerate_single():
    assert normalize_offsets([7.0]) == [0.0]


def test_normalize_duplicate_minimum():
    assert normalize_offsets([3.0, 3.0, 9.0]) == [0.0, 0.0, 1.0]


def test_normalize_empty_rejected():
    with pytest.raises(ContractError):
        normalize_offsets([])


def test_normalize_nonfinite_rejected():
    with pytest.raises(NumericError):
        normalize_offsets([0.0, np.inf])


@given(st.lists(st.floats(min_value=0.0, max_value=1e6, allow_nan=False),
                min_size=2, max_size=20))
@settings(max_examples=100, deadline=None)
def test_normalize_idempotent_on_unit_range(offsets):
    normed = normalize_offsets(offsets)
    assert all(0.0 <= v <= 1.0 for v in normed)
    if max(offsets) > min(offsets):
        # output already spans [0, 1], so a second pass is a fixed point
        assert normalize_offsets(normed) == pytest.approx(normed, abs=1e-12)


# ---------------------------------------------------------------------------
# rotary encoding
# ---------------------------------------------------------------------------

def test_rope_zero_position_is_identity():
    x = Tensor(RNG.normal(size=(1, 8)))
    out = rope_apply(x, [0.0])
    assert np.array_equal(out.data, x.data)


def test_rope_quarter_turn():
    # d=2 has theta_0 = 1, so position pi/2 rotates (1,0) onto (0,1)
    out = rope_apply(Tensor([[1.0, 0.0]]), [np.pi / 2])
    assert np.allclose(out.data, [[0.0, 1.0]], atol=1e-12)


def test_rope_odd_dimension_rejected():
    with pytest.raises(ConfigError):
        rope_apply(Tensor(RNG.normal(size=(1, 3))), [1.0])


def test_rope_relative_shift_invariance():
    d = 16
    for _ in range(200):
        q = RNG.normal(size=d)
        k = RNG.normal(size=d)
        p1, p2, delta = RNG.uniform(0, 50, size=3)
        lhs = np.dot(rope_apply(Tensor(q[None]), [p1]).data[0],
                     rope_apply(Tensor(k[None]), [p2]).data[0])
        rhs = np.dot(rope_apply(Tensor(q[None]), [p1 + delta]).data[0],
                     rope_apply(Tensor(k[None]), [p2 + delta]).data[0])
        assert abs(lhs - rhs) < 1e-9


def test_rope_preserves_pair_norms():
    for _ in range(200):
        x = RNG.normal(size=(3, 12))
        pos = RNG.uniform(0, 100, size=3)
        out = rope_apply(Tensor(x), pos).data
        before = x.reshape(3, 6, 2)
        after = out.reshape(3, 6, 2)
        assert np.allclose(np.linalg.norm(before, axis=-1),
                           np.linalg.norm(after, axis=-1), atol=1e-12)


# ---------------------------------------------------------------------------
# sine-cosine table
# ---------------------------------------------------------------------------

def test_sincos_zero_position_row():
    row = sincos_table([0.0], 6).data[0]
    assert np.array_equal(row, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])


def test_sincos_unit_circle_pairs():
    table = sincos_table(RNG.uniform(0, 10, size=5), 8).data
    sin = table[:, 0::2]
    cos = table[:, 1::2]
    assert np.all(np.abs(sin ** 2 + cos ** 2 - 1.0) <= 1e-12)


def test_sincos_equal_positions_identical_rows():
    table = sincos_table([3.7, 3.7], 8).data
    assert np.array_equal(table[0], table[1])


def test_sincos_odd_dimension_rejected():
    with pytest.raises(ConfigError):
        sincos_table([0.0], 5)


# ---------------------------------------------------------------------------
# positional_apply dispatch
# ---------------------------------------------------------------------------

def test_apply_none_is_bitwise_identity():
    mode = PositionalMode(kind="none", dim=6)
    x = Tensor(RNG.normal(size=(4, 6)))
    out = positional_apply(mode, x, [0.0, 0.1, 0.2, 0.3])
    assert out.data is x.data or np.array_equal(out.data, x.data)


def test_apply_sincos_on_zero_input_equals_table():
    mode = PositionalMode(kind="sincos", dim=6)
    positions = [0.0, 0.5, 1.0]
    out = positional_apply(mode, Tensor(np.zeros((3, 6))), positions)
    expected = sincos_table(positions, 6, mode.rope_base, mode.position_scale)
    assert np.array_equal(out.data, expected.data)


def test_apply_learnable_requires_table():
    mode = PositionalMode(kind="learnable", dim=6)
    with pytest.raises(ConfigError):
        positional_apply(mode, Tensor(np.zeros((2, 6))), [0, 1])


def test_apply_learnable_adds_indexed_rows():
    mode = PositionalMode(kind="learnable", dim=4)
    table = Tensor(RNG.normal(size=(10, 4)))
    x = Tensor(np.zeros((3, 4)))
    out = positional_apply(mode, x, [0, 2, 5], table)
    assert np.array_equal(out.data, table.data[[0, 2, 5]])


def test_apply_learnable_out_of_table_rejected():
    mode = PositionalMode(kind="learnable", dim=4)
    table = Tensor(RNG.normal(size=(3, 4)))
    with pytest.raises(ConfigError):
        positional_apply(mode, Tensor(np.zeros((1, 4))), [7], table)


def test_rope_changes_scores_not_values():
    # a single self-attending token: q and k rotate by the same angle so
    # the sole attention weight stays 1 and the value path is untouched
    attn = MultiHeadAttention(np.random.default_rng(0), dim=8, heads=2)
    mode = PositionalMode(kind="rope", dim=8, position_scale=1.0)
    x = Tensor(RNG.normal(size=(1, 1, 8)))
    valid = np.ones((1, 1), dtype=bool)
    angles = rope_angles_for(np.array([[3.0]]), attn.head_dim, mode)
    plain = attn(x, x, valid)
    rotated = attn(x, x, valid, angles, angles)
    assert np.allclose(plain.data, rotated.data, atol=1e-12)

    # two tokens at distinct positions: scores change, so outputs differ
    x2 = Tensor(RNG.normal(size=(1, 2, 8)))
    valid2 = np.ones((1, 2), dtype=bool)
    angles2 = rope_angles_for(np.array([[0.0, 2.0]]), attn.head_dim, mode)
    plain2 = attn(x2, x2, valid2)
    rotated2 = attn(x2, x2, valid2, angles2, angles2)
    assert not np.allclose(plain2.data, rotated2.data)


def test_rope_even_dim_enforced_in_mode():
    with pytest.raises(ConfigError):
        PositionalMode(kind="rope", dim=5)
