"""Sequence assembly, masked attention soundness, and pooling."""

import numpy as np
import pytest

from chronomodal import autodiff as ad
from chronomodal.autodiff import Tensor
from chronomodal.encoder import (EmbeddingSequence, EncoderConfig,
                                 MultiHeadAttention, TimeSeriesEncoder,
                                 assemble_sequence, mean_pool, tst_encode)
from chronomodal.errors import ShapeError
from chronomodal.positional import PositionalMode

RNG = np.random.default_rng(99)


def cfg_with(kind="rope", layers=2, dim=8, heads=2, pooling="tst"):
    return EncoderConfig(layers=layers, heads=heads, model_dim=dim, ff_dim=4 * dim,
                         dropout=0.0, pooling=pooling,
                         positional=PositionalMode(kind=kind, dim=dim,
                                                   position_scale=4.0))


def seq_of(vectors, offsets, k, dim, modality="text"):
    token = Tensor(np.zeros(dim))
    return assemble_sequence(list(zip(vectors, offsets)), k, modality, token)


# ---------------------------------------------------------------------------
# assemble_sequence
# ---------------------------------------------------------------------------

def test_assemble_pads_tail():
    vecs = [RNG.normal(size=4) for _ in range(3)]
    seq = seq_of(vecs, [1.0, 0.5, 0.0], k=50, dim=4)
    assert seq.valid.sum() == 3
    assert not seq.valid[3:].any()
    assert np.array_equal(seq.data.data[3:], np.zeros((47, 4)))
    assert np.array_equal(seq.data.data[:3], np.stack(vecs))


def test_assemble_truncates_to_most_recent():
    vecs = [np.full(4, float(i)) for i in range(60)]
    offsets = list(np.linspace(1, 0, 60))
    seq = seq_of(vecs, offsets, k=50, dim=4)
    assert seq.valid.all()
    # oldest ten dropped: slot 0 now holds entry 10
    assert np.array_equal(seq.data.data[0], np.full(4, 10.0))
    assert np.array_equal(seq.data.data[-1], np.full(4, 59.0))


def test_assemble_empty_history_is_legal():
    seq = seq_of([], [], k=50, dim=4)
    assert not seq.valid.any()
    assert np.array_equal(seq.data.data, np.zeros((50, 4)))


def test_assemble_dim_mismatch_rejected():
    with pytest.raises(ShapeError):
        seq_of([np.zeros(5)], [0.0], k=4, dim=4)


def test_assemble_adds_modality_token_to_valid_slots_only():
    token = Tensor(np.full(4, 2.0))
    seq = assemble_sequence([(np.ones(4), 0.0)], 3, "image", token)
    assert np.array_equal(seq.data.data[0], np.full(4, 3.0))
    assert np.array_equal(seq.data.data[1:], np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# mean_pool
# ---------------------------------------------------------------------------

def test_mean_pool_single_slot():
    v = RNG.normal(size=4)
    assert np.allclose(mean_pool(seq_of([v], [0.0], 8, 4)).data, v)


def test_mean_pool_average():
    seq = seq_of([np.array([1.0, 0.0]), np.array([3.0, 2.0])], [1.0, 0.0], 8, 2)
    assert np.array_equal(mean_pool(seq).data, [2.0, 1.0])


def test_mean_pool_empty_is_zero():
    assert np.array_equal(mean_pool(seq_of([], [], 8, 4)).data, np.zeros(4))


# ---------------------------------------------------------------------------
# attention oracle: hand computation with hand-set weights
# ---------------------------------------------------------------------------

def test_attention_matches_hand_computation():
    attn = MultiHeadAttention(np.random.default_rng(3), dim=2, heads=1)
    wq = np.array([[1.0, 0.0], [0.0, 1.0]])
    wk = np.array([[0.5, 0.0], [0.0, 0.5]])
    wv = np.array([[1.0, 2.0], [3.0, 4.0]])
    wo = np.array([[1.0, 0.0], [0.0, 1.0]])
    attn.wq.w.data, attn.wk.w.data = wq.copy(), wk.copy()
    attn.wv.w.data, attn.wo.w.data = wv.copy(), wo.copy()
    for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
        lin.b.data = np.zeros(2)
    x = np.array([[0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]])
    out = attn(Tensor(x[None]), Tensor(x[None]), np.ones((1, 3), dtype=bool))

    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.T / np.sqrt(2.0)
    weights = np.exp(scores - scores.max(-1, keepdims=True))
    weights /= weights.sum(-1, keepdims=True)
    expected = (weights @ v) @ wo
    assert np.allclose(out.data[0], expected, atol=1e-10)


def test_attention_masked_keys_get_zero_weight():
    attn = MultiHeadAttention(np.random.default_rng(3), dim=4, heads=2)
    x = RNG.normal(size=(1, 3, 4))
    valid = np.array([[True, True, False]])
    base = attn(Tensor(x), Tensor(x), valid).data
    poisoned = x.copy()
    poisoned[0, 2] = 1e3  # garbage in the masked slot
    again = attn(Tensor(poisoned), Tensor(poisoned), valid).data
    # rows 0/1 never see slot 2; row 2's own output is garbage by design
    assert np.array_equal(base[0, :2], again[0, :2])


# ---------------------------------------------------------------------------
# tst_encode contracts
# ---------------------------------------------------------------------------

def encode_once(seqs, cfg, seed=0):
    enc = TimeSeriesEncoder(cfg, np.random.default_rng(seed))
    cls = Tensor(np.linspace(-1, 1, cfg.model_dim), requires_grad=True)
    return tst_encode(seqs, cls, cfg, encoder=enc)


def test_all_invalid_history_depends_only_on_cls():
    cfg = cfg_with()
    dim = cfg.model_dim
    empty_a = seq_of([], [], 5, dim)
    empty_b = seq_of([], [], 5, dim)
    # scribble forbidden values, then restore through the public rezero
    empty_b.data.data[2] = 123.0
    empty_b = empty_b.rezero()
    out_a, _ = encode_once([empty_a], cfg)
    out_b, _ = encode_once([empty_b], cfg)
    assert np.array_equal(out_a.data, out_b.data)


def test_garbage_in_invalid_slots_is_bitwise_invariant():
    cfg = cfg_with()
    dim = cfg.model_dim
    vecs = [RNG.normal(size=dim) for _ in range(3)]
    offs = [1.0, 0.4, 0.0]
    seq1 = seq_of(vecs, offs, 10, dim)
    seq2 = seq_of(vecs, offs, 10, dim)
    seq1.data.data[5] = 777.0
    seq2.data.data[5] = -3.5
    out1, _ = encode_once([seq1.rezero()], cfg)
    out2, _ = encode_once([seq2.rezero()], cfg)
    assert np.array_equal(out1.data, out2.data)


@pytest.mark.parametrize("kind", ["none", "sincos", "learnable", "rope"])
@pytest.mark.parametrize("pooling", ["tst", "mean"])
def test_padding_invariance_k10_vs_k50(kind, pooling):
    cfg = cfg_with(kind=kind, pooling=pooling)
    dim = cfg.model_dim
    vecs = [RNG.normal(size=dim) for _ in range(3)]
    offs = [1.0, 0.4, 0.0]
    out10, _ = encode_once([seq_of(vecs, offs, 10, dim)], cfg)
    out50, _ = encode_once([seq_of(vecs, offs, 50, dim)], cfg)
    assert np.allclose(out10.data, out50.data, atol=1e-6)


def test_encoder_zero_layers_passthrough_mean_pool():
    # layers=0 leaves tokens untouched up to the final norm, so mean
    # pooling the raw sequence equals the degenerate encoder config
    cfg = cfg_with(layers=0)
    dim = cfg.model_dim
    vecs = [RNG.normal(size=dim) for _ in range(2)]
    seq = seq_of(vecs, [1.0, 0.0], 6, dim)
    assert np.allclose(mean_pool(seq).data, np.stack(vecs).mean(0))


def test_mode_none_permutation_equivariant_rope_not():
    # shuffle the vectors across slots while the offset sequence stays
    # put: without positions the output cannot notice, with rotary
    # positions the reassigned rotation angles must change it
    dim = 8
    vecs = [RNG.normal(size=dim) for _ in range(4)]
    offs = [1.0, 0.6, 0.3, 0.0]
    perm = [2, 0, 3, 1]
    for kind, expect_equal in (("none", True), ("rope", False)):
        cfg = cfg_with(kind=kind, layers=1)
        out, _ = encode_once([seq_of(vecs, offs, 4, dim)], cfg)
        out_p, _ = encode_once([seq_of([vecs[i] for i in perm], offs, 4, dim)], cfg)
        close = np.allclose(out.data, out_p.data, atol=1e-9)
        assert close == expect_equal, f"mode {kind}"


def test_tst_encode_gradients_flow_to_cls():
    cfg = cfg_with(layers=1)
    dim = cfg.model_dim
    enc = TimeSeriesEncoder(cfg, np.random.default_rng(1))
    seq = seq_of([RNG.normal(size=dim)], [0.0], 4, dim)
    coeff = Tensor(RNG.normal(size=dim))

    def f(cls):
        out, _ = tst_encode([seq], cls, cfg, encoder=enc)
        return ad.tensor_sum(out * coeff)

    err = ad.gradient_check(f, Tensor(RNG.normal(size=dim), requires_grad=True))
    assert err < 1e-4
