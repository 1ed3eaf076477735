"""Model wiring: batch assembly, masking at the logit level, gradients."""

import numpy as np
import pytest

from chronomodal import autodiff as ad
from chronomodal.autodiff import Tape, Tensor, backward, gradient_check
from chronomodal.errors import ConfigError
from chronomodal.fusion import FUSION_METHODS
from chronomodal.model import (Batch, DiagnosisModel, ModelConfig,
                               assemble_batch, filter_history)
from chronomodal.pipeline import build_samples, dedup_filter, sort_samples
from chronomodal.store import MODALITY_IMAGE, MODALITY_TEXT, EmbeddingStore
from chronomodal.synth import SyntheticSpec, synth_cohort
from chronomodal.training import bce_multilabel

RNG = np.random.default_rng(808)
POSITIONAL_MODES = ("rope", "sincos", "learnable", "none")


def cohort(n_subjects=12, signal="history_text_recent", dim=6, labels=2,
           seed=0, min_visits=2, max_visits=4):
    spec = SyntheticSpec(n_subjects=n_subjects, signal=signal, min_visits=min_visits,
                         max_visits=max_visits, dim=dim, label_count=labels)
    records, store = synth_cohort(spec, seed)
    samples = sort_samples(dedup_filter(build_samples(records), records))
    return spec, store, samples


def small_cfg(spec, **kw):
    base = dict(store_dim=spec.dim, labels=spec.labels, model_dim=8, heads=2,
                layers=1, dropout=0.0, k_text=3, position_scale=4.0)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def test_assemble_batch_shapes_and_masks():
    spec, store, samples = cohort()
    cfg = small_cfg(spec)
    batch = assemble_batch(samples[:4], store, cfg)
    assert batch.image_data.shape == (4, 1, spec.dim)
    assert batch.text_data.shape == (4, 3, spec.dim)
    assert batch.image_valid.all()   # anchor scan always present
    assert batch.targets.shape == (4, 2)


def test_assemble_batch_normalizes_offsets_per_sample():
    spec, store, samples = cohort()
    cfg = small_cfg(spec)
    rich = [s for s in samples if len(s.history_reports) >= 2][0]
    batch = assemble_batch([rich], store, cfg)
    valid_pos = batch.text_pos[0][batch.text_valid[0]]
    assert valid_pos.max() <= 1.0
    assert valid_pos.min() >= 0.0
    # oldest kept report has the largest normalized offset
    assert valid_pos[0] == valid_pos.max()


def test_filter_history_window_then_count():
    reports = [("a", 100.0), ("b", 50.0), ("c", 10.0), ("d", 1.0)]
    assert filter_history(reports, None, 2.0) == [("c", 10.0), ("d", 1.0)]
    assert filter_history(reports, None, 0.25) == [("d", 1.0)]
    assert filter_history(reports, 2, None) == [("c", 10.0), ("d", 1.0)]
    assert filter_history(reports, 0, None) == []
    assert filter_history(reports, None, None) == reports


def test_num_reports_zero_equals_image_only_inputs():
    spec, store, samples = cohort()
    cfg = small_cfg(spec, num_reports=0)
    batch = assemble_batch(samples[:6], store, cfg)
    assert not batch.text_valid.any()


# ---------------------------------------------------------------------------
# forward contracts
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("fusion", FUSION_METHODS)
def test_forward_shapes_all_fusions(fusion):
    spec, store, samples = cohort()
    cfg = small_cfg(spec, fusion=fusion)
    model = DiagnosisModel(cfg, seed=1)
    logits = model.forward(assemble_batch(samples[:5], store, cfg))
    assert logits.shape == (5, 2)


@pytest.mark.parametrize("fusion", ["vilt", "mbt", "meter", "concat_mlp",
                                    "block", "ensemble"])
def test_padding_invariance_at_logit_level(fusion):
    spec, store, samples = cohort()
    rich = [s for s in samples if len(s.history_reports) == 3][:2]
    assert rich, "need samples with exactly 3 history reports"
    logits = {}
    for k_text in (10, 50):
        cfg = small_cfg(spec, fusion=fusion, k_text=k_text)
        model = DiagnosisModel(cfg, seed=2)
        logits[k_text] = model.forward(assemble_batch(rich, store, cfg)).data
    assert np.allclose(logits[10], logits[50], atol=1e-6)


def test_garbage_in_invalid_slots_leaves_logits_bitwise_equal():
    spec, store, samples = cohort()
    cfg = small_cfg(spec, k_text=6)
    model = DiagnosisModel(cfg, seed=3)
    batch = assemble_batch(samples[:3], store, cfg)
    base = model.forward(batch).data
    poisoned = Batch(batch.image_data, batch.image_valid, batch.image_pos,
                     batch.text_data.copy(), batch.text_valid, batch.text_pos,
                     batch.targets, batch.samples)
    poisoned.text_data[~batch.text_valid] = 321.5
    again = model.forward(poisoned).data
    assert np.array_equal(base, again)


def test_unimodal_image_model_ignores_text():
    spec, store, samples = cohort()
    cfg = small_cfg(spec, modalities=("image",))
    model = DiagnosisModel(cfg, seed=4)
    batch = assemble_batch(samples[:3], store, cfg)
    base = model.forward(batch).data
    batch.text_data[:] = 9.0
    assert np.array_equal(model.forward(batch).data, base)


def test_mean_pooling_is_order_invariant_tst_is_not():
    spec, store, samples = cohort()
    rich = [s for s in samples if len(s.history_reports) == 3][:1]
    outs = {}
    for pooling in ("mean", "tst"):
        cfg = small_cfg(spec, pooling=pooling)
        model = DiagnosisModel(cfg, seed=5)
        batch = assemble_batch(rich, store, cfg)
        base = model.forward(batch).data
        shuffled = Batch(batch.image_data, batch.image_valid, batch.image_pos,
                         batch.text_data[:, ::-1].copy(), batch.text_valid,
                         batch.text_pos, batch.targets, batch.samples)
        flipped = model.forward(shuffled).data
        outs[pooling] = np.allclose(base, flipped, atol=1e-12)
    assert outs["mean"] is True
    assert outs["tst"] is False


def test_ensemble_is_mean_of_branch_logits():
    spec, store, samples = cohort()
    cfg = small_cfg(spec, fusion="ensemble")
    model = DiagnosisModel(cfg, seed=6)
    batch = assemble_batch(samples[:2], store, cfg)
    joint = model.forward(batch).data
    img_vec = model._branch_vector(batch, "image", False, None)
    txt_vec = model._branch_vector(batch, "text", False, None)
    expected = 0.5 * (model.branch_classifiers["image"](img_vec).data
                      + model.branch_classifiers["text"](txt_vec).data)
    assert np.allclose(joint, expected, atol=1e-12)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(store_dim=4, labels=("a",), fusion="late")
    with pytest.raises(ConfigError):
        ModelConfig(store_dim=4, labels=(), fusion="vilt")
    with pytest.raises(ConfigError):
        ModelConfig(store_dim=4, labels=("a",), modalities=("audio",))


def test_config_round_trip_records_open_choices():
    cfg = ModelConfig(store_dim=4, labels=("a", "b"))
    blob = cfg.to_json_dict()
    assert blob["norm_placement"] == "pre"
    assert blob["activation"] == "gelu"
    assert ModelConfig.from_json_dict(blob) == cfg


def test_snapshot_load_round_trip():
    spec, store, samples = cohort()
    cfg = small_cfg(spec)
    model = DiagnosisModel(cfg, seed=7)
    snap = model.snapshot()
    other = DiagnosisModel(cfg, seed=99)
    other.load_params(snap)
    batch = assemble_batch(samples[:2], store, cfg)
    assert np.array_equal(model.forward(batch).data, other.forward(batch).data)


# ---------------------------------------------------------------------------
# end-to-end gradient integrity (the P1 workhorse)
# ---------------------------------------------------------------------------

def model_param_gradcheck(fusion, positional, n_params=3):
    spec, store, samples = cohort(n_subjects=6, dim=4, labels=2)
    cfg = small_cfg(spec, fusion=fusion, positional=positional, model_dim=4,
                    heads=2, k_text=2, ff_dim=8)
    model = DiagnosisModel(cfg, seed=11)
    batch = assemble_batch(samples[:3], store, cfg)
    targets = Tensor(batch.targets)

    def loss(_probe):
        # gradient_check perturbs the parameter's buffer in place, so the
        # forward just needs to read the live model
        return bce_multilabel(model.forward(batch), targets)

    params = model.params()
    names = sorted(params)[:: max(1, len(params) // n_params)][:n_params]
    worst = 0.0
    for name in names:
        # step 1e-4 for O(1) losses: symmetry-protected parameters (a key
        # bias under plain softmax) have exactly-zero gradients, and the
        # smaller step's rounding noise would dominate the error ratio
        err = gradient_check(loss, params[name], step=1e-4)
        worst = max(worst, err)
    return worst


@pytest.mark.parametrize("fusion", FUSION_METHODS)
def test_full_model_gradients_rope(fusion):
    assert model_param_gradcheck(fusion, "rope") < 1e-4


@pytest.mark.parametrize("positional", POSITIONAL_MODES)
def test_full_model_gradients_vilt_all_positional(positional):
    assert model_param_gradcheck("vilt", positional) < 1e-4
