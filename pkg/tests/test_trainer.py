import numpy as np
import pytest
import torch

from dbdh.datakit import make_synthetic_samples, split_manifest
from dbdh.errors import ConfigurationError
from dbdh.model import ModelConfig, build_model, load_checkpoint
from dbdh.supervision import LossWeights, focal_heatmap_loss, render_heatmaps
from dbdh.trainer import (
    AblationMode, TrainConfig, _collate, evaluate, evaluate_all, format_table, iter_eval_cases, make_example,
    model_config_for, run_ablation_grid, seg_active, train, training_step,
)
from dbdh.distortion import AugConfigSS, stage_rng

TINY = ModelConfig(texture_channels=8, context_stem_channels=8, context_stage_channels=(8, 8, 8, 8),
                   context_out_channels=8, head_channels=8, ase_reduction=4)


@pytest.fixture(scope="module")
def manifest():
    samples = make_synthetic_samples(6, size=64, region_side=32, seed=3)
    return split_manifest(samples, seed=0, sizes=(4, 1, 1))


def quick(**kw):
    base = dict(epochs=1, batch_size=2, seed=0, max_steps=2)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_defaults():
    assert TrainConfig().batch_size == 16
    assert TrainConfig(aug="pimog").batch_size == 32
    tc = TrainConfig()
    assert (tc.epochs, tc.lr, tc.weight_decay) == (60, 1e-3, 1e-5)
    with pytest.raises(ConfigurationError):
        TrainConfig(aug="print")
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)


def test_two_step_run_is_reproducible(manifest):
    a = train(manifest, TINY, quick())
    b = train(manifest, TINY, quick())
    assert a.history[-1]["total_loss"] == pytest.approx(b.history[-1]["total_loss"], abs=1e-6)
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_filters_fixed_in_full_and_mutated_in_trainable(manifest):
    reference = build_model(TINY).filter_weight().clone()
    full = train(manifest, TINY, quick(ablation="full"))
    assert torch.equal(full.model.filter_weight(), reference)

    torch.manual_seed(0)
    cfg = model_config_for(AblationMode.TRAINABLE_FILTERS, TINY)
    start = build_model(cfg).filter_weight().detach().clone()
    trained = train(manifest, TINY, quick(ablation="id3", max_steps=1))
    assert not torch.equal(trained.model.filter_weight().detach(), start)


def test_seg_weight_zero_leaves_detection_gradients_alone():
    samples = make_synthetic_samples(2, size=64, region_side=32, seed=4)
    examples = [make_example(s.image, s.vertices, AugConfigSS(), stage_rng(0, i), augment=False)
                for i, s in enumerate(samples)]
    batch = _collate(examples)
    grads = []
    for with_seg in (True, False):
        torch.manual_seed(5)
        m = build_model(TINY)
        m.train()
        out = m(batch[0], with_mask=with_seg)
        loss = focal_heatmap_loss(out.heatmaps, batch[1])
        if with_seg:
            loss = loss + 0.0 * out.mask.sum()
        loss.backward()
        grads.append({n: p.grad.clone() for n, p in m.named_parameters() if n.startswith("det_head")})
    for name in grads[0]:
        assert torch.equal(grads[0][name], grads[1][name]), name


def test_training_step_seg_switch():
    samples = make_synthetic_samples(2, size=64, region_side=32, seed=4)
    batch = _collate([make_example(s.image, s.vertices, AugConfigSS(), stage_rng(0), augment=False)
                      for s in samples])
    m = build_model(TINY)
    _, _, seg = training_step(m, batch, LossWeights(), use_seg=True)
    assert seg is not None and seg.item() > 0
    _, _, seg = training_step(m, batch, LossWeights(), use_seg=False)
    assert seg is None


def test_id1_seg_only_in_first_epoch(manifest):
    assert seg_active(AblationMode.NO_TEXTURE_NO_SEG, 0) and not seg_active(AblationMode.NO_TEXTURE_NO_SEG, 1)
    assert seg_active(AblationMode.FULL, 5)
    r = train(manifest, TINY, quick(ablation="id1", epochs=2, max_steps=None, batch_size=4))
    assert [row["seg_active"] for row in r.history[1:]] == [True, False]
    assert np.isnan(r.history[2]["seg_loss"]) and r.history[1]["seg_loss"] > 0


def test_model_config_for_modes():
    assert not model_config_for(AblationMode.NO_TEXTURE, TINY).use_texture_branch
    assert model_config_for(AblationMode.TRAINABLE_FILTERS, TINY).filters_trainable
    assert model_config_for(AblationMode.FULL, TINY).use_texture_branch
    assert [m.table_id for m in AblationMode] == [4, 1, 2, 3]


def oracle_stub(cases):
    lookup = {c.image.tobytes(): c.vertices for c in cases}

    def predict(image):
        return render_heatmaps(lookup[np.asarray(image).tobytes()], image.shape[:2])
    return predict


def test_oracle_stub_scores_near_hundred():
    samples = make_synthetic_samples(5, size=256, region_side=128, seed=6)
    for key in ("none", "combined"):
        cases = list(iter_eval_cases(samples, "ss", key, seed=1))
        entry = evaluate(oracle_stub(cases), samples, "ss", key, seed=1)
        assert 99.0 < entry.mean_iou <= 100.0 and entry.count == 5


def test_constant_stub_scores_zero():
    samples = make_synthetic_samples(3, size=64, region_side=32, seed=7)
    entry = evaluate(lambda img: np.zeros((4,) + img.shape[:2]), samples, "pimog", "none")
    assert entry.mean_iou == 0.0 and entry.raster_fallbacks == 3


def test_invalid_distortion_key():
    samples = make_synthetic_samples(1, size=64, region_side=32, seed=8)
    with pytest.raises(ConfigurationError):
        evaluate(lambda img: np.zeros((4,) + img.shape[:2]), samples, "ss", "moire")


def test_evaluate_all_keys_and_range():
    samples = make_synthetic_samples(2, size=64, region_side=32, seed=9)
    report = evaluate_all(build_model(TINY).eval(), samples, "pimog", seed=0, config_hash=TINY.hash())
    assert list(report.iou) == ["none", "illum", "moire", "noise", "combined"]
    assert all(0 <= v <= 100 for v in report.iou.values())


def test_checkpoint_roundtrip_evaluates_identically(manifest, tmp_path):
    r = train(manifest, TINY, quick(), run_dir=str(tmp_path))
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "config.json").exists()
    loaded, meta = load_checkpoint(r.checkpoint_path)
    test = manifest.subset("test")
    a = evaluate(r.model, test, "ss", "combined", 0, manifest.image_of)
    b = evaluate(loaded, test, "ss", "combined", 0, manifest.image_of)
    assert a == b


def test_ablation_grid_single_row(manifest):
    rows = run_ablation_grid(manifest, TINY, quick(), ["full"])
    assert len(rows) == 1 and rows[0]["id"] == 4
    table = format_table(rows, "ss").splitlines()
    assert len(table) == 2 and table[0].split("\t")[2:] == ["none", "blur", "color_jitter", "noise", "jpeg", "combined"]


def test_validation_recorded_before_training(manifest):
    r = train(manifest, TINY, quick())
    assert r.history[0]["epoch"] == 0 and r.history[0]["val_iou"] is not None
    assert r.best_epoch in (0, 1)
