import math
from dataclasses import replace

import numpy as np
import pytest

from dermnet.datasets import DatasetRecord, Manifest, ManifestError
from dermnet.recnet import Phase, RecConfig, build_recnet
from dermnet.segnet import SegConfig, build_segnet, predict_mask
from dermnet.tensor import Parameter, Tape, Tensor, softmax
from dermnet.training import (
    History,
    OptimizerState,
    TrainConfig,
    bce_loss,
    cross_entropy,
    dice_loss,
    epoch_order,
    evaluate_cls,
    evaluate_seg,
    load_cls_arrays,
    sgd_step,
    train_cls,
    train_seg,
)
from dermnet import imaging

TINY_SEG = SegConfig(depth=2, base_filters=2)
TINY_REC = RecConfig(stem_filters=2, num_blocks=2, head_units=8)


# ---------------------------------------------------------------- losses

def test_bce_examples():
    target = np.random.default_rng(0).random((2, 1, 4, 4)) < 0.5
    assert bce_loss(Tensor(np.zeros((2, 1, 4, 4))), target).item() == pytest.approx(math.log(2), abs=1e-7)
    assert bce_loss(Tensor(np.full((1, 1, 3, 3), 50.0)), np.ones((1, 1, 3, 3), bool)).item() < 1e-15
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros((1, 1, 3, 3))), np.ones((1, 1, 3, 2)))


def test_bce_extreme_logits_finite():
    z = Tensor(np.array([[[[-1e4, 1e4]]]]))
    assert math.isfinite(bce_loss(z, np.array([[[[1, 0]]]])).item())


def test_dice_examples():
    y = np.zeros((1, 1, 2, 2), bool)
    y[0, 0, 0] = True
    perfect = Tensor(np.where(y, 50.0, -50.0))
    assert dice_loss(perfect, y).item() < 1e-3
    assert dice_loss(Tensor(np.full((1, 1, 2, 2), -50.0)), np.zeros((1, 1, 2, 2))).item() < 1e-3
    # p = 0.5 on four pixels, two lesion: 1 - (2*1 + 1) / (2 + 2 + 1)
    assert dice_loss(Tensor(np.zeros((1, 1, 2, 2))), y).item() == pytest.approx(0.4, abs=1e-7)


def test_cross_entropy_examples():
    assert cross_entropy(Tensor(np.zeros((4, 3))), [0, 1, 2, 1]).item() == pytest.approx(math.log(3), abs=1e-6)
    z = np.full((2, 3), -50.0)
    z[0, 2] = z[1, 0] = 50.0
    assert cross_entropy(Tensor(z), [2, 0]).item() < 1e-6
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_gradient_identity():
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal((5, 3)), requires_grad=True, dtype=np.float64)
    labels = rng.integers(0, 3, 5)
    with Tape() as tape:
        loss = cross_entropy(z, labels)
    tape.backward(loss)
    p = softmax(Tensor(z.data)).data
    np.testing.assert_allclose(z.grad, (p - np.eye(3)[labels]) / 5, atol=1e-6)


def test_cross_entropy_weights_scale_rows():
    z = np.random.default_rng(2).standard_normal((3, 3))
    labels = [0, 1, 2]
    w = [2.0, 0.5, 1.0]
    per_row = [-np.log(softmax(Tensor(z)).data[i, labels[i]]) for i in range(3)]
    expected = sum(wi * li for wi, li in zip(w, per_row)) / 3
    assert cross_entropy(Tensor(z, dtype=np.float64), labels, w).item() == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- optimizer

def _param(value, group="head", trainable=True):
    return Parameter("p", Tensor(np.array([value]), requires_grad=True, dtype=np.float64), group, trainable)


def test_sgd_plain_step():
    p = _param(1.0)
    p.tensor.grad = np.array([0.5])
    sgd_step([p], OptimizerState(momentum=0.0), {"head": 0.1})
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)
    assert p.tensor.grad is None


def test_sgd_momentum_two_steps():
    p = _param(0.0)
    state = OptimizerState(momentum=0.9)
    for expected in (-0.1, -0.29):
        p.tensor.grad = np.array([1.0])
        sgd_step([p], state, {"head": 0.1})
        assert p.data[0] == pytest.approx(expected, abs=1e-12)


def test_sgd_frozen_with_stale_grad_unchanged():
    p = _param(1.0, trainable=False)
    p.tensor.grad = np.array([123.0])
    before = p.data.tobytes()
    sgd_step([p], OptimizerState(), {"head": 0.1})
    assert p.data.tobytes() == before


def test_sgd_missing_grad():
    with pytest.raises(ValueError, match="no gradient"):
        sgd_step([_param(1.0)], OptimizerState(), {"head": 0.1})


def test_sgd_per_group_rates():
    a, b = _param(1.0, "head"), Parameter("q", Tensor(np.array([1.0]), True, np.float64), "backbone_full")
    a.tensor.grad, b.tensor.grad = np.array([1.0]), np.array([1.0])
    sgd_step([a, b], OptimizerState(momentum=0.0), {"head": 0.1, "backbone_full": 0.01})
    assert (a.data[0], b.data[0]) == pytest.approx((0.9, 0.99))


def test_finetune_rate_default():
    assert TrainConfig(lr_head=0.02).finetune_rate == pytest.approx(0.002)
    assert TrainConfig(lr_finetune=0.5).finetune_rate == 0.5
    with pytest.raises(ValueError):
        TrainConfig(loss="focal")


# ---------------------------------------------------------------- seeding and history

def test_epoch_order():
    a = epoch_order(7, 0, 50)
    assert sorted(a.tolist()) == list(range(50))
    assert np.array_equal(a, epoch_order(7, 0, 50))
    assert not np.array_equal(a, epoch_order(7, 1, 50))
    assert not np.array_equal(a, epoch_order(8, 0, 50))


def test_history_monotone():
    h = History()
    h.append({"epoch": 0, "loss": 1.0})
    h.append({"epoch": 1, "loss": 0.5})
    with pytest.raises(ValueError):
        h.append({"epoch": 1, "loss": 0.4})
    assert h.to_text().count("\n") == 2


# ---------------------------------------------------------------- loops

def _snapshot(params):
    return {p.name: p.data.tobytes() for p in params}


def test_train_seg_zero_epochs(tiny_corpus):
    model = build_segnet(TINY_SEG, seed=0)
    before = _snapshot(model.params)
    history = train_seg(model, tiny_corpus, TrainConfig(epochs=0))
    assert len(history) == 0
    assert _snapshot(model.params) == before


def test_train_seg_deterministic_and_loss_falls(tiny_corpus):
    cfg = TrainConfig(epochs=3, batch_size=3, seed=1)
    runs = []
    for _ in range(2):
        model = build_segnet(TINY_SEG, seed=1)
        history = train_seg(model, tiny_corpus, cfg)
        runs.append((_snapshot(model.params), history.epochs))
    assert runs[0] == runs[1]
    losses = [r["loss"] for r in runs[0][1]]
    assert losses[-1] < losses[0]
    assert {"val_jaccard", "val_dice"} <= set(runs[0][1][0])


def test_train_seg_missing_mask_fails_before_training(tiny_corpus):
    records = list(tiny_corpus.records)
    records[3] = replace(records[3], mask=None)
    model = build_segnet(TINY_SEG, seed=0)
    before = _snapshot(model.params)
    with pytest.raises(ManifestError):
        train_seg(model, Manifest(records, tiny_corpus.root), TrainConfig(epochs=1))
    assert _snapshot(model.params) == before


def test_crop_source_falls_back_to_segmentation(tiny_corpus):
    seg = build_segnet(TINY_SEG, seed=0)
    rec = replace(tiny_corpus.split("train")[0], mask=None)
    _, crop, _ = load_cls_arrays(tiny_corpus, [rec], seg, use_truth_masks=True)
    img = tiny_corpus.load_image(rec)
    expected = imaging.to_input(imaging.crop_from_mask(img, predict_mask(seg, img)))
    np.testing.assert_array_equal(crop[0], expected)


@pytest.mark.parametrize("phase", [Phase.HEAD_ONLY, Phase.FINE_TUNE_LAST_TWO])
def test_train_cls_freeze(tiny_corpus, phase):
    seg = build_segnet(TINY_SEG, seed=0)
    rec = build_recnet(TINY_REC, seed=0)
    before = _snapshot(rec.params)
    train_cls(rec, seg, tiny_corpus, TrainConfig(epochs=5, batch_size=2, max_steps=5), phase)
    changed = {n for n, b in _snapshot(rec.params).items() if b != before[n]}
    allowed = {p.name for p in rec.params if p.group == "head"}
    if phase is Phase.FINE_TUNE_LAST_TWO:
        allowed |= {p.name for p in rec.params if ".block0." in p.name or ".block1." in p.name}
        assert any(".block1." in n for n in changed)
    assert changed and changed <= allowed


def test_evaluation_repeatable(tiny_corpus):
    seg = build_segnet(TINY_SEG, seed=0)
    rec = build_recnet(TINY_REC, seed=0)
    assert evaluate_seg(seg, tiny_corpus, "val").to_text() == evaluate_seg(seg, tiny_corpus, "val").to_text()
    assert evaluate_cls(rec, seg, tiny_corpus, "val").to_text() == evaluate_cls(rec, seg, tiny_corpus, "val").to_text()
    with pytest.raises(ManifestError):
        evaluate_seg(seg, tiny_corpus, "test")


def test_oracle_models_score_perfectly(tmp_path):
    img = np.full((20, 20, 3), 120, np.uint8)
    (tmp_path / "i.png").write_bytes(imaging.encode_png(img))
    (tmp_path / "m.png").write_bytes(imaging.encode_mask_png(np.ones((20, 20), bool)))
    manifest = Manifest([DatasetRecord("i.png", "m.png", "nevus", "test")] * 3, tmp_path)

    seg = build_segnet(TINY_SEG, seed=0)
    seg.params["seg.out.w"].tensor.data[:] = 0
    seg.params["seg.out.b"].tensor.data[:] = 1e30
    assert evaluate_seg(seg, manifest, "test").segmentation.mean_jaccard == 1.0

    rec = build_recnet(TINY_REC, seed=0)
    rec.params["head.out.w"].tensor.data[:] = 0
    rec.params["head.out.b"].tensor.data[:] = [0, 5, 0]
    assert evaluate_cls(rec, seg, manifest, "test").classification.accuracy == 1.0
