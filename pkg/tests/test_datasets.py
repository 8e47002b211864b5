import hashlib
import json
import math

import numpy as np
import pytest

from dermnet import imaging
from dermnet.datasets import (
    CLASSES,
    DatasetRecord,
    Manifest,
    ManifestError,
    SynthSpec,
    class_weights,
    dump_manifest,
    gen_synthetic,
    load_manifest,
    parse_manifest,
    save_manifest,
    weights_from_counts,
)

SKEWED_COUNTS = (374, 1372, 254)


def test_single_line_manifest():
    m = parse_manifest('{"image":"a.png","mask":null,"label":"nevus","split":"val"}\n')
    assert m.records == [DatasetRecord("a.png", None, "nevus", "val")]
    assert m.split_counts() == {"train": 0, "val": 1, "test": 0}


def test_trailing_space_label_rejected_with_line():
    text = '{"image":"a.png","split":"train","label":"nevus"}\n{"image":"b.png","split":"train","label":"melanoma "}\n'
    with pytest.raises(ManifestError, match="line 2"):
        parse_manifest(text)


@pytest.mark.parametrize("line", [
    '{"image":"a.png","split":"holdout"}',
    '{"image":"","split":"train"}',
    '{"image":"a.png","split":"train","colour":"red"}',
    '[1, 2]',
    '{not json',
])
def test_bad_records(line):
    with pytest.raises(ManifestError, match="line 1"):
        parse_manifest(line + "\n")


def _skewed_manifest():
    recs = []
    for label, n in zip(CLASSES, SKEWED_COUNTS):
        recs += [DatasetRecord(f"{label}_{i}.png", None, label, "train") for i in range(n)]
    recs += [DatasetRecord("v.png", None, "nevus", "val")]
    return Manifest(recs)


def test_class_counts_skewed():
    counts = _skewed_manifest().class_counts("train")
    assert counts == dict(zip(CLASSES, SKEWED_COUNTS))


def test_class_weights_skewed_counts():
    # oracle: total / (classes * count) with total 2000
    expected = [2000 / (3 * n) for n in SKEWED_COUNTS]
    w = class_weights(_skewed_manifest())
    np.testing.assert_allclose(w, expected, rtol=1e-12)
    np.testing.assert_allclose(w, [1.7825, 0.4859, 2.6247], atol=1e-4)
    # mean 1 per training sample, not per class
    assert np.dot(w, SKEWED_COUNTS) / sum(SKEWED_COUNTS) == pytest.approx(1.0, abs=1e-12)


def test_class_weights_equal_and_zero():
    np.testing.assert_allclose(weights_from_counts([5, 5, 5]), 1.0)
    with pytest.raises(ManifestError, match="seborrheic_keratosis"):
        weights_from_counts([3, 4, 0])


def test_manifest_roundtrip(tmp_path):
    m = _skewed_manifest()
    path = tmp_path / "m.jsonl"
    save_manifest(m, path)
    back = load_manifest(path)
    assert back.records == m.records
    assert dump_manifest(back) == path.read_text()
    assert back.root == tmp_path


def test_missing_image_not_checked_at_load(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"image":"nowhere.png","split":"test"}\n')
    m = load_manifest(tmp_path / "m.jsonl")
    with pytest.raises(OSError):
        m.load_image(m.records[0])


# ---------------------------------------------------------------- synthetic generator

def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generator_is_byte_deterministic(tmp_path):
    spec = SynthSpec(seed=11, counts=(6, 3, 2), size=48)
    gen_synthetic(spec, tmp_path / "a")
    gen_synthetic(spec, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    other = SynthSpec(seed=12, counts=(6, 3, 2), size=48)
    gen_synthetic(other, tmp_path / "c")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def _analytic_mask(shape, size):
    """Per-pixel evaluation of the lesion outline, written independently of the generator."""
    out = np.zeros((size, size), bool)
    c, s = math.cos(shape.theta), math.sin(shape.theta)
    for i in range(size):
        for j in range(size):
            dx, dy = j + 0.5 - shape.cx, i + 0.5 - shape.cy
            u = (c * dx + s * dy) / shape.a
            v = (c * dy - s * dx) / shape.b
            limit = 1.0 + sum(amp * math.cos(k * math.atan2(v, u) + ph) for k, amp, ph in shape.harmonics)
            out[i, j] = math.sqrt(u * u + v * v) <= limit
    return out


def test_masks_match_analytic_outline(tmp_path):
    manifest, shapes = gen_synthetic(SynthSpec(seed=5, counts=(9, 3, 0), size=64), tmp_path)
    assert any(s.harmonics for s in shapes) and any(not s.harmonics for s in shapes)
    for rec, shape in zip(manifest.records, shapes):
        mask = manifest.load_mask(rec)
        assert (mask != _analytic_mask(shape, 64)).sum() == 0
        assert mask.any() and not mask[0].any() and not mask[-1].any()


def test_class_mix_within_one(tmp_path):
    spec = SynthSpec(seed=3, counts=(20, 7, 0), size=32, mix=(0.5, 0.3, 0.2))
    manifest, _ = gen_synthetic(spec, tmp_path)
    for split, n in (("train", 20), ("val", 7)):
        counts = manifest.class_counts(split)
        for cls, p in zip(CLASSES, spec.mix):
            assert abs(counts[cls] - n * p) <= 1


def test_generated_manifest_on_disk(tmp_path):
    manifest, _ = gen_synthetic(SynthSpec(seed=1, counts=(3, 1, 1), size=40), tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 5
    first = json.loads(lines[0])
    assert set(first) == {"image", "mask", "label", "split"}
    img = imaging.read_image(tmp_path / first["image"])
    assert img.shape == (40, 40, 3)
    assert load_manifest(tmp_path / "manifest.jsonl").records == manifest.records
