"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured value,
straight to the terminal so it shows up without ``-s``. The benchmarks drive
the real CLI; the segmentation model from criterion 6 is reused by 7.
"""
import hashlib
import json
import time

import numpy as np
import pytest

from dermnet import imaging, metrics
from dermnet.cli import run_command
from dermnet.datasets import CLASSES, DatasetRecord, Manifest, class_weights
from dermnet.gradsuite import TOLERANCE, run_suite
from dermnet.recnet import Phase, RecConfig, build_recnet, load_recnet, rec_forward, save_recnet
from dermnet.segnet import SegConfig, build_segnet, load_segnet, save_segnet, seg_forward
from dermnet.tensor import Tensor, load_checkpoint
from dermnet.training import TrainConfig, train_cls

BENCH_SEED = 7


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}")
        return ok
    return emit


def _cli(argv, capsys):
    """Run a command, return its stdout lines parsed as JSON."""
    code = run_command([str(a) for a in argv])
    out = capsys.readouterr().out
    assert code == 0, f"{argv[0]} exited {code}"
    return [json.loads(line) for line in out.splitlines() if line.strip()]


def _summary(records):
    return next(r for r in records if r.get("kind") == "summary")


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- 1

def test_gradient_suite(verdict):
    start = time.perf_counter()
    results = list(run_suite(seeds=range(5)))
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.name for r in results}
    ok = (all(r.passed for r in results) and {"segnet_tiny", "recnet_tiny"} <= names
          and all(sum(r.name == n for r in results) == 5 for n in names) and elapsed < 120)
    detail = (f"{len(names)} cases x 5 seeds, worst {worst.max_rel_error:.2e} ({worst.name}) "
              f"<= {TOLERANCE:g}, {elapsed:.1f}s < 120s")
    assert verdict(1, "gradient suite", ok, detail)


# ---------------------------------------------------------------- 2

def _checksums(params):
    return {p.name: _digest(p.data.tobytes()) for p in params}


def test_freeze_semantics(verdict, tiny_corpus):
    seg = build_segnet(SegConfig(depth=2, base_filters=2), seed=0)
    rec = build_recnet(RecConfig(), seed=0)
    cfg = TrainConfig(epochs=5, batch_size=2, max_steps=5, momentum=0.9, seed=0)

    before = _checksums(rec.params)
    train_cls(rec, seg, tiny_corpus, cfg, Phase.HEAD_ONLY)
    after1 = _checksums(rec.params)
    changed1 = {n for n in before if before[n] != after1[n]}
    head = {p.name for p in rec.params if p.group == "head"}

    last_two = {p.name for p in rec.params
                if p.group != "head" and any(f".block{k}." in p.name for k in (rec.cfg.num_blocks - 2, rec.cfg.num_blocks - 1))}
    train_cls(rec, seg, tiny_corpus, cfg, Phase.FINE_TUNE_LAST_TWO)
    after2 = _checksums(rec.params)
    changed2 = {n for n in after1 if after1[n] != after2[n]}

    ok = (bool(changed1) and changed1 <= head and bool(changed2) and changed2 <= head | last_two
          and bool(changed2 & last_two))
    frozen2 = len(before) - len(head | last_two)
    detail = (f"phase 1 changed {len(changed1)} tensors, all head; phase 2 changed {len(changed2)}, "
              f"{frozen2} outside head+last two blocks bit-identical")
    assert verdict(2, "freeze semantics", ok, detail)


# ---------------------------------------------------------------- 3

def test_normalization(verdict):
    rng = np.random.default_rng(3)
    worst_mean = worst_std = 0.0
    for _ in range(100):
        h, w = rng.integers(2, 120, 2)
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        if img.min() == img.max():
            img[0, 0, 0] ^= 1
        out = imaging.normalize(img).astype(np.float64)
        worst_mean = max(worst_mean, abs(out.mean()))
        worst_std = max(worst_std, abs(out.std() - 1))
    const = imaging.normalize(np.full((17, 9, 3), 201, np.uint8))
    ok = worst_mean <= 1e-5 and worst_std <= 1e-4 and not const.any()
    detail = f"max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, constant -> zeros: {not const.any()}"
    assert verdict(3, "normalization", ok, detail)


# ---------------------------------------------------------------- 4

def test_shape_contract(verdict):
    rng = np.random.default_rng(4)
    sizes = [(150, 150), (16, 16), (200, 200), (16, 200)]
    sizes += [tuple(int(v) for v in rng.integers(16, 201, 2)) for _ in range(50 - len(sizes))]
    model = build_segnet(SegConfig(), seed=0)
    bad = []
    for h, w in sizes:
        y = seg_forward(model, Tensor(rng.standard_normal((1, 3, h, w))))
        if y.shape != (1, 1, h, w):
            bad.append(((h, w), y.shape))
    ok = not bad and len(sizes) == 50
    assert verdict(4, "shape contract", ok, f"{len(sizes) - len(bad)}/50 sizes matched (incl. 150x150), default config")


# ---------------------------------------------------------------- 5

def _brute(pred, truth):
    inter = union = p = t = 0
    for a, b in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        inter += a and b
        union += a or b
        p += a
        t += b
    j = 1.0 if union == 0 else inter / union
    d = 1.0 if p + t == 0 else 2 * inter / (p + t)
    return j, d


def test_metric_oracles(verdict):
    rng = np.random.default_rng(5)
    mismatches, worst_identity = 0, 0.0
    for i in range(1000):
        h, w = rng.integers(1, 24, 2)
        dp, dt = rng.random(2)
        if i % 10 == 0:  # empty prediction; every other one also has empty truth
            dp, dt = 0.0, dt * (i % 20 != 0)
        pred, truth = rng.random((h, w)) < dp, rng.random((h, w)) < dt
        j, d = metrics.jaccard(pred, truth), metrics.dice(pred, truth)
        mismatches += (j, d) != _brute(pred, truth)
        worst_identity = max(worst_identity, abs(d - 2 * j / (1 + j)))
    ok = mismatches == 0 and worst_identity <= 1e-9
    detail = f"1000 pairs, {mismatches} mismatches vs brute force, max |D - 2J/(1+J)| {worst_identity:.1e}"
    assert verdict(5, "metric oracles", ok, detail)


# ---------------------------------------------------------------- 6 and 7

SEG_EPOCHS = 2
CLS_EPOCHS = 3
PRETRAIN_EPOCHS = 5


@pytest.fixture(scope="module")
def seg_benchmark(tmp_path_factory):
    """Generate the seed-7 corpus and train the default segmentation network."""
    root = tmp_path_factory.mktemp("seg_bench")
    start = time.perf_counter()
    assert run_command(["gen-synth", "--out", str(root / "data"), "--seed", str(BENCH_SEED),
                        "--train", "200", "--val", "40", "--size", "150"]) == 0
    assert run_command(["train-seg", "--manifest", str(root / "data" / "manifest.jsonl"),
                        "--out", str(root / "seg.skcn"), "--seed", str(BENCH_SEED),
                        "--epochs", str(SEG_EPOCHS), "--history", str(root / "history.jsonl")]) == 0
    return root, time.perf_counter() - start


def _report(path):
    return _summary([json.loads(line) for line in path.read_text().splitlines()])


def test_segmentation_benchmark(verdict, seg_benchmark):
    root, train_seconds = seg_benchmark
    assert run_command(["eval-seg", "--manifest", str(root / "data" / "manifest.jsonl"),
                        "--seg-model", str(root / "seg.skcn"), "--split", "val", "--out", str(root / "val.jsonl")]) == 0
    summary = _report(root / "val.jsonl")
    history = [json.loads(line) for line in (root / "history.jsonl").read_text().splitlines()]
    ok = summary["count"] == 40 and summary["mean_jaccard"] >= 0.80 and len(history) <= 10
    detail = (f"seed {BENCH_SEED}, 200/40 at 150x150, {len(history)} epochs, mean val Jaccard "
              f"{summary['mean_jaccard']:.4f} >= 0.80 ({train_seconds:.0f}s)")
    assert verdict(6, "segmentation benchmark", ok, detail)


def test_classification_benchmark(verdict, seg_benchmark, tmp_path):
    seg_root, _ = seg_benchmark
    seg_path = seg_root / "seg.skcn"
    start = time.perf_counter()
    common = ["--seed", str(BENCH_SEED)]
    assert run_command(["gen-synth", "--out", str(tmp_path / "cls"), "--train", "300", "--val", "60"] + common) == 0
    # backbone pretraining uses its own corpus, disjoint from the benchmark images
    assert run_command(["gen-synth", "--out", str(tmp_path / "pre"), "--train", "150", "--val", "0",
                        "--seed", str(1000 + BENCH_SEED)]) == 0
    manifest = str(tmp_path / "cls" / "manifest.jsonl")
    assert run_command(["pretrain-backbone", "--manifest", str(tmp_path / "pre" / "manifest.jsonl"),
                        "--out", str(tmp_path / "backbone.skcn"), "--epochs", str(PRETRAIN_EPOCHS)] + common) == 0
    assert load_checkpoint(tmp_path / "backbone.skcn")

    accuracy = {}
    for phase in (1, 2):
        start_from = (["--init-backbone", str(tmp_path / "backbone.skcn")] if phase == 1
                      else ["--rec-model", str(tmp_path / "rec1.skcn")])
        assert run_command(["train-cls", "--phase", str(phase), "--manifest", manifest, "--seg-model", str(seg_path),
                            "--out", str(tmp_path / f"rec{phase}.skcn"), "--epochs", str(CLS_EPOCHS)]
                           + start_from + common) == 0
        assert run_command(["eval-cls", "--manifest", manifest, "--seg-model", str(seg_path), "--rec-model",
                            str(tmp_path / f"rec{phase}.skcn"), "--out", str(tmp_path / f"eval{phase}.jsonl")]) == 0
        summary = _report(tmp_path / f"eval{phase}.jsonl")
        assert summary["count"] == 60
        accuracy[phase] = summary["accuracy"]

    ok = accuracy[2] >= 0.90 and accuracy[2] >= accuracy[1] - 0.02
    detail = (f"300/60, phase 1 val acc {accuracy[1]:.4f}, phase 2 val acc {accuracy[2]:.4f} "
              f"(>= 0.90 and >= phase 1 - 0.02, {time.perf_counter() - start:.0f}s)")
    assert verdict(7, "classification benchmark", ok, detail)


# ---------------------------------------------------------------- 8

TINY_CONFIG = {"depth": 2, "base_filters": 4, "stem_filters": 2, "num_blocks": 2, "head_units": 16, "batch_size": 4}


def _pipeline(root, capsys):
    """Synthesize, train every stage, classify one image; return checkpoints and output."""
    root.mkdir()
    (root / "cfg.json").write_text(json.dumps(TINY_CONFIG))
    common = ["--seed", "11", "--config", root / "cfg.json", "--epochs", "2"]
    data = root / "data"
    manifest = data / "manifest.jsonl"
    _cli(["gen-synth", "--out", data, "--count", "24", "--size", "64", "--seed", "11"], capsys)
    _cli(["train-seg", "--manifest", manifest, "--out", root / "seg.skcn"] + common, capsys)
    _cli(["pretrain-backbone", "--manifest", manifest, "--out", root / "bb.skcn"] + common, capsys)
    _cli(["train-cls", "--phase", "1", "--manifest", manifest, "--seg-model", root / "seg.skcn",
          "--init-backbone", root / "bb.skcn", "--out", root / "rec1.skcn"] + common, capsys)
    _cli(["train-cls", "--phase", "2", "--manifest", manifest, "--seg-model", root / "seg.skcn",
          "--rec-model", root / "rec1.skcn", "--out", root / "rec2.skcn"] + common, capsys)
    image = data / json.loads(manifest.read_text().splitlines()[-1])["image"]
    run_command(["classify", "--seg-model", str(root / "seg.skcn"), "--rec-model", str(root / "rec2.skcn"),
                 "--image", str(image)])
    output = capsys.readouterr().out
    ckpts = {p.name: _digest(p.read_bytes()) for p in sorted(root.glob("*.skcn"))}
    return ckpts, output


def test_determinism(verdict, tmp_path, capsys):
    first = _pipeline(tmp_path / "a", capsys)
    second = _pipeline(tmp_path / "b", capsys)
    ok = first == second and len(first[0]) == 4 and first[1].startswith('{"probabilities"')
    detail = f"{len(first[0])} checkpoints bit-identical: {first[0] == second[0]}, classify output identical: {first[1] == second[1]}"
    assert verdict(8, "determinism", ok, detail)


# ---------------------------------------------------------------- 9

def test_checkpoint_roundtrip(verdict, tmp_path):
    seg, rec = build_segnet(SegConfig(), seed=9), build_recnet(RecConfig(), seed=9)
    save_segnet(seg, tmp_path / "seg.skcn")
    save_recnet(rec, tmp_path / "rec.skcn")
    seg2, rec2 = load_segnet(tmp_path / "seg.skcn"), load_recnet(tmp_path / "rec.skcn")

    def same_tensors(a, b):
        return a.names() == b.names() and all(
            p.data.dtype == q.data.dtype and p.data.tobytes() == q.data.tobytes() for p, q in zip(a, b))

    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((2, 3, 64, 64)))
    full, crop = Tensor(rng.standard_normal((2, 3, 150, 150))), Tensor(rng.standard_normal((2, 3, 150, 150)))
    tensors_ok = same_tensors(seg.params, seg2.params) and same_tensors(rec.params, rec2.params)
    forward_ok = (seg_forward(seg, x).data.tobytes() == seg_forward(seg2, x).data.tobytes()
                  and rec_forward(rec, full, crop).data.tobytes() == rec_forward(rec2, full, crop).data.tobytes())
    ok = tensors_ok and forward_ok
    detail = (f"segnet {seg.params.count()} + recnet {rec.params.count()} values, tensors identical: {tensors_ok}, "
              f"forward identical: {forward_ok}")
    assert verdict(9, "checkpoint round-trip", ok, detail)


# ---------------------------------------------------------------- 10

def test_class_weights(verdict):
    counts = (374, 1372, 254)
    records = [DatasetRecord(f"{c}{i}.png", None, c, "train") for c, n in zip(CLASSES, counts) for i in range(n)]
    w = class_weights(Manifest(records))
    expected = np.array([1.7825, 0.4859, 2.6247])
    err = float(np.max(np.abs(np.asarray(w) - expected)))
    ok = err <= 1e-4
    detail = f"counts 374/1372/254 -> ({', '.join(f'{v:.4f}' for v in w)}), max error {err:.1e} <= 1e-4"
    assert verdict(10, "class weights", ok, detail)
