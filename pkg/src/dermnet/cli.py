"""Command-line entry point: ``dermnet <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import imaging
from .datasets import SynthSpec, gen_synthetic, load_manifest
from .pipeline import classify_image
from .recnet import Phase, RecConfig, build_recnet, load_backbone_checkpoint, load_recnet, save_recnet
from .segnet import SegConfig, build_segnet, load_segnet, predict_mask, save_segnet
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .training import (
    History,
    TrainConfig,
    evaluate_cls,
    evaluate_seg,
    pretrain_backbone,
    train_cls,
    train_seg,
)

log = logging.getLogger("dermnet")

USAGE_ERROR = 1
DATA_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------- config

@dataclasses.dataclass
class Configs:
    seg: SegConfig
    rec: RecConfig
    train: TrainConfig


def load_configs(path: Optional[str], seed: Optional[int], epochs: Optional[int] = None) -> Configs:
    """Split a flat JSON object across SegConfig, RecConfig and TrainConfig by field name."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ValueError(f"config {path}: expected a flat object of key/value pairs")
    parts: dict[type, dict] = {SegConfig: {}, RecConfig: {}, TrainConfig: {}}
    for key, value in raw.items():
        owner = next((cls for cls in parts if key in {f.name for f in dataclasses.fields(cls)}), None)
        if owner is None:
            raise ValueError(f"config {path}: unknown key {key!r}")
        parts[owner][key] = value
    if seed is not None:
        parts[TrainConfig]["seed"] = seed
    if epochs is not None:
        parts[TrainConfig]["epochs"] = epochs
    try:
        return Configs(SegConfig(**parts[SegConfig]), RecConfig(**parts[RecConfig]), TrainConfig(**parts[TrainConfig]))
    except TypeError as exc:
        raise ValueError(f"config {path}: {exc}") from None


# ---------------------------------------------------------------- helpers

def _emit(line: str) -> None:
    sys.stdout.write(line if line.endswith("\n") else line + "\n")
    sys.stdout.flush()


def _epoch_printer(record: dict) -> None:
    _emit(json.dumps(record))


def _finish_history(args, history, title: str) -> None:
    if args.history:
        Path(args.history).parent.mkdir(parents=True, exist_ok=True)
        Path(args.history).write_text(history.to_text())
    if args.figures and len(history):
        from .report import plot_history
        plot_history(history.epochs, Path(args.figures) / f"{title}_history.png", title=title)


def _parse_mix(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"mix must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or sum(parts) <= 0:
        raise argparse.ArgumentTypeError(f"mix must be three non-negative numbers with a positive sum, got {text!r}")
    total = sum(parts)
    return tuple(p / total for p in parts)


# ---------------------------------------------------------------- commands

def cmd_gen_synth(args) -> int:
    if args.count is not None:
        if args.count < 1:
            raise UsageError("--count must be positive")
        val = round(args.count / 6)
        counts = (args.count - val, val, 0)
    else:
        counts = (args.train, args.val, args.test)
    spec = SynthSpec(seed=args.seed or 0, counts=counts, size=args.size, mix=args.mix)
    manifest, _ = gen_synthetic(spec, args.out)
    _emit(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), **manifest.split_counts()}))
    return 0


def cmd_train_seg(args) -> int:
    cfgs = load_configs(args.config, args.seed, args.epochs)
    manifest = load_manifest(args.manifest)
    model = load_segnet(args.init) if args.init else build_segnet(cfgs.seg, seed=cfgs.train.seed)
    history = train_seg(model, manifest, cfgs.train, on_epoch=_epoch_printer)
    save_segnet(model, args.out)
    _finish_history(args, history, "segmentation")
    return 0


def cmd_pretrain_backbone(args) -> int:
    cfgs = load_configs(args.config, args.seed, args.epochs)
    manifest = load_manifest(args.manifest)
    history_records = []

    def on_epoch(record):
        history_records.append(record)
        _epoch_printer(record)

    tensors = pretrain_backbone(manifest, cfgs.rec, cfgs.train, on_epoch=on_epoch)
    save_checkpoint(args.out, tensors)
    _finish_history(args, History(history_records), "pretrain")
    return 0


def cmd_train_cls(args) -> int:
    cfgs = load_configs(args.config, args.seed, args.epochs)
    manifest = load_manifest(args.manifest)
    seg = load_segnet(args.seg_model)
    if args.rec_model:
        rec = load_recnet(args.rec_model)
    else:
        rec = build_recnet(cfgs.rec, seed=cfgs.train.seed)
    if args.init_backbone:
        report = load_backbone_checkpoint(rec, load_checkpoint(args.init_backbone))
        _emit(json.dumps({"init_backbone": args.init_backbone, "loaded": len(report.loaded),
                          "skipped": len(report.skipped)}))
    history = train_cls(rec, seg, manifest, cfgs.train, Phase.from_number(args.phase), on_epoch=_epoch_printer)
    save_recnet(rec, args.out)
    _finish_history(args, history, f"phase{args.phase}")
    return 0


def cmd_predict_mask(args) -> int:
    seg = load_segnet(args.seg_model)
    image = imaging.read_image(args.image)
    mask = predict_mask(seg, image)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(imaging.encode_mask_png(mask))
    if args.figures:
        from .report import plot_overlay
        plot_overlay(image, mask, Path(args.figures) / (Path(args.image).stem + "_overlay.png"))
    _emit(json.dumps({"mask": args.out, "lesion_pixels": int(mask.sum())}))
    return 0


def cmd_classify(args) -> int:
    seg = load_segnet(args.seg_model)
    rec = load_recnet(args.rec_model)
    image = imaging.read_image(args.image)
    result = classify_image(seg, rec, image)
    if args.figures:
        from .report import plot_overlay
        plot_overlay(image, result.mask, Path(args.figures) / (Path(args.image).stem + "_overlay.png"))
    _emit(result.to_json())
    return 0


def _finish_report(args, report) -> int:
    sys.stdout.write(report.to_text())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_text())
    if args.figures:
        from .report import write_report_figures
        write_report_figures(report, args.figures)
    return 0


def cmd_eval_seg(args) -> int:
    seg = load_segnet(args.seg_model)
    return _finish_report(args, evaluate_seg(seg, load_manifest(args.manifest), args.split))


def cmd_eval_cls(args) -> int:
    seg = load_segnet(args.seg_model)
    rec = load_recnet(args.rec_model)
    return _finish_report(args, evaluate_cls(rec, seg, load_manifest(args.manifest), args.split))


def cmd_grad_check(args) -> int:
    from .gradsuite import cases, run_suite

    names = args.only.split(",") if args.only else None
    if names:
        unknown = sorted(set(names) - set(cases()))
        if unknown:
            raise UsageError(f"unknown gradient case(s): {', '.join(unknown)}")
    failed = 0
    for r in run_suite(seeds=range(args.seeds), names=names):
        failed += not r.passed
        _emit(json.dumps({"case": r.name, "seed": r.seed, "max_rel_error": r.max_rel_error,
                          "seconds": round(r.seconds, 3), "passed": r.passed}))
    return DATA_ERROR if failed else 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single source of randomness (default 0)")
    common.add_argument("--config", help="JSON object of SegConfig/RecConfig/TrainConfig fields")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="dermnet", description="Lesion segmentation and three-class recognition.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, figures=True):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if figures:
            p.add_argument("--figures", help="directory for rendered PNG figures")
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "write a synthetic lesion corpus and its manifest", figures=False)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="total images, split 5:1 train/val")
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=40)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--size", type=int, default=150)
    p.add_argument("--mix", type=_parse_mix, default=(1 / 3, 1 / 3, 1 / 3), help="class proportions, e.g. 1,1,1")

    def training(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="output SKCN checkpoint")
        p.add_argument("--epochs", type=int, help="overrides the config value")
        p.add_argument("--history", help="also write per-epoch records here")

    p = add("train-seg", cmd_train_seg, "train the segmentation network")
    training(p)
    p.add_argument("--init", help="continue from this segmentation checkpoint")

    p = add("pretrain-backbone", cmd_pretrain_backbone, "pretrain one backbone on full images (SKCN out)")
    training(p)

    p = add("train-cls", cmd_train_cls, "train the recognition network for one phase")
    training(p)
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--seg-model", required=True)
    p.add_argument("--init-backbone", help="SKCN backbone checkpoint loaded into both branches")
    p.add_argument("--rec-model", help="start from this recognition checkpoint (typically phase 1 output)")

    p = add("predict-mask", cmd_predict_mask, "write the predicted lesion mask as PNG")
    p.add_argument("--seg-model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("classify", cmd_classify, "segment, crop and classify one image")
    p.add_argument("--seg-model", required=True)
    p.add_argument("--rec-model", required=True)
    p.add_argument("--image", required=True)

    for name, func, needs_rec in (("eval-seg", cmd_eval_seg, False), ("eval-cls", cmd_eval_cls, True)):
        p = add(name, func, f"{'classification' if needs_rec else 'segmentation'} metrics on a split")
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="val")
        p.add_argument("--seg-model", required=True)
        if needs_rec:
            p.add_argument("--rec-model", required=True)
        p.add_argument("--out", help="also write the report here")

    p = add("grad-check", cmd_grad_check, "developer gradient suite (64-bit)", figures=False)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--only", help="comma-separated case names")
    return parser


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ValueError, OSError, KeyError) as exc:
        sys.stderr.write(f"dermnet: error: {exc}\n")
        return DATA_ERROR


def main() -> None:
    sys.exit(run_command())
