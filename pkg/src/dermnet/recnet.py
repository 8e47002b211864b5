"""Two-branch inception-style lesion classifier.

One backbone sees the full image, the other the lesion crop. Each ends in
global average pooling and a 1024-unit dense layer; the two vectors are
concatenated and mapped to the three class logits.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import (
    Parameter,
    ParameterSet,
    Tensor,
    concat,
    concat_channels,
    conv2d,
    dense,
    global_avg_pool,
    he_normal,
    max_pool2d,
    pad2d,
    relu,
    softmax,
)
from .tensor.checkpoint import CheckpointError, CheckpointTensor, load_checkpoint, save_checkpoint

BRANCHES = ("backbone_full", "backbone_crop")


class Phase(enum.Enum):
    HEAD_ONLY = "head_only"
    FINE_TUNE_LAST_TWO = "fine_tune_last_two"

    @classmethod
    def from_number(cls, n: int) -> "Phase":
        return {1: cls.HEAD_ONLY, 2: cls.FINE_TUNE_LAST_TWO}[int(n)]


@dataclass(frozen=True)
class RecConfig:
    stem_filters: int = 8
    num_blocks: int = 4
    block_width: int = 1
    head_units: int = 1024
    num_classes: int = 3
    share_backbones: bool = False

    def __post_init__(self):
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2 so that a final pair of blocks exists")
        if min(self.stem_filters, self.block_width, self.head_units, self.num_classes) < 1:
            raise ValueError("RecConfig sizes must be positive")

    @property
    def branch_filters(self) -> int:
        return self.block_width * self.stem_filters

    @property
    def feature_dim(self) -> int:
        """Channels leaving the last block: four concatenated branches."""
        return 4 * self.branch_filters


# (suffix, kernel, takes block input?) for the seven convs of one block
_BLOCK_CONVS = (("b1", 1), ("b2a", 1), ("b2b", 3), ("b3a", 1), ("b3b", 3), ("b3c", 3), ("b4", 1))


@dataclass
class RecModel:
    cfg: RecConfig
    params: ParameterSet
    phase: Phase = Phase.HEAD_ONLY
    _branch_prefix: dict = field(default_factory=dict, repr=False)

    def prefix(self, branch: str) -> str:
        return self._branch_prefix[branch]

    def t(self, name: str) -> Tensor:
        return self.params[name].tensor

    def backbone_params(self, branch: str) -> list[Parameter]:
        pre = self.prefix(branch) + "."
        return [p for p in self.params if p.name.startswith(pre)]

    def head_params(self) -> list[Parameter]:
        return [p for p in self.params if p.group == "head"]


def _add_conv(params: ParameterSet, rng, name: str, c_in: int, c_out: int, k: int, group: str) -> None:
    params.new(name + ".w", he_normal(rng, (c_out, c_in, k, k), c_in * k * k), group)
    params.new(name + ".b", np.zeros(c_out, np.float32), group)


def _add_backbone(params: ParameterSet, rng, cfg: RecConfig, group: str) -> None:
    _add_conv(params, rng, f"{group}.stem", 3, cfg.stem_filters, 3, group)
    c_in, bw = cfg.stem_filters, cfg.branch_filters
    for k in range(cfg.num_blocks):
        for suffix, ksize in _BLOCK_CONVS:
            src = c_in if suffix in ("b1", "b2a", "b3a", "b4") else bw
            _add_conv(params, rng, f"{group}.block{k}.{suffix}", src, bw, ksize, group)
        c_in = 4 * bw


def _add_dense(params: ParameterSet, rng, name: str, f_in: int, f_out: int) -> None:
    params.new(name + ".w", he_normal(rng, (f_in, f_out), f_in), "head")
    params.new(name + ".b", np.zeros(f_out, np.float32), "head")


def build_recnet(cfg: RecConfig = RecConfig(), seed: int = 0) -> RecModel:
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    branches = BRANCHES[:1] if cfg.share_backbones else BRANCHES
    for group in branches:
        _add_backbone(params, rng, cfg, group)
    _add_dense(params, rng, "head.full", cfg.feature_dim, cfg.head_units)
    _add_dense(params, rng, "head.crop", cfg.feature_dim, cfg.head_units)
    _add_dense(params, rng, "head.out", 2 * cfg.head_units, cfg.num_classes)
    prefixes = {b: (BRANCHES[0] if cfg.share_backbones else b) for b in BRANCHES}
    model = RecModel(cfg, params, _branch_prefix=prefixes)
    set_phase(model, Phase.HEAD_ONLY)
    return model


def config_from_checkpoint(tensors: Iterable[CheckpointTensor]) -> RecConfig:
    shapes = {t.name: t.data.shape for t in tensors}
    if "backbone_full.stem.w" not in shapes or "head.out.w" not in shapes:
        raise ValueError("checkpoint holds no recognition network")
    stem = shapes["backbone_full.stem.w"][0]
    bw = shapes["backbone_full.block0.b1.w"][0]
    num_blocks = sum(1 for n in shapes if n.startswith("backbone_full.block") and n.endswith(".b1.w"))
    return RecConfig(
        stem_filters=stem,
        num_blocks=num_blocks,
        block_width=bw // stem,
        head_units=shapes["head.full.w"][1],
        num_classes=shapes["head.out.w"][1],
        share_backbones="backbone_crop.stem.w" not in shapes,
    )


def _pad_even(x: Tensor) -> Tensor:
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        # activations are post-relu, so zero padding never wins a max
        x = pad2d(x, (0, H % 2, 0, W % 2))
    return x


def _conv(model: RecModel, x: Tensor, name: str, stride: int = 1) -> Tensor:
    return relu(conv2d(x, model.t(name + ".w"), model.t(name + ".b"), "same", stride))


def inception_block(model: RecModel, x: Tensor, name: str) -> Tensor:
    b1 = _conv(model, x, name + ".b1")
    b2 = _conv(model, _conv(model, x, name + ".b2a"), name + ".b2b")
    b3 = _conv(model, _conv(model, _conv(model, x, name + ".b3a"), name + ".b3b"), name + ".b3c")
    b4 = _conv(model, max_pool2d(x, window=3, stride=1, padding=1), name + ".b4")
    return concat([b1, b2, b3, b4], axis=1)


def backbone_features(model: RecModel, x: Tensor, branch: str) -> Tensor:
    """[N,3,H,W] -> [N, feature_dim] for one branch."""
    pre = model.prefix(branch)
    x = _conv(model, x, pre + ".stem", stride=2)
    x = max_pool2d(_pad_even(x))
    for k in range(model.cfg.num_blocks):
        if k:
            x = max_pool2d(_pad_even(x))
        x = inception_block(model, x, f"{pre}.block{k}")
    return global_avg_pool(x)


def rec_logits(model: RecModel, full: Tensor, crop: Tensor) -> Tensor:
    if full.shape[0] != crop.shape[0]:
        raise ValueError(f"batch size mismatch: full {full.shape[0]} vs crop {crop.shape[0]}")
    f = relu(dense(backbone_features(model, full, "backbone_full"), model.t("head.full.w"), model.t("head.full.b")))
    c = relu(dense(backbone_features(model, crop, "backbone_crop"), model.t("head.crop.w"), model.t("head.crop.b")))
    merged = concat_channels(f, c)
    return dense(merged, model.t("head.out.w"), model.t("head.out.b"))


def rec_forward(model: RecModel, full: Tensor, crop: Tensor) -> Tensor:
    """Class probabilities [N,3] in order melanoma, nevus, seborrheic keratosis."""
    return softmax(rec_logits(model, full, crop))


def last_two_block_prefixes(model: RecModel) -> list[str]:
    n = model.cfg.num_blocks
    prefixes = {model.prefix(b) for b in BRANCHES}
    return [f"{p}.block{k}." for p in sorted(prefixes) for k in (n - 2, n - 1)]


def set_phase(model: RecModel, phase: Phase) -> None:
    """Set trainable flags: head only, or head plus the last two blocks of both backbones."""
    if phase is Phase.FINE_TUNE_LAST_TWO and model.cfg.num_blocks < 2:
        raise ValueError("fine-tuning the last two blocks needs num_blocks >= 2")
    unfrozen = last_two_block_prefixes(model) if phase is Phase.FINE_TUNE_LAST_TWO else []
    for p in model.params:
        p.set_trainable(p.group == "head" or any(p.name.startswith(u) for u in unfrozen))
    model.phase = phase


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


class CheckpointMismatch(ValueError):
    pass


def load_backbone_checkpoint(model: RecModel, tensors: Iterable[CheckpointTensor], branch: str = "both") -> LoadReport:
    """Copy backbone tensors from a checkpoint into one or both branches.

    A target ``<branch>.<rest>`` takes the checkpoint tensor of the same name
    if present, else any backbone tensor ending in ``.<rest>``; this lets a
    single pretrained backbone initialise both branches. Head tensors in the
    checkpoint are ignored. Targets with no source are reported as skipped.
    """
    if branch == "both":
        targets = list(BRANCHES)
    elif branch in ("full", "crop"):
        targets = [f"backbone_{branch}"]
    else:
        raise ValueError(f"branch must be full, crop or both, not {branch!r}")
    exact: dict[str, np.ndarray] = {}
    by_suffix: dict[str, np.ndarray] = {}
    for t in tensors:
        if t.group == "head":
            continue
        exact[t.name] = t.data
        _, _, rest = t.name.partition(".")
        by_suffix.setdefault(rest, t.data)

    report = LoadReport()
    seen = set()
    for target in targets:
        for p in model.backbone_params(target):
            if p.name in seen:
                continue  # shared backbones appear under both branches
            seen.add(p.name)
            _, _, rest = p.name.partition(".")
            src = exact.get(f"{target}.{rest}")
            if src is None:
                src = by_suffix.get(rest)
            if src is None:
                report.skipped.append(p.name)
                continue
            if src.shape != p.shape:
                raise CheckpointMismatch(f"shape mismatch for {p.name}: checkpoint {src.shape} vs model {p.shape}")
            p.tensor.data = src.astype(p.tensor.dtype, copy=True)
            report.loaded.append(p.name)
    return report


def save_recnet(model: RecModel, path) -> None:
    save_checkpoint(path, model.params)


def load_recnet(path) -> RecModel:
    """Rebuild a classifier from its checkpoint (config inferred from shapes); phase starts HeadOnly."""
    tensors = load_checkpoint(path)
    model = build_recnet(config_from_checkpoint(tensors), seed=0)
    got = {t.name: t for t in tensors}
    if set(got) != set(model.params.names()):
        extra = sorted(set(got) ^ set(model.params.names()))
        raise CheckpointError(f"classifier checkpoint tensors do not match the architecture: {extra[:3]}")
    for p in model.params:
        if got[p.name].data.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {p.name}: {got[p.name].data.shape} vs {p.shape}")
        p.tensor.data = got[p.name].data.copy()
    return model
