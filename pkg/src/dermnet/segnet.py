"""Encoder/decoder lesion segmentation network with U-Net style skip connections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imaging
from .tensor import (
    ParameterSet,
    Tensor,
    concat_channels,
    conv2d,
    crop2d,
    he_normal,
    max_pool2d,
    pad2d,
    relu,
    upsample_nearest2x,
)
from .tensor.checkpoint import CheckpointError, CheckpointTensor, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class SegConfig:
    depth: int = 3
    base_filters: int = 32
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be >= 1")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level


class SegModel:
    def __init__(self, cfg: SegConfig, params: ParameterSet):
        self.cfg = cfg
        self.params = params

    def conv(self, x: Tensor, name: str, act: bool = True) -> Tensor:
        y = conv2d(x, self.params[name + ".w"].tensor, self.params[name + ".b"].tensor, "same")
        return relu(y) if act else y


def _layer_shapes(cfg: SegConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) in forward order."""
    layers = []
    c_in = cfg.in_channels
    for k in range(cfg.depth):
        f = cfg.filters(k)
        layers += [(f"seg.enc{k}.conv1", c_in, f, 3), (f"seg.enc{k}.conv2", f, f, 3)]
        c_in = f
    f = cfg.filters(cfg.depth)
    layers += [("seg.mid.conv1", c_in, f, 3), ("seg.mid.conv2", f, f, 3)]
    c_in = f
    for k in reversed(range(cfg.depth)):
        f = cfg.filters(k)
        layers += [(f"seg.dec{k}.conv1", c_in + f, f, 3), (f"seg.dec{k}.conv2", f, f, 3)]
        c_in = f
    layers.append(("seg.out", c_in, cfg.out_channels, 1))
    return layers


def build_segnet(cfg: SegConfig = SegConfig(), seed: int = 0) -> SegModel:
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, c_in, c_out, k in _layer_shapes(cfg):
        params.new(name + ".w", he_normal(rng, (c_out, c_in, k, k), c_in * k * k), "seg")
        params.new(name + ".b", np.zeros(c_out, np.float32), "seg")
    return SegModel(cfg, params)


def config_from_checkpoint(tensors: list[CheckpointTensor]) -> SegConfig:
    shapes = {t.name: t.data.shape for t in tensors}
    depth = sum(1 for n in shapes if n.startswith("seg.enc") and n.endswith(".conv1.w"))
    if depth == 0 or "seg.enc0.conv1.w" not in shapes:
        raise ValueError("checkpoint holds no segmentation network")
    out_c, in_c = shapes["seg.enc0.conv1.w"][:2]
    return SegConfig(depth=depth, base_filters=out_c, in_channels=in_c,
                     out_channels=shapes["seg.out.w"][0])


def seg_forward(model: SegModel, batch: Tensor) -> Tensor:
    """Per-pixel lesion logits [N,1,H,W] for a normalized [N,3,H,W] batch.

    Inputs are reflection-padded up to a multiple of 2**depth and the output
    is cropped back, so any H, W >= 2**depth is accepted.
    """
    depth = model.cfg.depth
    N, C, H, W = batch.shape
    unit = 2 ** depth
    if H < unit or W < unit:
        raise ValueError(f"input {H}x{W} smaller than {unit}x{unit} required by depth {depth}")
    ph, pw = -H % unit, -W % unit
    x = batch
    if ph or pw:
        x = pad2d(x, (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2), mode="reflect")

    skips = []
    for k in range(depth):
        x = model.conv(x, f"seg.enc{k}.conv1")
        x = model.conv(x, f"seg.enc{k}.conv2")
        skips.append(x)
        x = max_pool2d(x)
    x = model.conv(x, "seg.mid.conv1")
    x = model.conv(x, "seg.mid.conv2")
    for k in reversed(range(depth)):
        x = concat_channels(upsample_nearest2x(x), skips[k])
        x = model.conv(x, f"seg.dec{k}.conv1")
        x = model.conv(x, f"seg.dec{k}.conv2")
    logits = model.conv(x, "seg.out", act=False)
    if ph or pw:
        logits = crop2d(logits, ph // 2, pw // 2, H, W)
    return logits


def predict_logits(model: SegModel, image: np.ndarray) -> np.ndarray:
    """[150,150] logits for one RGB image."""
    x = imaging.to_input(image)[None]
    x = x.astype(model.params["seg.out.w"].data.dtype)
    return seg_forward(model, Tensor(x)).data[0, 0]


def predict_mask(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Binary lesion mask at the original image resolution."""
    logits = predict_logits(model, image)
    # sigmoid(z) >= 0.5 exactly when z >= 0
    small = logits >= 0
    h, w = image.shape[:2]
    return imaging.resize_nearest(small, h, w)


def save_segnet(model: SegModel, path) -> None:
    save_checkpoint(path, model.params)


def load_segnet(path) -> SegModel:
    """Rebuild a segmentation network from its checkpoint; the config is read off tensor shapes."""
    tensors = load_checkpoint(path)
    model = build_segnet(config_from_checkpoint(tensors), seed=0)
    names = set(model.params.names())
    for t in tensors:
        if t.name not in names:
            raise CheckpointError(f"unexpected tensor {t.name} in segmentation checkpoint")
        if t.data.shape != model.params[t.name].shape:
            raise CheckpointError(f"shape mismatch for {t.name}: {t.data.shape} vs {model.params[t.name].shape}")
        model.params[t.name].tensor.data = t.data.copy()
    missing = names - {t.name for t in tensors}
    if missing:
        raise CheckpointError(f"segmentation checkpoint lacks {sorted(missing)[:3]}")
    return model
