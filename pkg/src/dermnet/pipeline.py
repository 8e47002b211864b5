"""Segment, crop, classify: the two networks chained for a single image."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import imaging
from .datasets import CLASSES
from .recnet import RecModel, rec_forward
from .segnet import SegModel, predict_mask
from .tensor import Tensor


@dataclass
class PipelineResult:
    mask: np.ndarray
    crop: np.ndarray
    probabilities: tuple[float, float, float]
    predicted_label: str
    empty_mask_fallback: bool = False

    def to_json(self) -> str:
        """The classify record; key order and float formatting are fixed."""
        doc = {
            "probabilities": [float(p) for p in self.probabilities],
            "label": self.predicted_label,
            "empty_mask_fallback": self.empty_mask_fallback,
        }
        return json.dumps(doc, separators=(",", ":"))


def argmax_lowest(values) -> int:
    """Index of the maximum, first index on exact ties."""
    values = list(values)
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def classify_image(seg: SegModel, rec: RecModel, image: np.ndarray) -> PipelineResult:
    mask = predict_mask(seg, image)
    fallback = not mask.any()
    crop = imaging.crop_from_mask(image, mask)
    dtype = rec.params["head.out.w"].data.dtype
    full_x = imaging.to_input(image)[None].astype(dtype)
    crop_x = imaging.to_input(crop)[None].astype(dtype)
    probs = rec_forward(rec, Tensor(full_x), Tensor(crop_x)).data[0]
    probs = tuple(float(p) for p in probs)
    return PipelineResult(mask, crop, probs, CLASSES[argmax_lowest(probs)], fallback)
