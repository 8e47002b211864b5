"""Developer gradient suite: every primitive and both tiny networks, 64-bit."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .recnet import RecConfig, build_recnet, rec_logits
from .segnet import SegConfig, build_segnet, seg_forward
from .tensor import Tensor, grad_check
from .training import bce_loss, cross_entropy, dice_loss

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _randn(rng, *shape, grad=True) -> Tensor:
    a = rng.standard_normal(shape)
    # keep clear of relu kinks and pooling near-ties
    a = np.where(np.abs(a) < 1e-3, np.sign(a + 1e-12) * 1e-3 + a, a)
    return Tensor(a, requires_grad=grad, dtype=np.float64)


class _Contract:
    """Sum of an output against fixed random weights, so every element matters.

    The weights are drawn on first use and reused for every perturbed call.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights = None

    def __call__(self, out: Tensor) -> Tensor:
        if self.weights is None:
            self.weights = Tensor(self.rng.standard_normal(out.shape), dtype=np.float64)
        return (out * self.weights).sum()


def _primitive_cases() -> dict[str, Callable[[np.random.Generator], tuple]]:
    def conv(padding, stride):
        def make(rng):
            x, k, b = _randn(rng, 2, 3, 7, 6), _randn(rng, 4, 3, 3, 3), _randn(rng, 4)
            r = _Contract(np.random.default_rng(rng.integers(1 << 31)))
            return (lambda x, k, b: r(T.sigmoid(T.conv2d(x, k, b, padding, stride)))), [x, k, b]
        return make

    def unary(op, *shape, positive=False):
        def make(rng):
            x = _randn(rng, *shape)
            if positive:
                x = Tensor(np.abs(x.data) + 0.5, requires_grad=True, dtype=np.float64)
            r = _Contract(np.random.default_rng(rng.integers(1 << 31)))
            return (lambda x: r(op(x))), [x]
        return make

    def binary(op, sa, sb):
        def make(rng):
            a, b = _randn(rng, *sa), _randn(rng, *sb)
            b = Tensor(np.abs(b.data) + 0.5, requires_grad=True, dtype=np.float64)
            r = _Contract(np.random.default_rng(rng.integers(1 << 31)))
            return (lambda a, b: r(op(a, b))), [a, b]
        return make

    def dense(rng):
        x, w, b = _randn(rng, 3, 5), _randn(rng, 5, 4), _randn(rng, 4)
        r = _Contract(np.random.default_rng(rng.integers(1 << 31)))
        return (lambda x, w, b: r(T.dense(x, w, b))), [x, w, b]

    def concat(rng):
        a, b = _randn(rng, 2, 3, 4, 4), _randn(rng, 2, 2, 4, 4)
        r = _Contract(np.random.default_rng(rng.integers(1 << 31)))
        return (lambda a, b: r(T.concat_channels(a, b))), [a, b]

    def bce(rng):
        z = _randn(rng, 2, 1, 5, 5)
        y = rng.random((2, 1, 5, 5)) < 0.5
        return (lambda z: bce_loss(z, y)), [z]

    def dice(rng):
        z = _randn(rng, 2, 1, 5, 5)
        y = rng.random((2, 1, 5, 5)) < 0.5
        return (lambda z: dice_loss(z, y)), [z]

    def xent(rng):
        z = _randn(rng, 6, 3)
        labels = rng.integers(0, 3, 6)
        w = rng.uniform(0.5, 2.0, 3)
        return (lambda z: cross_entropy(z, labels, w)), [z]

    return {
        "conv2d_same_s1": conv("same", 1),
        "conv2d_same_s2": conv("same", 2),
        "conv2d_valid_s1": conv("valid", 1),
        "conv2d_valid_s2": conv("valid", 2),
        "max_pool2d_2x2": unary(T.max_pool2d, 2, 3, 6, 8),
        "max_pool2d_3x3_s1": unary(lambda x: T.max_pool2d(x, 3, 1, 1), 2, 3, 5, 5),
        "upsample_nearest2x": unary(T.upsample_nearest2x, 2, 3, 3, 4),
        "concat_channels": concat,
        "slice_channels": unary(lambda x: T.slice_channels(x, 1, 3), 2, 4, 3, 3),
        "pad2d_zero": unary(lambda x: T.pad2d(x, (1, 2, 0, 1)), 1, 2, 4, 5),
        "pad2d_reflect": unary(lambda x: T.pad2d(x, (2, 1, 3, 1), "reflect"), 1, 2, 4, 5),
        "crop2d": unary(lambda x: T.crop2d(x, 1, 2, 3, 2), 1, 2, 5, 5),
        "dense": dense,
        "relu": unary(T.relu, 4, 5),
        "sigmoid": unary(T.sigmoid, 4, 5),
        "softmax": unary(T.softmax, 4, 3),
        "log_softmax": unary(T.log_softmax, 4, 3),
        "global_avg_pool": unary(T.global_avg_pool, 2, 3, 4, 4),
        "reshape": unary(lambda x: T.reshape(x, (6, 4)), 2, 3, 4),
        "sum_axis": unary(lambda x: x.sum(axis=1), 3, 4),
        "mean_axis": unary(lambda x: x.mean(axis=(0, 2)), 3, 4, 2),
        "exp": unary(T.exp, 3, 4),
        "log": unary(T.log, 3, 4, positive=True),
        "add_broadcast": binary(T.add, (3, 4), (4,)),
        "sub_broadcast": binary(T.sub, (3, 1), (3, 4)),
        "mul_broadcast": binary(T.mul, (2, 3, 4), (3, 1)),
        "div_broadcast": binary(T.div, (3, 4), (1, 4)),
        "bce_loss": bce,
        "dice_loss": dice,
        "cross_entropy": xent,
    }


def _jitter(params, rng) -> None:
    """Go to float64 and give biases random values.

    Zero-initialised biases put every pre-activation fed by dead units exactly
    on the relu kink, where central differences see half a slope.
    """
    params.astype(np.float64)
    for p in params:
        if p.name.endswith(".b"):
            p.tensor.data = 0.1 * _randn(rng, *p.shape).data


def _segnet_case(rng):
    model = build_segnet(SegConfig(depth=1, base_filters=1), seed=int(rng.integers(1 << 31)))
    _jitter(model.params, rng)
    x = _randn(rng, 1, 3, 8, 8)
    r = _Contract(np.random.default_rng(rng.integers(1 << 31)))
    tensors = [x] + [p.tensor for p in model.params]
    return (lambda *_: r(seg_forward(model, x))), tensors


def _recnet_case(rng):
    # head_units shrunk from 1024 so exhaustive differencing stays fast
    cfg = RecConfig(stem_filters=2, num_blocks=2, block_width=1, head_units=8)
    model = build_recnet(cfg, seed=int(rng.integers(1 << 31)))
    _jitter(model.params, rng)
    for p in model.params:
        p.set_trainable(True)
    full, crop = _randn(rng, 1, 3, 16, 16), _randn(rng, 1, 3, 16, 16)
    labels = rng.integers(0, 3, 1)
    tensors = [full, crop] + [p.tensor for p in model.params]

    def fn(*_):
        return cross_entropy(rec_logits(model, full, crop), labels)

    return fn, tensors


def cases() -> dict[str, Callable]:
    out = _primitive_cases()
    out["segnet_tiny"] = _segnet_case
    out["recnet_tiny"] = _recnet_case
    return out


def run_suite(seeds=range(5), names=None) -> Iterator[CheckResult]:
    for name, make in cases().items():
        if names is not None and name not in names:
            continue
        for seed in seeds:
            rng = np.random.default_rng([seed, 12345])
            start = time.perf_counter()
            fn, tensors = make(rng)
            err = grad_check(fn, tensors, eps=EPS)
            yield CheckResult(name, seed, err, time.perf_counter() - start)

