"""Differentiable primitives over NCHW tensors.

Every function takes and returns :class:`Tensor` values and registers a
backward closure through :func:`apply_op`. Gradients are computed only for
inputs that require them.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .core import ShapeError, Tensor, apply_op, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return apply_op(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return apply_op(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return apply_op(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return apply_op(out, (a, b), back)


def neg(x: Tensor) -> Tensor:
    return apply_op(-x.data, (x,), lambda g, needs: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return apply_op(out, (x,), lambda g, needs: (g * out,))


def log(x: Tensor) -> Tensor:
    return apply_op(np.log(x.data), (x,), lambda g, needs: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = x.data > 0
    return apply_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g, needs: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return apply_op(out, (x,), lambda g, needs: (g * out * (1 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return apply_op(out, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else math.prod(
        x.shape[a] for a in ((axis,) if isinstance(axis, int) else axis))
    return div(sum(x, axis=axis, keepdims=keepdims), count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_op(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g, needs):
        idx = [slice(None)] * g.ndim
        grads = []
        for k, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            idx[axis] = slice(bounds[k], bounds[k + 1])
            grads.append(g[tuple(idx)])
        return grads

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join along the channel axis (axis 1); 1-D vectors are joined end to end."""
    return concat([a, b], axis=0 if a.ndim == 1 else 1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    axis = 0 if x.ndim == 1 else 1
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g, needs):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return apply_op(x.data[idx], (x,), back)


def pad2d(x: Tensor, pads: tuple[int, int, int, int], mode: str = "zero") -> Tensor:
    """Pad the two trailing axes by (top, bottom, left, right).

    ``mode`` is ``"zero"`` or ``"reflect"`` (mirror without repeating the edge).
    """
    top, bottom, left, right = pads
    H, W = x.shape[-2:]
    if mode == "zero":
        width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
        out = np.pad(x.data, width)

        def back(g, needs):
            return (g[..., top:top + H, left:left + W],)

        return apply_op(out, (x,), back)
    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    if max(top, bottom) >= H or max(left, right) >= W:
        raise ShapeError(f"reflection pad {pads} too large for spatial size {(H, W)}")
    rows = np.pad(np.arange(H), (top, bottom), mode="reflect")
    cols = np.pad(np.arange(W), (left, right), mode="reflect")
    out = x.data[..., rows, :][..., cols]

    def back(g, needs):
        gr = np.zeros(g.shape[:-2] + (H, g.shape[-1]), dtype=g.dtype)
        np.add.at(gr, (Ellipsis, rows, slice(None)), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (Ellipsis, cols), gr)
        return (gx,)

    return apply_op(out, (x,), back)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    H, W = x.shape[-2:]
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ShapeError(f"crop window {(top, left, height, width)} outside spatial size {(H, W)}")
    idx = (Ellipsis, slice(top, top + height), slice(left, left + width))

    def back(g, needs):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return apply_op(x.data[idx], (x,), back)


# ---------------------------------------------------------------- layers

def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OCKhKw kernel.

    ``same`` zero-pads so that the output is ceil(H/stride); ``valid`` uses no
    padding. Computed as one matrix product per kernel offset on a
    channels-last copy of the input.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    O, Ck, Kh, Kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding == "same":
        oh, pt, pb = _same_pads(H, Kh, stride)
        ow, pl, pr = _same_pads(W, Kw, stride)
    elif padding == "valid":
        if H < Kh or W < Kw:
            raise ShapeError(f"conv2d valid: input {x.shape} smaller than kernel {kernel.shape}")
        oh, ow = (H - Kh) // stride + 1, (W - Kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")

    dtype = np.result_type(x.dtype, kernel.dtype)
    xc = np.zeros((N, H + pt + pb, W + pl + pr, C), dtype=dtype)
    xc[:, pt:pt + H, pl:pl + W, :] = x.data.transpose(0, 2, 3, 1)
    wt = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0), dtype=dtype)  # Kh,Kw,C,O
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    M = N * oh * ow

    out = np.zeros((M, O), dtype=dtype)
    for i in range(Kh):
        for j in range(Kw):
            patch = xc[:, i:i + hs:stride, j:j + ws:stride, :].reshape(M, C)
            out += patch @ wt[i, j]
    out += bias.data
    out = out.reshape(N, oh, ow, O).transpose(0, 3, 1, 2)

    def back(g, needs):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(M, O)
        gx = gw = gb = None
        if needs[0]:
            gxc = np.zeros_like(xc)
            for i in range(Kh):
                for j in range(Kw):
                    gxc[:, i:i + hs:stride, j:j + ws:stride, :] += (g2 @ wt[i, j].T).reshape(N, oh, ow, C)
            gx = gxc[:, pt:pt + H, pl:pl + W, :].transpose(0, 3, 1, 2)
        if needs[1]:
            gw = np.empty((O, C, Kh, Kw), dtype=dtype)
            for i in range(Kh):
                for j in range(Kw):
                    patch = xc[:, i:i + hs:stride, j:j + ws:stride, :].reshape(M, C)
                    gw[:, :, i, j] = (patch.T @ g2).T
        if needs[2]:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return apply_op(out, (x, kernel, bias), back)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    """Max over ``window``-square windows; padding cells count as -inf.

    On ties the gradient goes to the first maximum in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if (Hp - window) % stride or (Wp - window) % stride or Hp < window or Wp < window:
        raise ShapeError(
            f"max_pool2d window {window}/stride {stride} does not tile spatial size {(H, W)}"
            + (" (odd size: pad first)" if window == stride == 2 else ""))
    oh, ow = (Hp - window) // stride + 1, (Wp - window) // stride + 1
    if padding:
        xp = np.full((N, C, Hp, Wp), -np.inf, dtype=x.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = x.data
    else:
        xp = x.data
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    out = None
    arg = np.zeros((N, C, oh, ow), dtype=np.int32)
    for a in range(window):
        for b in range(window):
            v = xp[:, :, a:a + hs:stride, b:b + ws:stride]
            if out is None:
                out = v.copy()
                continue
            better = v > out
            out[better] = v[better]
            arg[better] = a * window + b

    def back(g, needs):
        gp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
        for a in range(window):
            for b in range(window):
                gp[:, :, a:a + hs:stride, b:b + ws:stride] += np.where(arg == a * window + b, g, 0)
        return (gp[:, :, padding:padding + H, padding:padding + W],)

    return apply_op(out, (x,), back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def back(g, needs):
        *lead, h2, w2 = g.shape
        return (g.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1)),)

    return apply_op(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, [N,C,H,W] -> [N,C]."""
    return mean(x, axis=(2, 3))


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weights {weights.shape}")
    out = x.data @ weights.data + bias.data

    def back(g, needs):
        return (g @ weights.data.T if needs[0] else None,
                x.data.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return apply_op(out, (x, weights, bias), back)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by max-subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return apply_op(p, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g, needs):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return apply_op(out, (x,), back)
