"""Central-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import ShapeError, Tape, Tensor


def grad_check(
    fn: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` is called as ``fn(x)`` for a single tensor or ``fn(*x)`` for a
    sequence and must return a scalar. Only inputs with ``requires_grad`` are
    checked. The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    ``max_coords`` caps the coordinates checked per tensor (seeded sample).
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    checked = [t for t in tensors if t.requires_grad]
    for t in checked:
        if t.dtype != np.float64:
            raise TypeError("grad_check runs in 64-bit mode; convert inputs to float64")

    def call() -> Tensor:
        return fn(*tensors)

    saved = [t.grad for t in checked]
    for t in checked:
        t.grad = None
    with Tape() as tape:
        out = call()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in checked]
    for t, g in zip(checked, saved):
        t.grad = g

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, grad in zip(checked, analytic):
        if not t.data.flags.c_contiguous or not t.data.flags.writeable:
            t.data = np.array(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = call().item()
            flat[i] = orig - eps
            fm = call().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(gflat[i])
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
