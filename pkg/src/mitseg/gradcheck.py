"""Finite-difference gradient verification.

The master oracle for every kernel: re-run the op in float64, project the
output to a scalar with a fixed random weighting, and compare tape
gradients against central differences.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, mul, reduce_sum


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
              step: float = 1e-4, seed: int = 0) -> float:
    """Max relative gradient error of `fn` at `arrays`, all inputs checked.

    Relative error is max|analytic - numeric| normalized by the largest
    gradient magnitude (floored at 1e-6 to keep zero gradients checkable).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)

    probe = [Tensor(a.copy()) for a in arrays]
    proj = rng.standard_normal(fn(*probe).shape)

    def scalar(values: Sequence[np.ndarray]) -> float:
        out = fn(*[Tensor(v) for v in values])
        return float((out.data * proj).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        loss = reduce_sum(mul(out, Tensor(proj)))
        tape.backward(loss)

    worst = 0.0
    for idx, base in enumerate(arrays):
        analytic = tensors[idx].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = scalar(arrays)
            flat[j] = orig - step
            lo = scalar(arrays)
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2.0 * step)
        denom = max(1e-6, float(np.abs(analytic).max()), float(np.abs(numeric).max()))
        worst = max(worst, float(np.abs(analytic - numeric).max()) / denom)
    return worst
