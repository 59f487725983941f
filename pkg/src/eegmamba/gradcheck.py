"""Central finite-difference verification of tape gradients.

The checker perturbs every entry of every input, so keep shapes tiny.
Requires 64-bit inputs; 32-bit storage loses too many digits for the
central-difference quotient to be meaningful.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NumericInstabilityError, Tensor, nan_debug

# Entries where both gradients are below this are counted as exact agreement,
# so constant functions report error 0 instead of 0/0 noise.
_ZERO_ATOL = 1e-8
# Denominator floor as a fraction of the largest gradient entry seen in the
# check: entries this far below the dominant scale sit at the roundoff floor
# of the difference quotient and are compared absolutely instead.
_FLOOR_FRACTION = 1e-4


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``fn`` maps the inputs to a scalar Tensor.  Every input must be float64
    and finite; ``eps`` is the central-difference step.  Per-entry errors are
    relative, with the denominator floored at a small fraction of the largest
    gradient magnitude so the comparison stays above finite-difference noise.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-4]")
    for i, t in enumerate(inputs):
        if t.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 inputs (input {i} is {t.data.dtype})")
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"grad_check input {i} contains non-finite values")

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with nan_debug():
        out = fn(*inputs)
    if out.size != 1:
        raise ValueError("grad_check target must reduce to a scalar")
    if not np.isfinite(out.data):
        raise NumericInstabilityError("grad_check: non-finite scalar output")
    out.backward()

    pairs: list[tuple[float, float]] = []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(fn(*inputs).data)
            flat[j] = orig - eps
            f_minus = float(fn(*inputs).data)
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            pairs.append((fd, float(analytic.reshape(-1)[j])))

    gmax = max((max(abs(fd), abs(an)) for fd, an in pairs), default=0.0)
    floor = max(_ZERO_ATOL, _FLOOR_FRACTION * gmax)
    worst = 0.0
    for fd, an in pairs:
        scale = max(abs(fd), abs(an))
        if scale < _ZERO_ATOL:
            continue
        worst = max(worst, abs(fd - an) / max(scale, floor))
    return worst
