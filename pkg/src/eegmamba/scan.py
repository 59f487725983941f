"""First-order linear recurrences via sequential or work-efficient parallel scan.

The recurrence ``h_t = a_t * h_{t-1} + b_t`` (h_0 = 0) is evaluated either by
a direct left-to-right loop or by a Blelloch up-sweep/down-sweep prefix scan
over the associative pairs ``(a, b)`` with combine

    (a2, b2) after (a1, b1)  ->  (a1*a2, a2*b1 + b2)

Both operate on arrays shaped [B, L, ...] along axis 1 and return every h_t.
The parallel path pads L to the next power of two with the identity (1, 0).
"""

from __future__ import annotations

import numpy as np

from .tensor import Array


def scan_sequential(a: Array, b: Array) -> Array:
    """Exact left-to-right evaluation; the reference the parallel path must match."""
    B, L = a.shape[0], a.shape[1]
    h = np.empty_like(b)
    state = np.zeros_like(b[:, 0])
    for t in range(L):
        state = a[:, t] * state + b[:, t]
        h[:, t] = state
    return h


def scan_parallel(a: Array, b: Array) -> Array:
    """Work-efficient inclusive scan (up-sweep/down-sweep along axis 1)."""
    L = a.shape[1]
    if L == 1:
        return a * 0.0 + b  # single element: h_1 = b_1, kept bit-compatible
    levels = int(np.ceil(np.log2(L)))
    P = 1 << levels
    shape = list(a.shape)
    shape[1] = P
    wa = np.empty(shape, dtype=a.dtype)
    wb = np.empty(shape, dtype=b.dtype)
    wa[:, :L] = a
    wb[:, :L] = b
    if P != L:
        wa[:, L:] = 1.0  # identity elements
        wb[:, L:] = 0.0

    # up-sweep: each right node absorbs its left sibling (earlier segment)
    for d in range(levels):
        stride = 2 << d
        iL = slice((stride >> 1) - 1, P, stride)
        iR = slice(stride - 1, P, stride)
        vaL, vbL = wa[:, iL], wb[:, iL]
        vaR, vbR = wa[:, iR], wb[:, iR]
        vbR += vaR * vbL
        vaR *= vaL

    # down-sweep: convert totals to exclusive prefixes
    wa[:, P - 1] = 1.0
    wb[:, P - 1] = 0.0
    for d in range(levels - 1, -1, -1):
        stride = 2 << d
        iL = slice((stride >> 1) - 1, P, stride)
        iR = slice(stride - 1, P, stride)
        tA = wa[:, iL].copy()
        tB = wb[:, iL].copy()
        vaR, vbR = wa[:, iR], wb[:, iR]
        wa[:, iL] = vaR
        wb[:, iL] = vbR
        vbR *= tA  # prefix (earlier) combined with left-segment totals
        vbR += tB
        vaR *= tA
    # inclusive h_t = a_t * exclusive_t + b_t
    return a * wb[:, :L] + b
