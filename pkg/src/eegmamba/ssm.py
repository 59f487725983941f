"""Selective state-space core: input-dependent parameters, zero-order-hold
discretization, and the linear recurrence with sequential/parallel evaluation.

Layouts: x is [B, L, D]; per-step state h_t is [B, D, N]; the discretized
transition/input arrays are [B, L, D, N].  The diagonal state matrix is
parameterized as A = -exp(A_log) so |exp(dt*A)| < 1 for every dt > 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops, scan
from .tensor import Array, DimensionError, Tensor, _record, randn


class DomainError(ValueError):
    """An input left the valid domain (e.g. non-positive step size)."""


@dataclass
class SSMParams:
    """Learned parameters of one selective scan direction.

    ``proj_dt_low``/``proj_dt_up`` form the low-rank map producing the raw
    step size; the effective step is softplus(raw + dt_bias) > 0.
    """

    A_log: Tensor        # [D, N]; A = -exp(A_log)
    proj_B: Tensor       # [D, N]
    proj_C: Tensor       # [D, N]
    proj_dt_low: Tensor  # [D, R]
    proj_dt_up: Tensor   # [R, D]
    dt_bias: Tensor      # [D]
    skip_D: Tensor       # [D]; direct feedthrough gain

    @classmethod
    def create(cls, d_model: int, d_state: int, rng: np.random.Generator,
               dt_rank: int | None = None, dt_range: tuple[float, float] = (1e-3, 1e-1),
               dtype=np.float64) -> "SSMParams":
        """Standard initialization: A rows log(1..N), step sizes log-uniform
        in ``dt_range`` (mapped through inverse softplus into the bias)."""
        R = dt_rank or max(1, d_model // 16)
        A_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64),
                               (d_model, 1)))
        dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), d_model))
        dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
        def w(shape, fan):
            return randn(rng, shape, std=fan ** -0.5, dtype=dtype, requires_grad=True)
        return cls(
            A_log=Tensor(A_log.astype(dtype), requires_grad=True),
            proj_B=w((d_model, d_state), d_model),
            proj_C=w((d_model, d_state), d_model),
            proj_dt_low=w((d_model, R), d_model),
            proj_dt_up=w((R, d_model), R),
            dt_bias=Tensor(dt_bias.astype(dtype), requires_grad=True),
            skip_D=Tensor(np.ones(d_model, dtype=dtype), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("A_log", "proj_B", "proj_C", "proj_dt_low", "proj_dt_up",
                 "dt_bias", "skip_D")}


def discretize(dt: Tensor, A: Tensor, B_in: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold step: abar = exp(dt*A); bbarick the first-order
    approximation dt*B.

    dt: [B, L, D] (must be > 0), A: [D, N] diagonal values, B_in: [B, L, N].
    Returns (abar, bbar), both [B, L, D, N].
    """
    if np.any(dt.data <= 0):
        raise DomainError("discretize: dt must be strictly positive "
                          "(softplus upstream was bypassed?)")
    dt4 = dt.reshape(dt.shape + (1,))                    # [B, L, D, 1]
    abar = (dt4 * A).exp()                               # exp(dt ⊗ A)
    bbar = dt4 * B_in.reshape(B_in.shape[:2] + (1,) + B_in.shape[2:])
    return abar, bbar


def _check_scan_shapes(abar: Tensor, bbar: Tensor, x: Tensor, C: Tensor) -> None:
    B, L, D, N = abar.shape
    if bbar.shape != (B, L, D, N):
        raise DimensionError(f"bbar shape {bbar.shape} != abar shape {abar.shape}")
    if x.shape != (B, L, D):
        raise DimensionError(f"x shape {x.shape} != ({B}, {L}, {D})")
    if C.shape != (B, L, N):
        raise DimensionError(f"C shape {C.shape} != ({B}, {L}, {N})")


def _scan_core(abar: Tensor, bx: Tensor, C: Tensor, parallel: bool) -> Tensor:
    """Recurrence h_t = abar_t*h_{t-1} + bx_t, then y_t = sum_n C_t*h_t.

    Registered as a single tape primitive: the backward pass runs the same
    scan machinery on the reversed sequence instead of replaying L nodes.
    """
    run = scan.scan_parallel if parallel else scan.scan_sequential
    h = run(abar.data, bx.data)                               # [B, L, D, N]
    y = np.einsum("bldn,bln->bld", h, C.data, optimize=True)

    def backward(g: Array):
        # dL/dh_t = C_t*g_t + abar_{t+1} * dL/dh_{t+1}: same recurrence, reversed
        c = np.einsum("bld,bln->bldn", g, C.data, optimize=True)
        a_rev = np.flip(abar.data, 1)
        a_shift = np.concatenate([np.ones_like(a_rev[:, :1]), a_rev[:, :-1]], axis=1)
        gh = np.flip(run(a_shift, np.flip(c, 1)), 1)
        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        d_abar = gh * h_prev
        d_bx = gh
        d_C = np.einsum("bld,bldn->bln", g, h, optimize=True)
        return (d_abar, d_bx, d_C)

    return _record("selective_scan", y, (abar, bx, C), backward)


def selective_scan_sequential(abar: Tensor, bbar: Tensor, x: Tensor,
                              C: Tensor) -> Tensor:
    """Exact left-to-right recurrence; h_0 = 0, y_t = C_t · h_t."""
    _check_scan_shapes(abar, bbar, x, C)
    bx = bbar * x.reshape(x.shape + (1,))
    return _scan_core(abar, bx, C, parallel=False)


def selective_scan_parallel(abar: Tensor, bbar: Tensor, x: Tensor,
                            C: Tensor) -> Tensor:
    """Same contract as the sequential scan, evaluated by the work-efficient
    prefix scan; agrees within 1e-10 relative in 64-bit mode."""
    _check_scan_shapes(abar, bbar, x, C)
    bx = bbar * x.reshape(x.shape + (1,))
    return _scan_core(abar, bx, C, parallel=True)


def ssm_forward(x: Tensor, params: SSMParams, parallel: bool = False,
                skip: bool = True) -> Tensor:
    """Full selective pass: data-dependent (dt, B, C), discretize, scan.

    x: [B, L, D] -> y: [B, L, D].  ``skip`` adds the direct feedthrough
    term skip_D * x (on by default; disable for the literal recurrence).
    """
    raw_dt = ops.linear(ops.linear(x, params.proj_dt_low), params.proj_dt_up)
    dt = ops.softplus(raw_dt + params.dt_bias)
    B_in = ops.linear(x, params.proj_B)     # [B, L, N]
    C = ops.linear(x, params.proj_C)        # [B, L, N]
    A = -params.A_log.exp()
    abar, bbar = discretize(dt, A, B_in)
    bx = bbar * x.reshape(x.shape + (1,))
    y = _scan_core(abar, bx, C, parallel=parallel)
    if skip:
        y = y + x * params.skip_D
    return y
