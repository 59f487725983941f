"""Bidirectional Mamba block: pre-norm, gated forward/backward selective
scans over a causal depthwise convolution, output projection, residual.

Directionality variants (config flags, ablation-style):
  I   conv single-directional, SSM single-directional (backward path off)
  II  conv single-directional, SSM bidirectional (backward SSM reads the
      reversed forward-conv output)
  III conv and SSM both bidirectional (independent backward conv + SSM)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .ssm import SSMParams, ssm_forward
from .tensor import Tensor, randn, zeros


class DirectionalityError(ValueError):
    """Unsupported combination of conv/SSM directionality flags."""


@dataclass(frozen=True)
class DirectionalityConfig:
    conv_bidirectional: bool = True
    ssm_bidirectional: bool = True

    def __post_init__(self):
        if self.conv_bidirectional and not self.ssm_bidirectional:
            raise DirectionalityError(
                "bidirectional conv with single-directional SSM is not a "
                "supported variant (use I, II or III)")

    @classmethod
    def variant(cls, name: str) -> "DirectionalityConfig":
        table = {"I": (False, False), "II": (False, True), "III": (True, True)}
        if name not in table:
            raise DirectionalityError(f"unknown variant {name!r}; expected I, II or III")
        return cls(*table[name])

    @property
    def name(self) -> str:
        return {(False, False): "I", (False, True): "II", (True, True): "III"}[
            (self.conv_bidirectional, self.ssm_bidirectional)]


class BiMambaBlock:
    """One residual block; input and output are token sequences [B, T, D]."""

    def __init__(self, d_model: int, d_state: int = 16, expand: int = 2,
                 conv_kernel: int = 4, dt_rank: int | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        D, E = d_model, expand * d_model
        self.d_model, self.d_inner, self.conv_kernel = D, E, conv_kernel

        def w(shape, fan):
            return randn(rng, shape, std=fan ** -0.5, dtype=dtype, requires_grad=True)

        self.norm_gamma = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
        self.norm_beta = zeros(D, dtype=dtype, requires_grad=True)
        self.W_x, self.b_x = w((D, E), D), zeros(E, dtype=dtype, requires_grad=True)
        self.W_z, self.b_z = w((D, E), D), zeros(E, dtype=dtype, requires_grad=True)
        self.conv_f_W = w((E, 1, conv_kernel), conv_kernel)
        self.conv_f_b = zeros(E, dtype=dtype, requires_grad=True)
        self.conv_b_W = w((E, 1, conv_kernel), conv_kernel)
        self.conv_b_b = zeros(E, dtype=dtype, requires_grad=True)
        self.ssm_f = SSMParams.create(E, d_state, rng, dt_rank=dt_rank, dtype=dtype)
        self.ssm_b = SSMParams.create(E, d_state, rng, dt_rank=dt_rank, dtype=dtype)
        self.W_out, self.b_out = w((E, D), E), zeros(D, dtype=dtype, requires_grad=True)

    # ---- parameter plumbing ---------------------------------------------
    def named_parameters(self, prefix: str = "block") -> dict[str, Tensor]:
        out = {
            f"{prefix}.norm_gamma": self.norm_gamma,
            f"{prefix}.norm_beta": self.norm_beta,
            f"{prefix}.W_x": self.W_x, f"{prefix}.b_x": self.b_x,
            f"{prefix}.W_z": self.W_z, f"{prefix}.b_z": self.b_z,
            f"{prefix}.conv_f_W": self.conv_f_W, f"{prefix}.conv_f_b": self.conv_f_b,
            f"{prefix}.conv_b_W": self.conv_b_W, f"{prefix}.conv_b_b": self.conv_b_b,
        }
        out.update(self.ssm_f.named(f"{prefix}.ssm_f"))
        out.update(self.ssm_b.named(f"{prefix}.ssm_b"))
        out[f"{prefix}.W_out"] = self.W_out
        out[f"{prefix}.b_out"] = self.b_out
        return out

    def swap_directions(self) -> None:
        """Exchange forward and backward conv/SSM parameters (symmetry tests)."""
        self.conv_f_W, self.conv_b_W = self.conv_b_W, self.conv_f_W
        self.conv_f_b, self.conv_b_b = self.conv_b_b, self.conv_f_b
        self.ssm_f, self.ssm_b = self.ssm_b, self.ssm_f

    # ---- forward ---------------------------------------------------------
    def _conv(self, x_cl: Tensor, W: Tensor, b: Tensor) -> Tensor:
        # x_cl is channel-major [B, E, T]; depthwise causal conv keeps length
        return ops.conv1d(x_cl, W, b, stride=1, padding="causal",
                          groups=self.d_inner)

    def ssm_paths(self, u_f_tokens: Tensor, x_cl: Tensor,
                  cfg: DirectionalityConfig, parallel: bool = False,
                  skip: bool = True) -> Tensor:
        """Sum of directional scans given the forward conv output (token-major)
        and the pre-conv channel-major activation (for the backward conv)."""
        y = ssm_forward(u_f_tokens, self.ssm_f, parallel=parallel, skip=skip)
        if not cfg.ssm_bidirectional:
            return y
        if cfg.conv_bidirectional:
            u_b = self._conv(x_cl.flip(2), self.conv_b_W, self.conv_b_b)
            u_b = u_b.transpose(0, 2, 1)
        else:
            u_b = u_f_tokens.flip(1)
        y_b = ssm_forward(u_b, self.ssm_b, parallel=parallel, skip=skip).flip(1)
        return y + y_b

    def forward(self, tokens: Tensor, cfg: DirectionalityConfig | None = None,
                parallel: bool = False, ssm_skip: bool = True) -> Tensor:
        cfg = cfg or DirectionalityConfig()
        normed = ops.layernorm(tokens, self.norm_gamma, self.norm_beta)
        X = ops.linear(normed, self.W_x, self.b_x)    # [B, T, E]
        Z = ops.linear(normed, self.W_z, self.b_z)
        x_cl = X.transpose(0, 2, 1)                   # [B, E, T] for conv
        u_f = self._conv(x_cl, self.conv_f_W, self.conv_f_b).transpose(0, 2, 1)
        y = self.ssm_paths(u_f, x_cl, cfg, parallel=parallel, skip=ssm_skip)
        gated = y * ops.silu(Z)
        return tokens + ops.linear(gated, self.W_out, self.b_out)

    __call__ = forward


def stack_forward(tokens: Tensor, blocks: list[BiMambaBlock],
                  cfg: DirectionalityConfig | None = None,
                  parallel: bool = False, ssm_skip: bool = True) -> Tensor:
    """Sequential composition of blocks; shape is preserved throughout."""
    if not blocks:
        raise ValueError("stack_forward requires at least one block")
    for blk in blocks:
        tokens = blk.forward(tokens, cfg, parallel=parallel, ssm_skip=ssm_skip)
    return tokens
