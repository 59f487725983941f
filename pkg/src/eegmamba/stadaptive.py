"""Channel/length-adaptive front end: per-task spatial convolution, dual-kernel
tokenizer, and learned class token.

A signal [B, C_i, L_i] becomes a token sequence [B, N+1, D]: the spatial conv
unifies channel counts to D without changing length; two strided convolutions
(small kernel, wide kernel) each produce token runs that are concatenated
along the token axis; the class token is prepended at index 0.  Token-major
layout [B, N, D] is fixed from the tokenizer output onwards; convolutions run
channel-major [B, D, L] and the transposes happen inside this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, broadcast_to, concat, randn


class UnknownTaskError(KeyError):
    """A task id was used before being registered."""


class SignalTooShortError(ValueError):
    """Input shorter than the widest tokenizer kernel."""


@dataclass(frozen=True)
class TaskSpec:
    """Immutable per-task metadata driving adaptive layers and heads."""

    task_id: int
    name: str
    channels: int
    num_classes: int

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"task {self.name!r}: channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError(f"task {self.name!r}: num_classes must be >= 2")


def validate_task_table(tasks: list[TaskSpec]) -> None:
    """Task ids must be dense in [0, T)."""
    ids = sorted(t.task_id for t in tasks)
    if ids != list(range(len(tasks))):
        raise ValueError(f"task ids must be dense in [0, {len(tasks)}), got {ids}")


class STAdaptive:
    """Spatio-temporal-adaptive tokenizer shared by all tasks."""

    def __init__(self, tasks: list[TaskSpec], d_model: int,
                 k_spatial: int = 1, k_small: int = 8, s_small: int = 8,
                 k_wide: int = 64, s_wide: int = 8,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if k_spatial % 2 == 0:
            raise ValueError("spatial kernel must be odd to preserve length")
        validate_task_table(tasks)
        rng = rng or np.random.default_rng(0)
        self.tasks = {t.task_id: t for t in tasks}
        self.d_model = d_model
        self.k_spatial = k_spatial
        self.k_small, self.s_small = k_small, s_small
        self.k_wide, self.s_wide = k_wide, s_wide
        self.spatial_W = {
            t.task_id: randn(rng, (d_model, t.channels, k_spatial),
                             std=(t.channels * k_spatial) ** -0.5,
                             dtype=dtype, requires_grad=True)
            for t in tasks
        }
        self.small_W = randn(rng, (d_model, d_model, k_small),
                             std=(d_model * k_small) ** -0.5,
                             dtype=dtype, requires_grad=True)
        self.wide_W = randn(rng, (d_model, d_model, k_wide),
                            std=(d_model * k_wide) ** -0.5,
                            dtype=dtype, requires_grad=True)
        self.class_token = randn(rng, (d_model,), std=0.02,
                                 dtype=dtype, requires_grad=True)

    @property
    def min_length(self) -> int:
        return max(self.k_small, self.k_wide)

    def named_parameters(self, prefix: str = "st") -> dict[str, Tensor]:
        out = {f"{prefix}.spatial.{tid}": w for tid, w in sorted(self.spatial_W.items())}
        out[f"{prefix}.small_W"] = self.small_W
        out[f"{prefix}.wide_W"] = self.wide_W
        out[f"{prefix}.class_token"] = self.class_token
        return out

    # ---- stages ----------------------------------------------------------
    def spatial_adapt(self, x: Tensor, task_id: int) -> Tensor:
        """[B, C_i, L] -> [B, D, L]: channel unification, length preserved."""
        if task_id not in self.tasks:
            raise UnknownTaskError(f"task id {task_id} is not registered")
        spec = self.tasks[task_id]
        if x.ndim != 3 or x.shape[1] != spec.channels:
            raise ops.DimensionError(
                f"task {spec.name!r} expects {spec.channels} channels, "
                f"got input shape {x.shape}")
        return ops.conv1d(x, self.spatial_W[task_id], stride=1,
                          padding=(self.k_spatial - 1) // 2)

    def token_count(self, L: int) -> tuple[int, int]:
        """Exact (N_small, N_wide) the tokenizer will produce for length L."""
        if L < self.min_length:
            raise SignalTooShortError(
                f"signal length {L} below minimum {self.min_length} "
                f"(widest tokenizer kernel)")
        n_s = (L - self.k_small) // self.s_small + 1
        n_w = (L - self.k_wide) // self.s_wide + 1
        return n_s, n_w

    def tokenize(self, y_sa: Tensor) -> Tensor:
        """[B, D, L] -> [B, N, D]: small-kernel tokens then wide-kernel tokens."""
        L = y_sa.shape[2]
        self.token_count(L)  # validates minimum length
        z_s = ops.conv1d(y_sa, self.small_W, stride=self.s_small)
        z_w = ops.conv1d(y_sa, self.wide_W, stride=self.s_wide)
        return concat([z_s.transpose(0, 2, 1), z_w.transpose(0, 2, 1)], axis=1)

    def prepend_class_token(self, tokens: Tensor) -> Tensor:
        """[B, N, D] -> [B, N+1, D] with the learned class token at index 0."""
        B = tokens.shape[0]
        ct = broadcast_to(self.class_token.reshape(1, 1, self.d_model),
                          (B, 1, self.d_model))
        return concat([ct, tokens], axis=1)

    def forward(self, x: Tensor, task_id: int) -> Tensor:
        return self.prepend_class_token(self.tokenize(self.spatial_adapt(x, task_id)))

    __call__ = forward
