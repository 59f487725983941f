"""Task-aware noisy top-k mixture of experts with a universal expert.

The gate input is the class token concatenated with a learned task embedding;
during training, Gaussian noise scaled by a learned softplus projection is
added to the gate logits.  The k largest logits survive (the rest are masked
to -inf before normalization), so exactly k task experts receive weight; the
universal expert runs on every input with weight 1 - max(gate weight).

Auxiliary losses: the balance loss is the coefficient of variation of the
per-expert importance (gate weight summed over the batch); the z-loss is the
batch mean of the squared log-sum-exp of the gate logits, which penalizes
logit magnitude and keeps routing numerically tame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import ops
from .stadaptive import UnknownTaskError
from .tensor import Array, Tensor, concat, index_add, randn, take_rows, zeros


class DegenerateGateError(ValueError):
    """Every gate weight in the batch is zero; balance loss is undefined."""


class EmptyStatsError(ValueError):
    """Activation statistics requested over an empty decision stream."""


@dataclass
class GateDecision:
    """Routing record for a single input row."""

    logits: Array          # [N_e] (noisy in train mode)
    selected: Array        # [k] expert indices, descending gate weight
    weights: Array         # [N_e], zero off-selection, nonzeros sum to 1
    omega: float           # universal-expert weight, 1 - max(weights)


@dataclass
class GateResult:
    """Batched routing decision (tensors keep the gradient path alive)."""

    logits: Tensor         # [B, N_e]
    weights: Tensor        # [B, N_e]
    selected: Array        # [B, k] int
    omega: Tensor          # [B]

    def rows(self) -> list[GateDecision]:
        return [GateDecision(self.logits.data[i].copy(), self.selected[i].copy(),
                             self.weights.data[i].copy(), float(self.omega.data[i]))
                for i in range(self.logits.shape[0])]


class Expert:
    """Two-layer perceptron D -> D_ff -> D with SiLU in between."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.W1 = randn(rng, (d_model, d_ff), std=d_model ** -0.5,
                        dtype=dtype, requires_grad=True)
        self.b1 = zeros(d_ff, dtype=dtype, requires_grad=True)
        self.W2 = randn(rng, (d_ff, d_model), std=d_ff ** -0.5,
                        dtype=dtype, requires_grad=True)
        self.b2 = zeros(d_model, dtype=dtype, requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(ops.silu(ops.linear(x, self.W1, self.b1)), self.W2, self.b2)

    __call__ = forward

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W1": self.W1, f"{prefix}.b1": self.b1,
                f"{prefix}.W2": self.W2, f"{prefix}.b2": self.b2}


class MoELayer:
    """N_e task experts + 1 always-on universal expert, noisy top-k gate."""

    def __init__(self, d_model: int, num_tasks: int, num_experts: int = 8,
                 k: int = 2, d_task: int = 32, d_ff: int | None = None,
                 task_aware: bool = True, universal: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if not 1 <= k <= num_experts:
            raise ValueError(f"k={k} outside [1, {num_experts}]")
        rng = rng or np.random.default_rng(0)
        d_ff = d_ff or 2 * d_model
        self.d_model, self.num_experts, self.k = d_model, num_experts, k
        self.d_task, self.num_tasks = d_task, num_tasks
        self.task_aware, self.universal = task_aware, universal
        self.task_experts = [Expert(d_model, d_ff, rng, dtype) for _ in range(num_experts)]
        self.universal_expert = Expert(d_model, d_ff, rng, dtype)
        self.task_embeddings = randn(rng, (num_tasks, d_task), std=0.02,
                                     dtype=dtype, requires_grad=True)
        d_cat = d_model + d_task
        self.W_gate = randn(rng, (d_cat, num_experts), std=d_cat ** -0.5,
                            dtype=dtype, requires_grad=True)
        self.b_gate = zeros(num_experts, dtype=dtype, requires_grad=True)
        self.W_noise = randn(rng, (d_cat, num_experts), std=d_cat ** -0.5,
                             dtype=dtype, requires_grad=True)
        self.b_noise = zeros(num_experts, dtype=dtype, requires_grad=True)

    def named_parameters(self, prefix: str = "moe") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, e in enumerate(self.task_experts):
            out.update(e.named(f"{prefix}.expert.{i}"))
        out.update(self.universal_expert.named(f"{prefix}.universal"))
        out[f"{prefix}.task_embeddings"] = self.task_embeddings
        out[f"{prefix}.W_gate"] = self.W_gate
        out[f"{prefix}.b_gate"] = self.b_gate
        out[f"{prefix}.W_noise"] = self.W_noise
        out[f"{prefix}.b_noise"] = self.b_noise
        return out

    # ---- routing ---------------------------------------------------------
    def gate(self, t_cls: Tensor, task_id: int, train: bool = False,
             rng: np.random.Generator | None = None) -> GateResult:
        """Noisy top-k routing for one task-homogeneous batch of class tokens."""
        if not 0 <= task_id < self.num_tasks:
            raise UnknownTaskError(f"no task embedding for task id {task_id}")
        B = t_cls.shape[0]
        if self.task_aware:
            emb = take_rows(self.task_embeddings, np.full(B, task_id, dtype=np.intp))
        else:
            emb = zeros((B, self.d_task), dtype=t_cls.dtype)  # task token ablated
        t_cat = concat([t_cls, emb], axis=1)
        logits = ops.linear(t_cat, self.W_gate, self.b_gate)
        if train:
            if rng is None:
                raise ValueError("training-mode gate needs an explicit rng")
            eps = Tensor(rng.standard_normal((B, self.num_experts)).astype(t_cls.dtype))
            logits = logits + eps * ops.softplus(
                ops.linear(t_cat, self.W_noise, self.b_noise))

        # top-k survives; the rest are suppressed before normalization (no
        # gradient flows through the selection mask itself).  The mask is a
        # finite stand-in for -inf: exp underflows to exactly 0.
        order = np.argsort(-logits.data, axis=1, kind="stable")
        selected = order[:, :self.k]
        mask = np.full_like(logits.data, -1e30)
        np.put_along_axis(mask, selected, 0.0, axis=1)
        weights = ops.softmax(logits + Tensor(mask), axis=1)
        omega = 1.0 - weights.max(axis=1)
        return GateResult(logits=logits, weights=weights, selected=selected,
                          omega=omega)

    def forward(self, t_cls: Tensor, task_id: int, train: bool = False,
                rng: np.random.Generator | None = None
                ) -> tuple[Tensor, GateResult]:
        """Sparse dispatch: exactly the k selected experts run per row, plus
        the universal expert on every row."""
        decision = self.gate(t_cls, task_id, train=train, rng=rng)
        B = t_cls.shape[0]
        y = zeros((B, self.d_model), dtype=t_cls.dtype)
        for j in range(self.num_experts):
            rows = np.nonzero((decision.selected == j).any(axis=1))[0]
            if rows.size == 0:
                continue
            w_j = take_rows(decision.weights[:, j].reshape(B, 1), rows)
            out_j = self.task_experts[j](take_rows(t_cls, rows)) * w_j
            y = index_add(y, rows, out_j)
        if self.universal:
            y = y + self.universal_expert(t_cls) * decision.omega.reshape(B, 1)
        return y, decision

    __call__ = forward


# ---------------------------------------------------------------------------
# auxiliary losses
# ---------------------------------------------------------------------------

def balance_loss(gate_weights: Tensor, per_token: bool = False) -> Tensor:
    """Coefficient of variation of expert importance over a batch.

    ``gate_weights`` is [B, N_e]. Importance_i sums expert i's gate weight
    over the batch (set ``per_token`` to average the per-row CV instead).
    Uniform importance gives 0; collapse onto one expert maximizes it.
    """
    if gate_weights.ndim != 2 or gate_weights.shape[0] < 1:
        raise ops.DimensionError("balance_loss expects gate weights [B, N_e]")
    if not np.any(gate_weights.data > 0):
        raise DegenerateGateError("all gate weights are zero")

    def cv(v: Tensor) -> Tensor:
        m = v.mean(axis=-1)
        var = (v * v).mean(axis=-1) - m * m
        return ops.safe_sqrt(var) / m

    if per_token:
        return cv(gate_weights).mean()
    return cv(gate_weights.sum(axis=0))


def z_loss(logits: Tensor) -> Tensor:
    """Batch mean of (log sum exp of gate logits)^2."""
    if logits.ndim != 2:
        raise ops.DimensionError("z_loss expects logits [B, N_e]")
    lse = ops.logsumexp(logits, axis=1)
    return (lse * lse).mean()


# ---------------------------------------------------------------------------
# activation statistics
# ---------------------------------------------------------------------------

def activation_stats(decisions: Iterable[tuple[int, GateDecision]],
                     num_tasks: int | None = None,
                     num_experts: int | None = None) -> Array:
    """P(expert j selected | task t) over a decision stream.

    Each decision selects k experts, so every row sums to k.  Raises if the
    stream is empty or any task in [0, num_tasks) produced no decisions.
    """
    items = list(decisions)
    if not items:
        raise EmptyStatsError("no gate decisions supplied")
    if num_experts is None:
        num_experts = items[0][1].weights.shape[0]
    if num_tasks is None:
        num_tasks = max(t for t, _ in items) + 1
    counts = np.zeros((num_tasks, num_experts))
    totals = np.zeros(num_tasks)
    for task_id, dec in items:
        counts[task_id, dec.selected] += 1.0
        totals[task_id] += 1.0
    if np.any(totals == 0):
        missing = np.nonzero(totals == 0)[0].tolist()
        raise EmptyStatsError(f"tasks without decisions: {missing}")
    return counts / totals[:, None]


def export_activation_csv(matrix: Array, path) -> None:
    """Rows of (task_id, expert_id, probability)."""
    with open(path, "w") as f:
        f.write("task_id,expert_id,probability\n")
        for t in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                f.write(f"{t},{j},{matrix[t, j]:.6f}\n")
