"""Joint multi-task training: composite loss (cross-entropy + weighted
auxiliary router losses), adaptive-moment optimizer, stratified train/eval
split, per-task metric reports, and CSV history emission."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .metrics import accuracy, macro_f1, multiclass_auc
from .model import EEGMamba, save_checkpoint
from .moe import GateDecision, activation_stats, balance_loss, z_loss
from .data import iterate_batches
from .tensor import Tensor, no_grad


class TrainingDivergenceError(RuntimeError):
    """A loss term became non-finite during a step."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 2e-4
    aux_weight: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_fraction: float = 0.2
    # stop once mean eval accuracy reaches this (None trains all epochs)
    target_accuracy: float | None = None

    @classmethod
    def multi_task(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 100, **overrides})

    @classmethod
    def single_task(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 200, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TaskMetrics:
    accuracy: float
    auc: float
    f1: float


@dataclass
class MetricsReport:
    per_task: dict[int, TaskMetrics]
    mean_accuracy: float
    activation_matrix: np.ndarray | None = None

    def row(self) -> dict[str, float]:
        out = {"mean_accuracy": self.mean_accuracy}
        for tid, m in sorted(self.per_task.items()):
            out[f"task{tid}_acc"] = m.accuracy
            out[f"task{tid}_auc"] = m.auc
            out[f"task{tid}_f1"] = m.f1
        return out


class Adam:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / bias1
            vhat = self.v[k] / bias2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def train_step(model: EEGMamba, batch, optimizer: Adam, aux_weight: float,
               rng: np.random.Generator) -> dict[str, float]:
    """One gradient step; returns the finite loss terms {ce, balance, z}."""
    optimizer.zero_grad()
    logits, _, gates = model.forward(batch.x, batch.task_id, train=True, rng=rng)
    ce = ops.cross_entropy(logits, batch.labels)
    losses = {"ce": float(ce.data)}
    total = ce
    if gates:
        l_balance = balance_loss(gates[0].weights)
        l_z = z_loss(gates[0].logits)
        for g in gates[1:]:
            l_balance = l_balance + balance_loss(g.weights)
            l_z = l_z + z_loss(g.logits)
        losses["balance"] = float(l_balance.data)
        losses["z"] = float(l_z.data)
        if aux_weight != 0.0:
            total = total + aux_weight * (l_balance + l_z)
    else:
        losses["balance"] = 0.0
        losses["z"] = 0.0
    for name, v in losses.items():
        if not np.isfinite(v):
            raise TrainingDivergenceError(
                f"non-finite {name} loss on task {batch.task_id}")
    total.backward()
    optimizer.step()
    return losses


def evaluate(model: EEGMamba, container, indices: np.ndarray,
             batch_size: int = 128, collect_gates: bool = True) -> MetricsReport:
    """Deterministic eval (no gate noise); per-task ACC / AUC / macro-F1."""
    rng = np.random.default_rng(0)  # only used for batch crops
    scores: dict[int, list] = {}
    labels: dict[int, list] = {}
    decisions: list[tuple[int, GateDecision]] = []
    with no_grad():
        for batch in iterate_batches(container, batch_size, rng,
                                     indices=indices, shuffle=False):
            logits, gate, _ = model.forward(batch.x, batch.task_id, train=False)
            prob = ops.softmax(logits, axis=1).data
            scores.setdefault(batch.task_id, []).append(prob)
            labels.setdefault(batch.task_id, []).append(batch.labels)
            if collect_gates and gate is not None:
                decisions.extend((batch.task_id, d) for d in gate.rows())
    per_task = {}
    for tid in sorted(scores):
        s = np.concatenate(scores[tid])
        y = np.concatenate(labels[tid])
        pred = s.argmax(axis=1)
        per_task[tid] = TaskMetrics(accuracy=accuracy(y, pred),
                                    auc=multiclass_auc(y, s),
                                    f1=macro_f1(y, pred))
    mat = None
    if decisions:
        mat = activation_stats(decisions, num_tasks=len(model.config.tasks),
                               num_experts=model.config.moe.num_experts)
    mean_acc = float(np.mean([m.accuracy for m in per_task.values()]))
    return MetricsReport(per_task=per_task, mean_accuracy=mean_acc,
                         activation_matrix=mat)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def stratified_split(container, eval_fraction: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (task, class)-stratified split into train/eval indices."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i in range(container.num_samples):
        tid, label, _ = container.meta(i)
        groups.setdefault((tid, label), []).append(i)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1)))
    train_idx, eval_idx = [], []
    for key in sorted(groups):
        idx = np.array(groups[key])
        idx = idx[rng.permutation(len(idx))]
        n_eval = max(1, int(round(len(idx) * eval_fraction)))
        eval_idx.extend(idx[:n_eval])
        train_idx.extend(idx[n_eval:])
    return np.sort(np.array(train_idx)), np.sort(np.array(eval_idx))


@dataclass
class RunResult:
    history: list[dict[str, float]]
    best_epoch: int
    best_accuracy: float
    best_checkpoint: str | None
    final_report: MetricsReport


def run_training(model: EEGMamba, container, config: TrainConfig,
                 out_dir: str | None = None,
                 log=None) -> RunResult:
    """Fixed-seed training loop with best-checkpoint selection by mean eval
    accuracy; emits loss/metric history (and the expert-activation matrix of
    the best epoch) as CSV when ``out_dir`` is given."""
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    data_rng = np.random.default_rng(seeds[0])
    noise_rng = np.random.default_rng(seeds[1])
    train_idx, eval_idx = stratified_split(container, config.eval_fraction,
                                           config.seed)
    optimizer = Adam(model.named_parameters(), config.learning_rate,
                     config.beta1, config.beta2, config.adam_eps)
    history: list[dict[str, float]] = []
    best_acc, best_epoch = -1.0, -1
    best_path = None
    best_matrix = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        best_path = os.path.join(out_dir, "best.ckpt")
    for epoch in range(config.epochs):
        sums = {"ce": 0.0, "balance": 0.0, "z": 0.0}
        n_steps = 0
        for batch in iterate_batches(container, config.batch_size, data_rng,
                                     indices=train_idx, shuffle=True):
            losses = train_step(model, batch, optimizer, config.aux_weight,
                                noise_rng)
            for k in sums:
                sums[k] += losses[k]
            n_steps += 1
        report = evaluate(model, container, eval_idx, config.batch_size)
        row = {"epoch": float(epoch),
               **{f"loss_{k}": v / max(1, n_steps) for k, v in sums.items()},
               **report.row()}
        history.append(row)
        if log:
            log(row)
        if report.mean_accuracy > best_acc:
            best_acc, best_epoch = report.mean_accuracy, epoch
            best_matrix = report.activation_matrix
            if best_path is not None:
                save_checkpoint(model, best_path)
        if config.target_accuracy is not None and \
                report.mean_accuracy >= config.target_accuracy:
            break
    final = evaluate(model, container, eval_idx, config.batch_size)
    if out_dir is not None:
        _write_history_csv(os.path.join(out_dir, "history.csv"), history)
        if best_matrix is not None:
            from .moe import export_activation_csv
            export_activation_csv(best_matrix,
                                  os.path.join(out_dir, "activation_matrix.csv"))
    return RunResult(history=history, best_epoch=best_epoch,
                     best_accuracy=best_acc, best_checkpoint=best_path,
                     final_report=final)


def _write_history_csv(path: str, history: list[dict[str, float]]) -> None:
    if not history:
        return
    keys = list(history[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for row in history:
            w.writerow(row)
