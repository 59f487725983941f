"""Memory/latency scaling of one token-mixing block versus sequence length.

Two width-matched block kinds run eval-mode forwards over a length sweep:
the selective-scan block (linear in L) and a deliberately naive single-head
attention block that materializes the full [L, L] score matrix (quadratic).
Peak allocation is tracked per forward via the allocator (tracemalloc);
latency rows time repeated forwards without the tracer.  Lengths whose
predicted footprint exceeds the memory budget are recorded as OOM rows and
the sweep continues.
"""

from __future__ import annotations

import os
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blocks import BiMambaBlock, DirectionalityConfig
from .tensor import Tensor, no_grad, randn, zeros

KINDS = ("bimamba", "naive-attention")
OOM_SENTINEL = -1

CSV_HEADER = ("model_kind,L,peak_bytes,latency_ms_median,"
              "latency_ms_min,latency_ms_max,threads")


def thread_count() -> int:
    for var in ("EEGMAMBA_NUM_THREADS", "OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS"):
        v = os.environ.get(var)
        if v:
            return int(v)
    return os.cpu_count() or 1


@dataclass
class BenchRow:
    model_kind: str
    L: int
    peak_bytes: int                 # OOM_SENTINEL when the row was skipped
    latency_ms_median: float
    latency_ms_min: float
    latency_ms_max: float
    throughput_tokens_s: float
    threads: int

    @property
    def oom(self) -> bool:
        return self.peak_bytes == OOM_SENTINEL


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)

    def for_kind(self, kind: str) -> list[BenchRow]:
        return [r for r in self.rows if r.model_kind == kind and not r.oom]


class NaiveAttentionBlock:
    """Single-head scaled dot-product attention + MLP, both pre-norm residual.

    The [B, L, L] score matrix is materialized on purpose; this is the
    quadratic reference point, not an efficient implementation.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, dtype=np.float32):
        D = d_model
        self.d_model = D

        def w(shape, fan):
            return randn(rng, shape, std=fan ** -0.5, dtype=dtype, requires_grad=True)

        self.norm1_g = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
        self.norm1_b = zeros(D, dtype=dtype, requires_grad=True)
        self.W_q, self.W_k, self.W_v = w((D, D), D), w((D, D), D), w((D, D), D)
        self.W_o = w((D, D), D)
        self.norm2_g = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
        self.norm2_b = zeros(D, dtype=dtype, requires_grad=True)
        self.W_ff1, self.b_ff1 = w((D, 2 * D), D), zeros(2 * D, dtype=dtype,
                                                         requires_grad=True)
        self.W_ff2, self.b_ff2 = w((2 * D, D), 2 * D), zeros(D, dtype=dtype,
                                                             requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.layernorm(x, self.norm1_g, self.norm1_b)
        q = ops.linear(h, self.W_q)
        k = ops.linear(h, self.W_k)
        v = ops.linear(h, self.W_v)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.d_model))
        attn = ops.softmax(scores, axis=-1)          # [B, L, L]
        x = x + ops.linear(attn @ v, self.W_o)
        h = ops.layernorm(x, self.norm2_g, self.norm2_b)
        ff = ops.linear(ops.silu(ops.linear(h, self.W_ff1, self.b_ff1)),
                        self.W_ff2, self.b_ff2)
        return x + ff

    __call__ = forward


def _build(kind: str, d_model: int, d_state: int, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "bimamba":
        blk = BiMambaBlock(d_model, d_state=d_state, rng=rng, dtype=np.float32)
        cfg = DirectionalityConfig()
        return lambda x: blk.forward(x, cfg)
    if kind == "naive-attention":
        blk = NaiveAttentionBlock(d_model, rng)
        return blk.forward
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


def _estimate_bytes(kind: str, B: int, L: int, d_model: int, d_state: int) -> int:
    """Rough forward footprint used to skip rows that cannot fit."""
    if kind == "naive-attention":
        return 3 * B * L * L * 4 + 12 * B * L * d_model * 4
    E = 2 * d_model
    return (3 * E * d_state + 14 * E) * B * L * 4


def default_memory_budget() -> int:
    try:
        import psutil
        return int(psutil.virtual_memory().available * 0.7)
    except Exception:
        return 4 << 30


def bench_forward(model_kind: str, d_model: int, lengths: list[int],
                  repeats: int = 5, warmup: int = 2, batch: int = 16,
                  d_state: int = 8, seed: int = 0,
                  memory_budget: int | None = None) -> BenchResult:
    """Eval-mode sweep over token counts; one row per length."""
    budget = memory_budget if memory_budget is not None else default_memory_budget()
    forward = _build(model_kind, d_model, d_state, seed)
    threads = thread_count()
    rng = np.random.default_rng(seed + 1)
    result = BenchResult()
    for L in lengths:
        if _estimate_bytes(model_kind, batch, L, d_model, d_state) > budget:
            result.rows.append(BenchRow(model_kind, L, OOM_SENTINEL,
                                        float("nan"), float("nan"), float("nan"),
                                        float("nan"), threads))
            continue
        x = Tensor(rng.standard_normal((batch, L, d_model)).astype(np.float32))
        try:
            with no_grad():
                out = forward(x)
                assert out.node is None, "benchmark forward recorded a tape"
                del out
                tracemalloc.start()
                tracemalloc.reset_peak()
                forward(x)
                _, peak = tracemalloc.get_traced_memory()
                tracemalloc.stop()
                times = []
                for _ in range(warmup):
                    forward(x)
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    forward(x)
                    times.append((time.perf_counter() - t0) * 1e3)
        except MemoryError:
            if tracemalloc.is_tracing():
                tracemalloc.stop()
            result.rows.append(BenchRow(model_kind, L, OOM_SENTINEL,
                                        float("nan"), float("nan"), float("nan"),
                                        float("nan"), threads))
            continue
        med = float(np.median(times))
        result.rows.append(BenchRow(
            model_kind, L, int(peak), med, float(min(times)), float(max(times)),
            batch * L / (med / 1e3), threads))
    return result


def emit_report(result: BenchResult, path) -> None:
    """Fixed-order CSV; OOM rows carry the sentinel peak and empty latencies."""
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in result.rows:
            if r.oom:
                f.write(f"{r.model_kind},{r.L},{OOM_SENTINEL},,,,{r.threads}\n")
            else:
                f.write(f"{r.model_kind},{r.L},{r.peak_bytes},"
                        f"{r.latency_ms_median:.3f},{r.latency_ms_min:.3f},"
                        f"{r.latency_ms_max:.3f},{r.threads}\n")


# ---------------------------------------------------------------------------
# scaling fits
# ---------------------------------------------------------------------------

def fit_r2(L: np.ndarray, y: np.ndarray, degree: int) -> float:
    """R-squared of a least-squares polynomial fit of the given degree."""
    coeffs = np.polyfit(L, y, degree)
    pred = np.polyval(coeffs, L)
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def scaling_summary(result: BenchResult) -> dict[str, float]:
    """R-squared of linear/quadratic memory fits per model kind."""
    out = {}
    for kind in KINDS:
        rows = result.for_kind(kind)
        if len(rows) < 3:
            continue
        L = np.array([r.L for r in rows], dtype=np.float64)
        mem = np.array([r.peak_bytes for r in rows], dtype=np.float64)
        out[f"{kind}_linear_r2"] = fit_r2(L, mem, 1)
        out[f"{kind}_quadratic_r2"] = fit_r2(L, mem, 2)
    return out
