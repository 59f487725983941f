"""Model assembly: adaptive tokenizer -> block stack -> mixture of experts ->
per-task classifier heads, plus versioned binary checkpoints.

One instance serves every registered task: the forward pass takes a
task-homogeneous batch [B, C_i, L], classification reads only the class
token at index 0, so logits shapes never depend on the signal length.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .blocks import BiMambaBlock, DirectionalityConfig, stack_forward
from .moe import GateResult, MoELayer
from .stadaptive import STAdaptive, TaskSpec, validate_task_table
from .tensor import Tensor, concat, no_grad, randn, zeros

CHECKPOINT_MAGIC = b"EGMB"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.float32, 1: np.float64}


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not parse as the expected container."""


class ConfigMismatchError(ValueError):
    """Checkpoint was produced by a different model configuration."""


@dataclass
class MoESettings:
    num_experts: int = 8
    k: int = 2
    d_task: int = 32
    d_ff: int | None = None
    aux_weight: float = 0.01
    task_aware: bool = True
    universal: bool = True
    per_block: bool = False  # one MoE after each block instead of a final one


@dataclass
class EEGMambaConfig:
    """Everything needed to build the model deterministically from a seed."""

    tasks: list[TaskSpec]
    d_model: int = 256
    n_blocks: int = 8
    d_state: int = 16
    expand: int = 2
    conv_kernel: int = 4
    dt_rank: int | None = None
    k_spatial: int = 1
    k_small: int = 8
    s_small: int = 8
    k_wide: int = 64
    s_wide: int = 8
    moe: MoESettings | None = field(default_factory=MoESettings)
    directionality: str = "III"
    ssm_skip: bool = True
    parallel_scan: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        validate_task_table(self.tasks)
        DirectionalityConfig.variant(self.directionality)
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    # ---- presets ----------------------------------------------------------
    @classmethod
    def multi_task(cls, tasks: list[TaskSpec], **overrides) -> "EEGMambaConfig":
        """8 blocks, width 256, mixture of experts enabled."""
        base = dict(d_model=256, n_blocks=8, moe=MoESettings())
        base.update(overrides)
        return cls(tasks=tasks, **base)

    @classmethod
    def single_task(cls, tasks: list[TaskSpec], **overrides) -> "EEGMambaConfig":
        """2 blocks, width 128, mixture of experts disabled."""
        base = dict(d_model=128, n_blocks=2, moe=None)
        base.update(overrides)
        return cls(tasks=tasks, **base)

    # ---- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [asdict(t) for t in self.tasks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EEGMambaConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d["tasks"] = [TaskSpec(**t) for t in d.get("tasks", [])]
        if d.get("moe") is not None:
            moe_d = dict(d["moe"])
            unknown = set(moe_d) - set(MoESettings.__dataclass_fields__)
            if unknown:
                raise ValueError(f"unknown moe config keys: {sorted(unknown)}")
            d["moe"] = MoESettings(**moe_d)
        return cls(**d)


class EEGMamba:
    """The assembled multi-task classifier."""

    def __init__(self, config: EEGMambaConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        self.dir_cfg = DirectionalityConfig.variant(config.directionality)
        self.st = STAdaptive(
            config.tasks, config.d_model, k_spatial=config.k_spatial,
            k_small=config.k_small, s_small=config.s_small,
            k_wide=config.k_wide, s_wide=config.s_wide, rng=rng, dtype=dtype)
        self.blocks = [
            BiMambaBlock(config.d_model, d_state=config.d_state,
                         expand=config.expand, conv_kernel=config.conv_kernel,
                         dt_rank=config.dt_rank, rng=rng, dtype=dtype)
            for _ in range(config.n_blocks)
        ]
        self.moes: list[MoELayer] = []
        if config.moe is not None:
            n_moe = config.n_blocks if config.moe.per_block else 1
            self.moes = [
                MoELayer(config.d_model, num_tasks=len(config.tasks),
                         num_experts=config.moe.num_experts, k=config.moe.k,
                         d_task=config.moe.d_task, d_ff=config.moe.d_ff,
                         task_aware=config.moe.task_aware,
                         universal=config.moe.universal, rng=rng, dtype=dtype)
                for _ in range(n_moe)
            ]
        self.heads = {
            t.task_id: (randn(rng, (config.d_model, t.num_classes),
                              std=config.d_model ** -0.5, dtype=dtype,
                              requires_grad=True),
                        zeros(t.num_classes, dtype=dtype, requires_grad=True))
            for t in config.tasks
        }

    # ---- parameters -------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = self.st.named_parameters("st")
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_parameters(f"blocks.{i}"))
        for i, m in enumerate(self.moes):
            out.update(m.named_parameters(f"moe.{i}"))
        for tid in sorted(self.heads):
            W, b = self.heads[tid]
            out[f"head.{tid}.W"] = W
            out[f"head.{tid}.b"] = b
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # ---- forward ----------------------------------------------------------
    def _to_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x if x.dtype == np.dtype(self.config.dtype) else x.astype(self.config.dtype)
        return Tensor(np.asarray(x, dtype=self.config.dtype))

    def backbone(self, x, task_id: int, train: bool = False,
                 rng: np.random.Generator | None = None
                 ) -> tuple[Tensor, list[GateResult]]:
        """Tokenize and run the block stack; in per-block mixture mode the
        class token is refreshed (residually) after every block."""
        tokens = self.st.forward(self._to_input(x), task_id)
        gates: list[GateResult] = []
        per_block = bool(self.config.moe and self.config.moe.per_block)
        for i, blk in enumerate(self.blocks):
            tokens = blk.forward(tokens, self.dir_cfg,
                                 parallel=self.config.parallel_scan,
                                 ssm_skip=self.config.ssm_skip)
            if per_block:
                t_cls = tokens[:, 0, :]
                y, g = self.moes[i](t_cls, task_id, train=train, rng=rng)
                gates.append(g)
                refreshed = (t_cls + y).reshape(tokens.shape[0], 1, -1)
                tokens = concat([refreshed, tokens[:, 1:, :]], axis=1)
        return tokens, gates

    def forward(self, x, task_id: int, train: bool = False,
                rng: np.random.Generator | None = None
                ) -> tuple[Tensor, GateResult | None, list[GateResult]]:
        """Returns (logits [B, classes_task], final gate decision or None,
        all gate decisions for auxiliary losses)."""
        if task_id not in self.heads:
            raise KeyError(f"task id {task_id} has no classifier head")
        tokens, gates = self.backbone(x, task_id, train=train, rng=rng)
        t_cls = tokens[:, 0, :]
        if self.moes and not (self.config.moe and self.config.moe.per_block):
            y, g = self.moes[0](t_cls, task_id, train=train, rng=rng)
            gates = [g]
            feats = y
        else:
            feats = t_cls
        W, b = self.heads[task_id]
        logits = ops.linear(feats, W, b)
        return logits, (gates[-1] if gates else None), gates

    __call__ = forward

    def export_features(self, x, task_id: int) -> np.ndarray:
        """Class-token features before the expert mixture; deterministic."""
        with no_grad():
            tokens, _ = self.backbone(x, task_id, train=False)
            return tokens.data[:, 0, :].copy()


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_checkpoint(model: EEGMamba, path) -> None:
    """Versioned binary: magic, u32 version, config JSON, named arrays with
    dtype/shape headers.  Little-endian throughout."""
    params = model.named_parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(model.config.to_dict()).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[t.data.dtype], t.data.ndim))
        for d in t.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(t.data.astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes())
    data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointFormatError(
            f"truncated checkpoint while reading {what} at offset {f.tell() - len(b)}")
    return b


def load_checkpoint(path, config: EEGMambaConfig | None = None) -> EEGMamba:
    """Rebuild a model from a checkpoint; if ``config`` is given it must match
    the stored one exactly."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("bad magic bytes: not a model checkpoint")
        version, = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        cfg_len, = struct.unpack("<I", _read_exact(f, 4, "config length"))
        stored = EEGMambaConfig.from_dict(json.loads(_read_exact(f, cfg_len, "config")))
        if config is not None and config.to_dict() != stored.to_dict():
            raise ConfigMismatchError(
                "checkpoint config does not match the requested configuration")
        model = EEGMamba(stored)
        params = model.named_parameters()
        n_params, = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        if n_params != len(params):
            raise CheckpointFormatError(
                f"checkpoint holds {n_params} arrays, model expects {len(params)}")
        for _ in range(n_params):
            name_len, = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(f, 2, "dtype/ndim"))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4, "dim"))[0]
                          for _ in range(ndim))
            if name not in params:
                raise CheckpointFormatError(f"unexpected parameter {name!r}")
            target = params[name]
            if shape != target.shape:
                raise CheckpointFormatError(
                    f"parameter {name!r} has shape {shape}, expected {target.shape}")
            dtype = np.dtype(_CODE_DTYPES[code]).newbyteorder("<")
            raw = _read_exact(f, int(np.prod(shape, dtype=np.int64)) * dtype.itemsize,
                              f"data of {name!r}")
            target.data = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(
                _CODE_DTYPES[code])
        return model
