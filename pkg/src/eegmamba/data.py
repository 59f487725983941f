"""Multi-task sample store, synthetic signal generators, and batching.

Container format (little-endian): magic "EEGD", u32 version, u32 task count,
then per task (u32 id, u16 name length, utf-8 name, u32 channels, u32 classes,
f32 sampling rate); records follow until EOF, each as (u32 task_id, u32 label,
u32 length, f32 payload channel-major [C, L]).  The reader indexes record
offsets up front and loads payloads per batch, never the whole file.

Synthetic tasks are separable by construction: each class owns a distinct
generating parameter (sinusoid frequency, channel sign pattern, or amplitude
envelope rate), so an informed oracle classifies them near-perfectly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .stadaptive import TaskSpec, validate_task_table

CONTAINER_MAGIC = b"EEGD"
CONTAINER_VERSION = 1

GENERATOR_KINDS = ("sinusoid-frequency", "channel-correlation", "envelope-burst")


class ContainerFormatError(ValueError):
    """Malformed or truncated container bytes."""


class GeneratorConfigError(ValueError):
    """Synthetic task parameters are inconsistent or non-separable."""


@dataclass(frozen=True)
class TaskInfo:
    """Task-table row as stored on disk (TaskSpec plus sampling rate)."""

    task_id: int
    name: str
    channels: int
    num_classes: int
    sampling_rate: float

    def spec(self) -> TaskSpec:
        return TaskSpec(self.task_id, self.name, self.channels, self.num_classes)


@dataclass
class Batch:
    task_id: int
    x: np.ndarray        # [B, C_i, L], float32
    labels: np.ndarray   # [B], int64


@dataclass
class SyntheticTaskConfig:
    """One synthetic task; classes differ in exactly one generating parameter."""

    task_id: int
    name: str
    channels: int
    classes: int
    length_range: tuple[int, int]
    kind: str = "sinusoid-frequency"
    noise_std: float = 0.1
    seed: int = 0
    sampling_rate: float = 128.0
    # per-class parameter: frequencies (Hz) for sinusoid/envelope kinds,
    # ignored for channel-correlation (sign patterns are derived)
    class_params: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise GeneratorConfigError(
                f"unknown generator kind {self.kind!r}; expected one of {GENERATOR_KINDS}")
        if self.classes < 2:
            raise GeneratorConfigError("classes must be >= 2")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise GeneratorConfigError(f"bad length range {self.length_range}")
        if self.kind == "channel-correlation" and self.channels < 2:
            raise GeneratorConfigError("channel-correlation needs >= 2 channels")
        if self.kind in ("sinusoid-frequency", "envelope-burst"):
            params = self.params()
            if len(set(params)) != len(params):
                raise GeneratorConfigError(
                    f"class parameters overlap: {params} (classes must be separable)")
            if len(params) != self.classes:
                raise GeneratorConfigError(
                    f"{len(params)} class parameters for {self.classes} classes")

    def params(self) -> tuple[float, ...]:
        if self.class_params is not None:
            return tuple(self.class_params)
        if self.kind == "sinusoid-frequency":
            return tuple((5.0, 12.0, 21.0, 30.0, 40.0)[: self.classes])
        return tuple((1.0, 3.0, 6.0, 9.0, 13.0)[: self.classes])  # envelope rates

    def sign_patterns(self) -> np.ndarray:
        """Distinct channel sign patterns for channel-correlation classes."""
        if 2 ** (self.channels - 1) < self.classes:
            raise GeneratorConfigError(
                f"{self.channels} channels support at most {2 ** (self.channels - 1)} "
                f"correlation classes")
        pats = np.ones((self.classes, self.channels))
        for c in range(self.classes):
            for ch in range(self.channels):
                if (c >> ch) & 1:
                    pats[c, ch] = -1.0
        # channel 0 is always +1, so no pattern is another's negation
        return pats

    def info(self) -> TaskInfo:
        return TaskInfo(self.task_id, self.name, self.channels, self.classes,
                        self.sampling_rate)


def default_synthetic_suite(seed: int = 0) -> list[SyntheticTaskConfig]:
    """Four tasks spanning heterogeneous channel counts, class counts,
    generator kinds, and lengths 256..2048."""
    return [
        SyntheticTaskConfig(0, "sine-1ch", channels=1, classes=2,
                            length_range=(256, 512), kind="sinusoid-frequency",
                            noise_std=0.3),
        SyntheticTaskConfig(1, "burst-4ch", channels=4, classes=3,
                            length_range=(320, 640), kind="envelope-burst",
                            noise_std=0.3),
        SyntheticTaskConfig(2, "corr-8ch", channels=8, classes=2,
                            length_range=(384, 768), kind="channel-correlation",
                            noise_std=0.3),
        SyntheticTaskConfig(3, "sine-22ch", channels=22, classes=4,
                            length_range=(1024, 2048), kind="sinusoid-frequency",
                            noise_std=0.3),
    ]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _gen_sample(cfg: SyntheticTaskConfig, label: int, L: int,
                rng: np.random.Generator) -> np.ndarray:
    t = np.arange(L) / cfg.sampling_rate
    C = cfg.channels
    if cfg.kind == "sinusoid-frequency":
        f = cfg.params()[label]
        phase = rng.uniform(0, 2 * np.pi, (C, 1))
        x = np.sin(2 * np.pi * f * t[None, :] + phase)
    elif cfg.kind == "envelope-burst":
        # on/off amplitude bursts at a class-specific rate (baseband square
        # envelope, so burst harmonics at r, 3r, 5r... carry the class)
        rate = cfg.params()[label]
        env_phase = rng.uniform(0, 2 * np.pi)
        env = 0.5 * (1.0 + np.sign(np.sin(2 * np.pi * rate * t + env_phase)))
        gain = rng.uniform(0.8, 1.2, (C, 1))
        x = 1.5 * gain * env[None, :]
    else:  # channel-correlation
        pattern = cfg.sign_patterns()[label]
        # band-limited shared source: smoothed white noise, unit-ish power
        src = rng.standard_normal(L + 16)
        kernel = np.hanning(17)
        kernel /= np.sqrt((kernel ** 2).sum())
        src = np.convolve(src, kernel, mode="valid")
        x = pattern[:, None] * src[None, :]
    x = x + rng.standard_normal((C, L)) * cfg.noise_std
    return x.astype(np.float32)


class DatasetContainer:
    """In-memory sample store with the same reading interface as the on-disk
    reader (``num_samples``, ``meta``, ``load``)."""

    def __init__(self, tasks: list[TaskInfo]):
        validate_task_table([t.spec() for t in tasks])
        self.tasks = sorted(tasks, key=lambda t: t.task_id)
        self._samples: list[tuple[int, int, np.ndarray]] = []

    def add(self, task_id: int, label: int, x: np.ndarray) -> None:
        info = self.tasks[task_id]
        if x.shape[0] != info.channels:
            raise ValueError(
                f"sample has {x.shape[0]} channels, task {info.name!r} expects "
                f"{info.channels}")
        if not 0 <= label < info.num_classes:
            raise ValueError(f"label {label} outside [0, {info.num_classes})")
        self._samples.append((task_id, label, np.asarray(x, dtype=np.float32)))

    @property
    def num_samples(self) -> int:
        return len(self._samples)

    def meta(self, i: int) -> tuple[int, int, int]:
        """(task_id, label, length) without touching the payload."""
        tid, label, x = self._samples[i]
        return tid, label, x.shape[1]

    def load(self, i: int) -> np.ndarray:
        return self._samples[i][2]


def generate_synthetic(configs: list[SyntheticTaskConfig],
                       n_per_class: int) -> DatasetContainer:
    """Deterministic: each task draws from a generator seeded by (seed, task_id)."""
    ids = [c.task_id for c in configs]
    if len(set(ids)) != len(ids):
        raise GeneratorConfigError(f"duplicate task ids: {ids}")
    container = DatasetContainer([c.info() for c in configs])
    for cfg in configs:
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, cfg.task_id)))
        lo, hi = cfg.length_range
        for label in range(cfg.classes):
            for _ in range(n_per_class):
                L = int(rng.integers(lo, hi + 1))
                container.add(cfg.task_id, label, _gen_sample(cfg, label, L, rng))
    return container


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def write_container(container: DatasetContainer, path) -> None:
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<I", CONTAINER_VERSION))
    buf.write(struct.pack("<I", len(container.tasks)))
    for t in container.tasks:
        nb = t.name.encode("utf-8")
        buf.write(struct.pack("<I", t.task_id))
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<IIf", t.channels, t.num_classes, t.sampling_rate))
    for i in range(container.num_samples):
        tid, label, L = container.meta(i)
        x = container.load(i)
        buf.write(struct.pack("<III", tid, label, L))
        buf.write(x.astype("<f4", copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ContainerFormatError(
            f"truncated container while reading {what} at offset {f.tell() - len(b)}")
    return b


class ContainerReader:
    """Streaming reader: indexes record offsets once, loads payloads on demand."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "rb")
        f = self._f
        if _read_exact(f, 4, "magic") != CONTAINER_MAGIC:
            raise ContainerFormatError("bad magic bytes: not a dataset container")
        version, = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CONTAINER_VERSION:
            raise ContainerFormatError(f"unsupported container version {version}")
        n_tasks, = struct.unpack("<I", _read_exact(f, 4, "task count"))
        tasks = []
        for _ in range(n_tasks):
            tid, = struct.unpack("<I", _read_exact(f, 4, "task id"))
            nlen, = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "task name").decode("utf-8")
            ch, nc, sr = struct.unpack("<IIf", _read_exact(f, 12, "task fields"))
            tasks.append(TaskInfo(tid, name, ch, nc, sr))
        validate_task_table([t.spec() for t in tasks])
        self.tasks = sorted(tasks, key=lambda t: t.task_id)
        channels = {t.task_id: t.channels for t in self.tasks}
        classes = {t.task_id: t.num_classes for t in self.tasks}
        self._index: list[tuple[int, int, int, int]] = []  # task, label, L, offset
        while True:
            head = f.read(12)
            if not head:
                break
            if len(head) != 12:
                raise ContainerFormatError(
                    f"truncated record header at offset {f.tell() - len(head)}")
            tid, label, L = struct.unpack("<III", head)
            if tid not in channels:
                raise ContainerFormatError(
                    f"record references unknown task {tid} at offset {f.tell() - 12}")
            if label >= classes[tid]:
                raise ContainerFormatError(
                    f"record label {label} out of range for task {tid} "
                    f"at offset {f.tell() - 12}")
            offset = f.tell()
            nbytes = channels[tid] * L * 4
            f.seek(nbytes, 1)
            if f.tell() != offset + nbytes:
                raise ContainerFormatError(f"truncated payload at offset {offset}")
            self._index.append((tid, label, L, offset))
        end = f.seek(0, 2)
        if self._index and self._index[-1][3] + channels[self._index[-1][0]] * \
                self._index[-1][2] * 4 > end:
            raise ContainerFormatError("final record extends past end of file")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def num_samples(self) -> int:
        return len(self._index)

    def meta(self, i: int) -> tuple[int, int, int]:
        tid, label, L, _ = self._index[i]
        return tid, label, L

    def load(self, i: int) -> np.ndarray:
        tid, label, L, offset = self._index[i]
        C = self.tasks[tid].channels
        self._f.seek(offset)
        raw = _read_exact(self._f, C * L * 4, f"payload of record {i}")
        return np.frombuffer(raw, dtype="<f4").reshape(C, L).astype(np.float32)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def iterate_batches(container, batch_size: int, rng: np.random.Generator,
                    indices: np.ndarray | None = None, shuffle: bool = True):
    """Task-homogeneous batches, tasks interleaved round-robin per epoch.

    Every index is visited exactly once per epoch.  Samples within a batch are
    cropped to the batch's minimum length at a random offset, so one batch is
    a dense [B, C_i, L_min] array.
    """
    if indices is None:
        indices = np.arange(container.num_samples)
    by_task: dict[int, list[int]] = {}
    for i in indices:
        tid, _, _ = container.meta(int(i))
        by_task.setdefault(tid, []).append(int(i))
    queues = []
    for tid in sorted(by_task):
        idx = np.array(by_task[tid])
        if shuffle:
            idx = idx[rng.permutation(len(idx))]
        chunks = [idx[s:s + batch_size] for s in range(0, len(idx), batch_size)]
        queues.append(chunks)
    cursor = [0] * len(queues)
    remaining = sum(len(q) for q in queues)
    qi = 0
    while remaining:
        if cursor[qi] < len(queues[qi]):
            chunk = queues[qi][cursor[qi]]
            cursor[qi] += 1
            remaining -= 1
            yield _assemble_batch(container, chunk, rng)
        qi = (qi + 1) % len(queues)


def _assemble_batch(container, idx: np.ndarray, rng: np.random.Generator) -> Batch:
    metas = [container.meta(int(i)) for i in idx]
    tid = metas[0][0]
    L_min = min(m[2] for m in metas)
    xs = np.empty((len(idx), container.tasks[tid].channels, L_min), dtype=np.float32)
    labels = np.empty(len(idx), dtype=np.int64)
    for row, (i, (t, label, L)) in enumerate(zip(idx, metas)):
        x = container.load(int(i))
        off = int(rng.integers(0, L - L_min + 1))
        xs[row] = x[:, off:off + L_min]
        labels[row] = label
    return Batch(task_id=tid, x=xs, labels=labels)
