"""Datasets, non-IID partitioning, backdoor triggers and indicator sets.

Samples are stored as a single ``(n, C, H, W)`` float64 array plus an
integer label vector. Everything here is deterministic under its seed and
never mutates its inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRIGGER_KINDS = ("pixel", "blend", "semantic", "edge", "dba_local")
DEFAULT_BLEND_RATIO = 0.2


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str
    label_space: str = ""

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        if not self.label_space:
            object.__setattr__(self, "label_space", self.name)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, x=self.x[idx], y=self.y[idx])


@dataclass(frozen=True)
class IndicatorDataset:
    x: np.ndarray
    y: np.ndarray  # assigned labels, uniform over the benign label space
    source_labels: np.ndarray
    source: str = ""

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class PartitionPlan:
    assignments: tuple  # per-client int64 index arrays
    alpha: float
    seed: int
    attempts: int = 1

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


# ---------------------------------------------------------------- synthesis & IDX

def _image_shape(dim) -> tuple:
    if isinstance(dim, int):
        return (1, dim, dim)
    dim = tuple(int(d) for d in dim)
    return (1,) + dim if len(dim) == 2 else dim


def gen_synthetic(num_classes: int, dim, per_class: int, seed: int, noise: float = 0.6,
                  split: int = 0, name: str = "synthetic", margin: int = 0,
                  background_noise: float = 0.05) -> Dataset:
    """Gaussian class blobs: a uniform [0, 1] template per class plus N(0, noise^2).

    Templates depend only on ``seed``; ``split`` selects an independent draw
    of samples around the same templates (0 = train, 1 = test, ...). A
    ``margin`` > 0 turns the outer frame of that width into a near-constant
    background (zero template, ``background_noise`` jitter), like the empty
    border of digit images.
    """
    shape = _image_shape(dim)
    if num_classes <= 0 or per_class <= 0 or min(shape) <= 0:
        raise ValueError("num_classes, dim and per_class must be positive")
    if margin < 0 or 2 * margin >= min(shape[1:]):
        raise ValueError("margin must leave a non-empty centre")
    templates = rngmod.stream(seed, "synthetic-templates").uniform(0.0, 1.0, (num_classes,) + shape)
    r = rngmod.stream(seed, "synthetic-samples", split)
    scale = np.full(shape, noise)
    if margin:
        frame = np.ones(shape, dtype=bool)
        frame[:, margin:-margin, margin:-margin] = False
        templates[:, frame] = 0.0
        scale[frame] = background_noise
    x = np.repeat(templates, per_class, axis=0) + r.normal(0.0, 1.0, (num_classes * per_class,) + shape) * scale
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(x, y, num_classes, name, label_space=f"{name}:{seed}")


def gen_noise(n: int, dim, seed: int, name: str = "uniform-noise", margin: int = 0,
              background_noise: float = 0.05) -> Dataset:
    """``n`` i.i.d. uniform [0, 1] images; an out-of-distribution source with a single dummy label.

    ``margin`` reproduces the background frame of :func:`gen_synthetic`.
    """
    shape = _image_shape(dim)
    r = rngmod.stream(seed, "noise-images")
    x = r.uniform(0.0, 1.0, (n,) + shape)
    if margin:
        frame = np.ones(shape, dtype=bool)
        frame[:, margin:-margin, margin:-margin] = False
        x[:, frame] = r.normal(0.0, background_noise, (n, int(frame.sum())))
    return Dataset(x, np.zeros(n, dtype=np.int64), 1, name, label_space=name)


def _read_idx(path, expected_magic: int):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise ValueError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str = "idx") -> Dataset:
    """Parse a big-endian IDX image/label pair; pixel bytes are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise ValueError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    n_cls = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 1)
    return Dataset(x, labels, n_cls, name)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as IDX (values clipped to [0, 1], rounded to bytes)."""
    if len(ds.sample_shape) != 3 or ds.sample_shape[0] != 1:
        raise ValueError("IDX export supports single-channel images only")
    n, _, h, w = ds.x.shape
    pix = np.rint(np.clip(ds.x[:, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.y.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- partitioning

def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, seed: int,
                        max_attempts: int = 100) -> PartitionPlan:
    """Split each class across clients with Dirichlet(alpha * 1_K) proportions.

    A draw that leaves some client empty is redrawn, up to ``max_attempts``.
    """
    if num_clients < 1:
        raise ValueError("need at least one client")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    by_class = [np.flatnonzero(ds.y == c) for c in range(ds.num_classes)]
    for attempt in range(max_attempts):
        r = rngmod.stream(seed, "dirichlet", attempt)
        parts: list[list] = [[] for _ in range(num_clients)]
        for idx in by_class:
            if len(idx) == 0:
                continue
            idx = r.permutation(idx)
            props = r.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].append(chunk)
        assignments = tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts)
        if all(len(a) for a in assignments):
            return PartitionPlan(assignments, alpha, seed, attempt + 1)
    raise RuntimeError(f"dirichlet_partition: a client stayed empty after {max_attempts} draws")


# ---------------------------------------------------------------- triggers

@dataclass(frozen=True)
class TriggerSpec:
    """Declarative backdoor transformation.

    ``pixels`` is a tuple of ``(row, col, value)`` written into every channel
    (pixel kind, and the parent pattern of ``dba_local``). ``pool`` holds the
    membership samples for ``edge`` (and optionally ``semantic``).
    """

    kind: str
    target_label: int
    pixels: tuple = ()
    noise: np.ndarray | None = field(default=None, compare=False)
    ratio: float = DEFAULT_BLEND_RATIO
    indices: tuple = ()
    pool: Dataset | None = field(default=None, compare=False)
    part_index: int = 0
    part_count: int = 1

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "blend" and not 0.0 < self.ratio <= 1.0:
            raise ValueError("blend ratio must lie in (0, 1]")
        if self.kind == "dba_local" and not 0 <= self.part_index < self.part_count:
            raise ValueError("dba part index out of range")

    def local_pixels(self) -> tuple:
        """Pixels this spec writes (the assigned part for ``dba_local``)."""
        if self.kind == "dba_local":
            parts = np.array_split(np.arange(len(self.pixels)), self.part_count)
            return tuple(self.pixels[i] for i in parts[self.part_index])
        return tuple(self.pixels)


def corner_pattern(size: int = 3, value: float = 1.0, row: int = 0, col: int = 0) -> tuple:
    """A ``size`` x ``size`` block of ``value`` with top-left corner at (row, col)."""
    return tuple((row + i, col + j, value) for i in range(size) for j in range(size))


def pixel_trigger(target_label: int, size: int = 3, value: float = 1.0) -> TriggerSpec:
    return TriggerSpec("pixel", target_label, pixels=corner_pattern(size, value))


def blend_trigger(target_label: int, shape, seed: int, ratio: float = DEFAULT_BLEND_RATIO) -> TriggerSpec:
    noise = rngmod.stream(seed, "blend-noise").uniform(0.0, 1.0, tuple(shape))
    return TriggerSpec("blend", target_label, noise=noise, ratio=ratio)


def apply_trigger(x: np.ndarray, spec: TriggerSpec) -> tuple[np.ndarray, int]:
    """Return ``(poisoned copy of x, target_label)``; ``x`` may be one sample or a batch."""
    out = np.array(x, dtype=np.float64, copy=True)
    if spec.kind in ("pixel", "dba_local"):
        h, w = out.shape[-2:]
        for r, c, v in spec.local_pixels():
            if not (0 <= r < h and 0 <= c < w):
                raise IndexError(f"trigger pixel ({r}, {c}) outside {h}x{w} image")
            out[..., r, c] = v
    elif spec.kind == "blend":
        if spec.noise is None or spec.noise.shape != out.shape[-spec.noise.ndim:]:
            raise ValueError("blend noise map does not match sample shape")
        out = (1.0 - spec.ratio) * out + spec.ratio * spec.noise
    return out, spec.target_label


def build_poison_dataset(benign: Dataset, spec: TriggerSpec, m: int, seed: int) -> Dataset:
    """All benign samples plus ``m`` backdoor samples, shuffled deterministically.

    Pixel-style kinds trigger ``m`` benign samples (drawn without replacement
    while ``m <= len(benign)``); ``semantic`` relabels ``pool[indices]`` (or
    ``benign[indices]`` when no pool is set); ``edge`` draws from ``spec.pool``.
    """
    r = rngmod.stream(seed, "poison")
    if m < 0:
        raise ValueError("poison count must be non-negative")
    if m == 0:
        px, py = benign.x[:0], benign.y[:0]
    elif spec.kind in ("pixel", "blend", "dba_local"):
        if len(benign) == 0:
            raise ValueError("cannot trigger samples of an empty dataset")
        pick = r.choice(len(benign), m, replace=m > len(benign))
        px, _ = apply_trigger(benign.x[pick], spec)
        py = np.full(m, spec.target_label)
    elif spec.kind == "semantic":
        source = spec.pool if spec.pool is not None else benign
        idx = np.asarray(spec.indices, dtype=np.int64)
        if m > len(idx):
            raise ValueError(f"semantic pool holds {len(idx)} samples, {m} requested")
        chosen = idx if m == len(idx) else np.sort(r.choice(idx, m, replace=False))
        px, py = source.x[chosen].copy(), np.full(m, spec.target_label)
    else:  # edge
        if spec.pool is None or m > len(spec.pool):
            raise ValueError(f"edge pool too small for {m} samples")
        pick = np.sort(r.choice(len(spec.pool), m, replace=False))
        px, py = spec.pool.x[pick].copy(), np.full(m, spec.target_label)
    x = np.concatenate([benign.x, px])
    y = np.concatenate([benign.y, py])
    order = r.permutation(len(y))
    return replace(benign, x=x[order], y=y[order], name=f"{benign.name}+{spec.kind}")


def make_edge_pool(ood: Dataset, target_label: int, sample_shape: tuple | None = None) -> Dataset:
    """Relabel every OOD sample to the target; the pool is attacker-only data."""
    if len(ood) == 0:
        raise ValueError("edge pool source is empty")
    if sample_shape is not None and tuple(sample_shape) != ood.sample_shape:
        raise ValueError(f"edge samples have shape {ood.sample_shape}, main task uses {tuple(sample_shape)}")
    n_cls = max(target_label + 1, 1)
    return Dataset(ood.x.copy(), np.full(len(ood), target_label), n_cls, f"edge:{ood.name}", ood.label_space)


# ---------------------------------------------------------------- indicator set

def build_indicator_dataset(ood_source: Dataset, size: int, benign_labels, seed: int,
                            benign_space: str | None = None, force: bool = False) -> IndicatorDataset:
    """Draw ``size`` OOD samples and give each a label uniform over the benign label space.

    ``benign_labels`` is the class count or an explicit label list. The
    source must come from a different label space than the benign task
    (compared by ``label_space`` tag) unless ``force`` is set.
    """
    if size < 0:
        raise ValueError("indicator size must be non-negative")
    labels = np.arange(benign_labels) if isinstance(benign_labels, (int, np.integer)) else np.asarray(benign_labels)
    if benign_space is not None and ood_source.label_space == benign_space and not force:
        raise ValueError(f"indicator source shares the benign label space {benign_space!r}")
    r = rngmod.stream(seed, "indicator-data")
    if size == 0:
        return IndicatorDataset(ood_source.x[:0].copy(), np.zeros(0, dtype=np.int64),
                                np.zeros(0, dtype=np.int64), ood_source.name)
    pick = r.choice(len(ood_source), size, replace=size > len(ood_source))
    assigned = labels[r.integers(0, len(labels), size)].astype(np.int64)
    return IndicatorDataset(ood_source.x[pick].copy(), assigned, ood_source.y[pick].copy(), ood_source.name)
