"""Flat parameter layout, per-task binary masks and ERK sparsity initialization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

KINDS = ("matrix", "bias", "embedding")


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]
    fan_in: int
    fan_out: int
    kind: str

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.size

    def raw_density(self) -> float:
        # non-matrix segments are treated as fan_in=1 matrices
        if self.kind == "matrix":
            return (self.fan_in + self.fan_out) / (self.fan_in * self.fan_out)
        return (1 + self.fan_out) / self.fan_out


@dataclass(frozen=True)
class LayerLayout:
    segments: tuple[Segment, ...]

    @classmethod
    def build(cls, entries: Iterable[tuple[str, Sequence[int], str]]) -> "LayerLayout":
        """Lay out ``(name, shape, kind)`` entries contiguously in order."""
        segs = []
        offset = 0
        for name, shape, kind in entries:
            shape = tuple(int(s) for s in shape)
            if kind not in KINDS:
                raise ConfigError(f"unknown segment kind {kind!r}")
            if kind == "matrix":
                fan_in, fan_out = shape[0], math.prod(shape[1:])
            else:
                fan_in, fan_out = 1, shape[-1]
            seg = Segment(name, offset, shape, fan_in, fan_out, kind)
            if seg.size <= 0 or fan_in <= 0 or fan_out <= 0:
                raise ConfigError(f"segment {name!r} has empty shape {shape}")
            segs.append(seg)
            offset += seg.size
        return cls(tuple(segs))

    @property
    def total(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def __len__(self) -> int:
        return len(self.segments)

    def __getitem__(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def view(self, vec: np.ndarray, name: str) -> np.ndarray:
        seg = self[name]
        return vec[seg.offset:seg.stop].reshape(seg.shape)

    def views(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        return {s.name: vec[s.offset:s.stop].reshape(s.shape) for s in self.segments}

    def validate(self) -> None:
        prev = 0
        for seg in self.segments:
            if seg.offset != prev:
                raise ConfigError(f"segment {seg.name!r} is not contiguous")
            if seg.kind == "matrix" and (seg.fan_in <= 0 or seg.fan_out <= 0):
                raise ConfigError(f"matrix segment {seg.name!r} needs positive fans")
            prev = seg.stop

    def to_json(self) -> list[dict]:
        return [
            {"name": s.name, "offset": s.offset, "shape": list(s.shape),
             "fan_in": s.fan_in, "fan_out": s.fan_out, "kind": s.kind}
            for s in self.segments
        ]

    @classmethod
    def from_json(cls, items: list[dict]) -> "LayerLayout":
        segs = tuple(
            Segment(d["name"], int(d["offset"]), tuple(d["shape"]), int(d["fan_in"]),
                    int(d["fan_out"]), d["kind"])
            for d in items
        )
        layout = cls(segs)
        layout.validate()
        return layout


@dataclass
class ParamVector:
    values: np.ndarray
    layout: LayerLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.total,):
            raise DimensionError(
                f"parameter vector has length {self.values.size}, layout expects {self.layout.total}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite values")


@dataclass
class TaskMask:
    task_id: str
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def ones(self) -> int:
        return int(self.bits.sum())


@dataclass
class MaskSet:
    masks: dict[str, np.ndarray]
    sparsity: float
    # target per-segment densities computed at ERK time
    densities: dict[str, float] = field(default_factory=dict)

    @property
    def task_ids(self) -> list[str]:
        return sorted(self.masks)

    def __len__(self) -> int:
        return len(self.masks)

    def __getitem__(self, task_id: str) -> np.ndarray:
        return self.masks[task_id]

    def ones_counts(self) -> dict[str, int]:
        return {t: int(m.sum()) for t, m in self.masks.items()}

    def copy(self) -> "MaskSet":
        return MaskSet({t: m.copy() for t, m in self.masks.items()}, self.sparsity,
                       dict(self.densities))

    def task_mask(self, task_id: str) -> TaskMask:
        return TaskMask(task_id, self.masks[task_id])


def all_ones(n_params: int, task_ids: Sequence[str]) -> MaskSet:
    return MaskSet({t: np.ones(n_params, dtype=bool) for t in task_ids}, 0.0)


def erk_densities(layout: LayerLayout, sparsity: float) -> dict[str, float]:
    """Per-segment densities min(1, eps * raw) with eps chosen by bisection."""
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1), got {sparsity}")
    raw = np.array([s.raw_density() for s in layout.segments])
    sizes = np.array([s.size for s in layout.segments], dtype=np.float64)
    target = (1.0 - sparsity) * sizes.sum()

    def active(eps: float) -> float:
        return float(np.sum(np.minimum(1.0, eps * raw) * sizes))

    lo, hi = 0.0, float(1.0 / raw.min())
    if active(hi) <= target:
        return {s.name: 1.0 for s in layout.segments}
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if active(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    eps = 0.5 * (lo + hi)
    dens = np.minimum(1.0, eps * raw)
    return {s.name: float(d) for s, d in zip(layout.segments, dens)}


def erk_counts(layout: LayerLayout, sparsity: float) -> dict[str, int]:
    """Integer active counts per segment summing to round((1 - S) * P).

    Counts are floor(d * size) plus largest-remainder top-up so the global
    total is exact; ties in remainders go to the earlier segment.
    """
    dens = erk_densities(layout, sparsity)
    sizes = np.array([s.size for s in layout.segments])
    real = np.array([dens[s.name] for s in layout.segments]) * sizes
    counts = np.minimum(np.floor(real).astype(np.int64), sizes)
    target = int(np.round((1.0 - sparsity) * sizes.sum()))
    short = target - int(counts.sum())
    if short > 0:
        frac = real - np.floor(real)
        order = np.argsort(-frac, kind="stable")
        for i in order:
            if short == 0:
                break
            if counts[i] < sizes[i]:
                counts[i] += 1
                short -= 1
    elif short < 0:
        frac = real - np.floor(real)
        order = np.argsort(frac, kind="stable")
        for i in order:
            if short == 0:
                break
            if counts[i] > 0:
                counts[i] -= 1
                short += 1
    return {s.name: int(c) for s, c in zip(layout.segments, counts)}


def erk_init(layout: LayerLayout, sparsity: float, task_ids: Sequence[str],
             seed: int) -> MaskSet:
    """Independent ERK-distributed random masks, one per task."""
    if not task_ids:
        raise ConfigError("erk_init needs at least one task")
    layout.validate()
    counts = erk_counts(layout, sparsity)
    masks = {}
    for idx, task in enumerate(task_ids):
        rng = np.random.default_rng([int(seed), idx])
        bits = np.zeros(layout.total, dtype=bool)
        for seg in layout.segments:
            n = counts[seg.name]
            if n == seg.size:
                bits[seg.offset:seg.stop] = True
            elif n > 0:
                pick = rng.choice(seg.size, size=n, replace=False)
                bits[seg.offset + pick] = True
        masks[task] = bits
    return MaskSet(masks, float(sparsity), erk_densities(layout, sparsity))


def apply_mask(theta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta)
    mask = np.asarray(mask)
    if theta.shape != mask.shape:
        raise DimensionError(f"theta has shape {theta.shape}, mask has shape {mask.shape}")
    return np.where(mask.astype(bool), theta, 0.0)


def mask_hamming_matrix(masks: MaskSet) -> np.ndarray:
    ids = masks.task_ids
    stack = np.stack([masks[t] for t in ids]).astype(np.int8)
    n = len(ids)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = np.mean(stack[i] != stack[j])
    return out


def segment_densities(layout: LayerLayout, bits: np.ndarray) -> dict[str, float]:
    return {s.name: float(bits[s.offset:s.stop].mean()) for s in layout.segments}


def pack_bits(bits: np.ndarray) -> bytes:
    """Bit-pack into little-endian 64-bit words, least significant bit first."""
    bits = np.asarray(bits, dtype=bool)
    n_words = (bits.size + 63) // 64
    padded = np.zeros(n_words * 64, dtype=bool)
    padded[:bits.size] = bits
    return np.packbits(padded, bitorder="little").tobytes()


def unpack_bits(data: bytes, n: int) -> np.ndarray:
    expected = ((n + 63) // 64) * 8
    if len(data) != expected:
        raise DimensionError(f"mask blob has {len(data)} bytes, expected {expected}")
    raw = np.frombuffer(data, dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:n].astype(bool)
