"""Interval arithmetic and feature-pyramid geometry.

All head math happens on the level-0 feature-frame grid. Conversion to
seconds (via ``frame_rate``) only happens at file and evaluation boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TemporalInterval:
    start: float
    end: float

    def __post_init__(self):
        if not (self.end >= self.start):
            raise ValueError(f"interval end {self.end} < start {self.start}")

    def length(self) -> float:
        return self.end - self.start

    def shifted(self, offset: float) -> "TemporalInterval":
        return TemporalInterval(self.start + offset, self.end + offset)


@dataclass(frozen=True)
class PyramidConfig:
    num_levels: int = 6
    base_length: int = 2304
    scale_factor: int = 2
    frame_rate: float = 1.875

    def __post_init__(self):
        if self.num_levels < 1 or self.base_length < 1 or self.scale_factor < 1:
            raise ValueError("num_levels, base_length and scale_factor must be positive")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    def stride(self, level: int) -> int:
        return self.scale_factor ** level

    def level_length(self, level: int) -> int:
        return level_length(self.base_length, level, self.scale_factor)

    def level_lengths(self) -> list[int]:
        return [self.level_length(lv) for lv in range(self.num_levels)]


@dataclass(frozen=True)
class PyramidLocation:
    level: int
    index: int
    t: float
    stride: int


def level_length(base_length: int, level: int, scale_factor: int = 2) -> int:
    # ceiling division so odd lengths never drop a location
    return -(-base_length // scale_factor ** level)


def tiou(a: TemporalInterval, b: TemporalInterval) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter < 0.0:
        inter = 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou_1d(a: TemporalInterval, b: TemporalInterval) -> float:
    """Generalized IoU of two intervals: ``tiou - gap / enclosure``.

    Ranges over [-1, 1]. Two zero-length intervals at the same point have an
    empty enclosure and score 0.
    """
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter < 0.0:
        inter = 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    enclosure = max(a.end, b.end) - min(a.start, b.start)
    if enclosure <= 0.0:
        return 0.0
    iou = inter / union if union > 0.0 else 0.0
    return iou - (enclosure - union) / enclosure


def tiou_arrays(s1, e1, s2, e2) -> np.ndarray:
    """Broadcasting tIoU over arrays of starts and ends."""
    s1, e1, s2, e2 = (np.asarray(x, dtype=np.float64) for x in (s1, e1, s2, e2))
    inter = np.clip(np.minimum(e1, e2) - np.maximum(s1, s2), 0.0, None)
    union = (e1 - s1) + (e2 - s2) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return out


def giou_arrays(s1, e1, s2, e2) -> np.ndarray:
    s1, e1, s2, e2 = (np.asarray(x, dtype=np.float64) for x in (s1, e1, s2, e2))
    inter = np.clip(np.minimum(e1, e2) - np.maximum(s1, s2), 0.0, None)
    union = (e1 - s1) + (e2 - s2) - inter
    enclosure = np.maximum(e1, e2) - np.minimum(s1, s2)
    safe_u = np.where(union > 0.0, union, 1.0)
    safe_c = np.where(enclosure > 0.0, enclosure, 1.0)
    iou = np.where(union > 0.0, inter / safe_u, 0.0)
    return np.where(enclosure > 0.0, iou - (enclosure - union) / safe_c, 0.0)


def pairwise_tiou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, 2) x (M, 2) interval arrays -> (N, M) tIoU matrix."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    return tiou_arrays(a[:, None, 0], a[:, None, 1], b[None, :, 0], b[None, :, 1])


def pyramid_locations(cfg: PyramidConfig) -> list[PyramidLocation]:
    out = []
    for level in range(cfg.num_levels):
        stride = cfg.stride(level)
        for index in range(cfg.level_length(level)):
            out.append(PyramidLocation(level, index, float(index * stride), stride))
    return out


@dataclass(frozen=True)
class LocationGrid:
    """Array form of :func:`pyramid_locations` for one sequence.

    ``level``, ``index``, ``t`` and ``stride`` are parallel arrays in
    level-major, index-major order; ``offsets[l]`` is the first row of level l.
    """
    level: np.ndarray
    index: np.ndarray
    t: np.ndarray
    stride: np.ndarray
    offsets: tuple[int, ...]
    lengths: tuple[int, ...]
    base_length: int

    def __len__(self) -> int:
        return int(self.t.shape[0])

    @property
    def num_levels(self) -> int:
        return len(self.lengths)

    def level_slice(self, level: int) -> slice:
        start = self.offsets[level]
        return slice(start, start + self.lengths[level])


def location_grid(base_length: int, num_levels: int, scale_factor: int = 2) -> LocationGrid:
    lengths = tuple(level_length(base_length, lv, scale_factor) for lv in range(num_levels))
    levels, indices, strides = [], [], []
    offsets = []
    pos = 0
    for lv, n in enumerate(lengths):
        offsets.append(pos)
        pos += n
        levels.append(np.full(n, lv, dtype=np.int64))
        indices.append(np.arange(n, dtype=np.int64))
        strides.append(np.full(n, scale_factor ** lv, dtype=np.int64))
    level = np.concatenate(levels)
    index = np.concatenate(indices)
    stride = np.concatenate(strides)
    return LocationGrid(
        level=level,
        index=index,
        t=(index * stride).astype(np.float64),
        stride=stride,
        offsets=tuple(offsets),
        lengths=lengths,
        base_length=int(base_length),
    )


def frames_to_seconds(x, frame_rate: float):
    return np.asarray(x, dtype=np.float64) / frame_rate if not np.isscalar(x) else x / frame_rate


def seconds_to_frames(x, frame_rate: float):
    return np.asarray(x, dtype=np.float64) * frame_rate if not np.isscalar(x) else x * frame_rate

