"""Ground truth -> per-location training targets.

Segments are in level-0 feature-frame units. Every function here is pure and
array-oriented: a sequence's locations come in as a :class:`LocationGrid`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .timeline import LocationGrid, TemporalInterval, giou_arrays


@dataclass(frozen=True)
class LabelSpace:
    """Either a single vocabulary (``num_classes``) or a verb/noun pair.

    The head emits ``width`` logits: all classes, or verbs followed by nouns.
    """
    num_classes: int | None = None
    num_verbs: int | None = None
    num_nouns: int | None = None

    def __post_init__(self):
        single = self.num_classes is not None
        multi = self.num_verbs is not None or self.num_nouns is not None
        if single == multi:
            raise ValueError("give either num_classes or both num_verbs and num_nouns")
        if multi and (self.num_verbs is None or self.num_nouns is None):
            raise ValueError("multi-task label space needs num_verbs and num_nouns")
        for n in (self.num_classes, self.num_verbs, self.num_nouns):
            if n is not None and n < 1:
                raise ValueError("vocabulary sizes must be positive")

    @property
    def multitask(self) -> bool:
        return self.num_classes is None

    @property
    def width(self) -> int:
        if self.multitask:
            return self.num_verbs + self.num_nouns
        return self.num_classes

    def columns(self, label) -> tuple[int, ...]:
        """Logit columns set to 1 for ``label`` (an int, or a (verb, noun) pair)."""
        if self.multitask:
            verb, noun = label
            if not (0 <= verb < self.num_verbs and 0 <= noun < self.num_nouns):
                raise ValueError(f"label {label!r} outside the verb/noun vocabulary")
            return (int(verb), self.num_verbs + int(noun))
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label!r} outside the vocabulary of {self.num_classes}")
        return (int(label),)

    def to_dict(self) -> dict:
        if self.multitask:
            return {"verbs": self.num_verbs, "nouns": self.num_nouns}
        return {"labels": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        if "labels" in d:
            return cls(num_classes=int(d["labels"]))
        return cls(num_verbs=int(d["verbs"]), num_nouns=int(d["nouns"]))


@dataclass(frozen=True)
class GroundTruthSegment:
    interval: TemporalInterval
    single_label: int | None = None
    verb_label: int | None = None
    noun_label: int | None = None

    def __post_init__(self):
        single = self.single_label is not None
        pair = self.verb_label is not None and self.noun_label is not None
        partial = (self.verb_label is None) != (self.noun_label is None)
        if partial or single == pair:
            raise ValueError("segment needs exactly one of single_label or (verb_label, noun_label)")
        if self.interval.length() <= 0:
            raise ValueError(f"segment {self.interval} has non-positive length")

    @property
    def label(self):
        if self.single_label is not None:
            return self.single_label
        return (self.verb_label, self.noun_label)

    @classmethod
    def make(cls, start: float, end: float, label) -> "GroundTruthSegment":
        interval = TemporalInterval(float(start), float(end))
        if isinstance(label, (tuple, list)):
            return cls(interval, verb_label=int(label[0]), noun_label=int(label[1]))
        return cls(interval, single_label=int(label))


@dataclass
class LocationTargets:
    """Training targets for every location of one sequence.

    ``r_s``/``r_e``/``gt_start``/``gt_end`` are zero wherever ``is_positive``
    is false. ``conf_mask`` starts all-false; it depends on the current
    predictions and is refreshed every training step.
    """
    class_targets: np.ndarray
    r_s: np.ndarray
    r_e: np.ndarray
    p_s: np.ndarray
    p_e: np.ndarray
    is_positive: np.ndarray
    gt_start: np.ndarray
    gt_end: np.ndarray
    conf_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.conf_mask is None:
            self.conf_mask = np.zeros_like(self.is_positive, dtype=bool)

    @property
    def num_positive(self) -> int:
        return int(self.is_positive.sum())


def _segment_arrays(segments: Sequence[GroundTruthSegment]):
    starts = np.array([s.interval.start for s in segments], dtype=np.float64)
    ends = np.array([s.interval.end for s in segments], dtype=np.float64)
    return starts, ends


def assign_regression_targets(grid: LocationGrid, segments: Sequence[GroundTruthSegment],
                              labels: LabelSpace, alpha: int = 3):
    """Center-sampled positives, regression offsets and multi-hot class targets.

    A location is positive when it lies strictly inside some segment and
    within ``alpha * stride / 2`` of that segment's center (segments shorter
    than ``alpha * stride`` accept any interior location). Its targets come
    from the shortest segment strictly containing it.

    Returns ``(class_targets, r_s, r_e, is_positive, gt_start, gt_end)``.
    """
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    for seg in segments:
        if seg.interval.length() <= 0:
            raise ValueError(f"segment {seg.interval} has non-positive length")

    n = len(grid)
    class_targets = np.zeros((n, labels.width), dtype=np.float64)
    r_s = np.zeros(n)
    r_e = np.zeros(n)
    gt_start = np.zeros(n)
    gt_end = np.zeros(n)
    is_positive = np.zeros(n, dtype=bool)
    if not segments:
        return class_targets, r_s, r_e, is_positive, gt_start, gt_end

    starts, ends = _segment_arrays(segments)
    lengths = ends - starts
    centers = 0.5 * (starts + ends)
    t = grid.t[:, None]
    stride = grid.stride[:, None].astype(np.float64)

    inside = (t > starts[None, :]) & (t < ends[None, :])
    window = alpha * stride
    central = inside & ((np.abs(t - centers[None, :]) <= 0.5 * window) | (lengths[None, :] < window))
    is_positive = central.any(axis=1)

    # shortest containing segment; ties go to the earlier start, then input order
    order = np.lexsort((np.arange(len(segments)), starts, lengths))
    rank = np.empty(len(segments), dtype=np.int64)
    rank[order] = np.arange(len(segments))
    rank_if_inside = np.where(inside, rank[None, :], len(segments))
    chosen_rank = rank_if_inside.min(axis=1)

    pos_idx = np.flatnonzero(is_positive)
    chosen = order[chosen_rank[pos_idx]]
    gt_start[pos_idx] = starts[chosen]
    gt_end[pos_idx] = ends[chosen]
    r_s[pos_idx] = grid.t[pos_idx] - starts[chosen]
    r_e[pos_idx] = ends[chosen] - grid.t[pos_idx]
    for row, seg_i in zip(pos_idx, chosen):
        class_targets[row, list(labels.columns(segments[seg_i].label))] = 1.0
    return class_targets, r_s, r_e, is_positive, gt_start, gt_end


def boundary_confidence_targets(grid: LocationGrid, segments: Sequence[GroundTruthSegment]):
    """Start/end confidence curves sampled at every location.

    Each location owns a window one stride wide centered on ``t``; its start
    confidence is the largest fraction of that window covered by any
    segment's start region ``[s - d/10, s + d/10]`` (likewise for ends).
    """
    n = len(grid)
    if not segments:
        return np.zeros(n), np.zeros(n)
    starts, ends = _segment_arrays(segments)
    half_region = (ends - starts) / 10.0
    stride = grid.stride.astype(np.float64)[:, None]
    t = grid.t[:, None]

    def curve(anchor):
        # measured relative to t so that shifting everything by a whole
        # number of frames reproduces the targets bit for bit
        rel = anchor[None, :] - t
        overlap = np.minimum(0.5 * stride, rel + half_region) - np.maximum(-0.5 * stride, rel - half_region)
        ratio = np.clip(overlap, 0.0, None) / stride
        return np.clip(ratio.max(axis=1), 0.0, 1.0)

    return curve(starts), curve(ends)


def confidence_training_mask(pred_start, pred_end, gt_start, gt_end, is_positive, beta: float = 0.5):
    """Positives whose predicted interval has GIoU >= beta with its assigned ground truth."""
    if not -1.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [-1, 1], got {beta}")
    g = giou_arrays(pred_start, pred_end, gt_start, gt_end)
    return np.asarray(is_positive, dtype=bool) & (g >= beta)


def assign_targets(grid: LocationGrid, segments: Sequence[GroundTruthSegment],
                   labels: LabelSpace, alpha: int = 3) -> LocationTargets:
    cls, r_s, r_e, pos, gs, ge = assign_regression_targets(grid, segments, labels, alpha)
    p_s, p_e = boundary_confidence_targets(grid, segments)
    return LocationTargets(cls, r_s, r_e, p_s, p_e, pos, gs, ge)


def concat_targets(parts: Sequence[LocationTargets]) -> LocationTargets:
    return LocationTargets(
        class_targets=np.concatenate([p.class_targets for p in parts]),
        r_s=np.concatenate([p.r_s for p in parts]),
        r_e=np.concatenate([p.r_e for p in parts]),
        p_s=np.concatenate([p.p_s for p in parts]),
        p_e=np.concatenate([p.p_e for p in parts]),
        is_positive=np.concatenate([p.is_positive for p in parts]),
        gt_start=np.concatenate([p.gt_start for p in parts]),
        gt_end=np.concatenate([p.gt_end for p in parts]),
        conf_mask=np.concatenate([p.conf_mask for p in parts]),
    )
