"""Detection evaluation: AP / mAP at tIoU thresholds and diagnostics.

AP integrates the monotone (interpolated) precision envelope over recall.
Detections are ranked by score, ties broken by earlier start then input
order, and matched greedily: each detection takes the unmatched ground truth
of the same video and class with the highest tIoU, and is a true positive
when that tIoU reaches the threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

EPIC_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
THUMOS_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
ANET_THRESHOLDS = (0.5, 0.75, 0.95)
LENGTH_GROUPS = {"XS": (0.0, 2.0), "S": (2.0, 4.0), "M": (4.0, 6.0), "L": (6.0, 8.0), "XL": (8.0, float("inf"))}


@dataclass
class SegmentTable:
    """Flat table of labelled segments (ground truths, or detections with scores)."""
    video: np.ndarray
    start: np.ndarray
    end: np.ndarray
    label: list
    score: np.ndarray | None = None

    def __len__(self):
        return len(self.label)

    @classmethod
    def from_records(cls, records: Iterable[tuple], with_score: bool = False) -> "SegmentTable":
        """Records are ``(video, start, end, label)`` or ``(video, start, end, label, score)``."""
        records = list(records)
        video = np.array([r[0] for r in records], dtype=object)
        start = np.array([r[1] for r in records], dtype=np.float64)
        end = np.array([r[2] for r in records], dtype=np.float64)
        label = [r[3] for r in records]
        score = np.array([r[4] for r in records], dtype=np.float64) if with_score else None
        return cls(video, start, end, label, score)

    @classmethod
    def from_json(cls, per_video: Mapping[str, Sequence[dict]], with_score: bool) -> "SegmentTable":
        recs = []
        for vid in sorted(per_video):
            for d in per_video[vid]:
                label = (int(d["verb"]), int(d["noun"])) if "verb" in d else int(d["label"])
                r = (vid, float(d["start_seconds"]), float(d["end_seconds"]), label)
                recs.append(r + ((float(d["score"]),) if with_score else ()))
        return cls.from_records(recs, with_score)

    def subset(self, mask) -> "SegmentTable":
        mask = np.asarray(mask, dtype=bool)
        return SegmentTable(self.video[mask], self.start[mask], self.end[mask],
                            [lab for lab, m in zip(self.label, mask) if m],
                            None if self.score is None else self.score[mask])

    def classes(self) -> list:
        return sorted(set(self.label), key=_label_sort_key)

    def of_class(self, label) -> "SegmentTable":
        return self.subset([lab == label for lab in self.label])


def _label_sort_key(label):
    return (1, tuple(label)) if isinstance(label, tuple) else (0, (label,))


def rank_order(scores, starts) -> np.ndarray:
    """Descending score; ties by earlier start, then input order."""
    n = len(scores)
    return np.lexsort((np.arange(n), np.asarray(starts, float), -np.asarray(scores, float)))


def match_detections(dets: SegmentTable, gts: SegmentTable, threshold: float, backend: str | None = None):
    """Greedy matching of one class. ``dets`` must already be in rank order.

    Returns ``(tp, matched_gt)``: 0/1 flags and the matched ground-truth row
    (-1 when unmatched).
    """
    gt_videos = sorted(set(gts.video.tolist()))
    code = {v: i for i, v in enumerate(gt_videos)}
    gt_code = np.array([code[v] for v in gts.video], dtype=np.int64)
    gt_order = np.argsort(gt_code, kind="stable")
    ptr = np.zeros(len(gt_videos) + 2, dtype=np.int64)
    np.add.at(ptr, gt_code + 1, 1)
    ptr = np.cumsum(ptr)
    ptr[-1] = ptr[-2]  # empty bucket for videos without ground truth
    missing = len(gt_videos)
    det_code = np.array([code.get(v, missing) for v in dets.video], dtype=np.int64)
    kernel = _kernels.get_backend(backend).match_kernel
    tp, matched_sorted = kernel(det_code, dets.start, dets.end, ptr,
                                gts.start[gt_order], gts.end[gt_order], float(threshold))
    matched = np.where(matched_sorted >= 0, gt_order[np.maximum(matched_sorted, 0)], -1)
    return tp.astype(np.int64), matched


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """Area under the precision envelope for a ranked list of TP flags."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(dets: SegmentTable, gts: SegmentTable, threshold: float,
                      backend: str | None = None) -> float:
    """AP of a single class (the caller filters both tables to that class)."""
    if len(gts) == 0 or len(dets) == 0:
        return 0.0
    tp, _ = match_detections(_ranked(dets), gts, threshold, backend)
    return interpolated_ap(tp, len(gts))


def _ranked(dets: SegmentTable) -> SegmentTable:
    order = rank_order(dets.score, dets.start)
    return SegmentTable(dets.video[order], dets.start[order], dets.end[order],
                        [dets.label[i] for i in order], dets.score[order])


@dataclass
class EvalReport:
    thresholds: list
    map_per_threshold: dict
    average_map: float
    per_class_ap: dict = field(default_factory=dict)
    curves: dict | None = None
    length_groups: dict | None = None

    def to_json(self) -> dict:
        d = {
            "thresholds": [float(t) for t in self.thresholds],
            "mAP": {f"{t:g}": float(v) for t, v in self.map_per_threshold.items()},
            "average_mAP": float(self.average_map),
            "per_class_AP": {label_str(k): [float(x) for x in v] for k, v in self.per_class_ap.items()},
        }
        if self.curves is not None:
            d["boundary_error_curves"] = {k: [float(x) for x in v] for k, v in self.curves.items()}
        if self.length_groups is not None:
            d["length_groups"] = {k: float(v) for k, v in self.length_groups.items()}
        return d


def label_str(label) -> str:
    return f"{label[0]},{label[1]}" if isinstance(label, tuple) else str(label)


def map_at_thresholds(dets: SegmentTable, gts: SegmentTable, thresholds: Sequence[float],
                      backend: str | None = None) -> EvalReport:
    """mAP per threshold: mean AP over the classes that have ground truth."""
    if len(thresholds) == 0:
        raise ValueError("need at least one tIoU threshold")
    classes = gts.classes()
    per_class = {}
    for c in classes:
        g = gts.of_class(c)
        d = _ranked(dets.of_class(c)) if len(dets) else dets
        aps = []
        for thr in thresholds:
            if len(d) == 0:
                aps.append(0.0)
                continue
            tp, _ = match_detections(d, g, thr, backend)
            aps.append(interpolated_ap(tp, len(g)))
        per_class[c] = aps
    maps = {}
    for k, thr in enumerate(thresholds):
        maps[thr] = float(np.mean([per_class[c][k] for c in classes])) if classes else 0.0
    avg = float(np.mean(list(maps.values())))
    return EvalReport(list(thresholds), maps, avg, per_class)


def boundary_error_curve(dets: SegmentTable, gts: SegmentTable, budgets: Sequence[float],
                         threshold: float = 0.5, backend: str | None = None):
    """Cumulative fraction of ground truths whose matched start (end) is within each budget.

    Ground truths without a match at ``threshold`` count as never correct.
    Returns ``(start_fractions, end_fractions)``.
    """
    budgets = np.asarray(budgets, dtype=np.float64)
    if np.any(np.diff(budgets) < 0):
        raise ValueError("budgets must be sorted ascending")
    n = len(gts)
    if n == 0:
        return np.zeros(len(budgets)), np.zeros(len(budgets))
    start_err = np.full(n, np.inf)
    end_err = np.full(n, np.inf)
    gt_rows = np.arange(n)
    for c in gts.classes():
        cmask = np.array([lab == c for lab in gts.label])
        g = gts.subset(cmask)
        d = _ranked(dets.of_class(c)) if len(dets) else dets
        if len(d) == 0:
            continue
        _, matched = match_detections(d, g, threshold, backend)
        rows = gt_rows[cmask]
        for di, gi in enumerate(matched):
            if gi >= 0:
                start_err[rows[gi]] = abs(d.start[di] - g.start[gi])
                end_err[rows[gi]] = abs(d.end[di] - g.end[gi])
    s = (start_err[None, :] <= budgets[:, None]).sum(axis=1) / n
    e = (end_err[None, :] <= budgets[:, None]).sum(axis=1) / n
    return s, e


def length_stratified_map(dets: SegmentTable, gts: SegmentTable, thresholds: Sequence[float],
                          groups: Mapping[str, tuple] = LENGTH_GROUPS, backend: str | None = None) -> dict:
    """Average mAP per length group ``(lo, hi]`` in seconds.

    Ground truths outside the group stay in the matching pool, but detections
    that match them are ignored rather than counted as false positives.
    Groups without ground truth are left out of the result.
    """
    lengths = gts.end - gts.start
    out = {}
    for name, (lo, hi) in groups.items():
        in_group = (lengths > lo) & (lengths <= hi)
        if not in_group.any():
            continue
        classes = sorted({lab for lab, m in zip(gts.label, in_group) if m}, key=_label_sort_key)
        maps = []
        for thr in thresholds:
            aps = []
            for c in classes:
                cmask = np.array([lab == c for lab in gts.label])
                g = gts.subset(cmask)
                g_in = in_group[cmask]
                d = _ranked(dets.of_class(c)) if len(dets) else dets
                if len(d) == 0:
                    aps.append(0.0)
                    continue
                tp, matched = match_detections(d, g, thr, backend)
                keep = (matched < 0) | g_in[np.maximum(matched, 0)]
                aps.append(interpolated_ap(tp[keep], int(g_in.sum())))
            maps.append(float(np.mean(aps)))
        out[name] = float(np.mean(maps))
    return out


def evaluate(dets: SegmentTable, gts: SegmentTable, thresholds: Sequence[float] = EPIC_THRESHOLDS,
             curve_budgets: Sequence[float] | None = None, length_groups: Mapping[str, tuple] | None = None,
             backend: str | None = None) -> EvalReport:
    report = map_at_thresholds(dets, gts, thresholds, backend)
    if curve_budgets is not None:
        s, e = boundary_error_curve(dets, gts, curve_budgets, backend=backend)
        report.curves = {"budgets": list(curve_budgets), "start": s.tolist(), "end": e.tolist()}
    if length_groups is not None:
        report.length_groups = length_stratified_map(dets, gts, thresholds, length_groups, backend)
    return report
