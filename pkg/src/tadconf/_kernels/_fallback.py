"""Pure-Python kernels.

Scalar loops on Python floats. The arithmetic (operation order, libm ``exp``)
matches ``_ext.pyx`` exactly so both backends return bit-identical results.
"""
import math

import numpy as np


def _tiou(s1, e1, s2, e2):
    inter = min(e1, e2) - max(s1, s2)
    if inter < 0.0:
        inter = 0.0
    union = (e1 - s1) + (e2 - s2) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def soft_nms_kernel(starts, ends, scores, labels, sigma, score_floor, max_keep):
    s = [float(x) for x in starts]
    e = [float(x) for x in ends]
    sc = [float(x) for x in scores]
    lab = [int(x) for x in labels]
    n = len(sc)
    alive = [sc[i] >= score_floor for i in range(n)]
    keep, kept_scores = [], []
    while len(keep) < max_keep:
        best = -1
        best_score = -math.inf
        for i in range(n):
            if alive[i] and sc[i] > best_score:
                best = i
                best_score = sc[i]
        if best < 0:
            break
        alive[best] = False
        keep.append(best)
        kept_scores.append(best_score)
        bs, be, bl = s[best], e[best], lab[best]
        for j in range(n):
            if alive[j] and lab[j] == bl:
                iou = _tiou(bs, be, s[j], e[j])
                sc[j] = sc[j] * math.exp(-(iou * iou) / sigma)
                if sc[j] < score_floor:
                    alive[j] = False
    return np.asarray(keep, dtype=np.int64), np.asarray(kept_scores, dtype=np.float64)


def match_kernel(det_video, det_start, det_end, gt_ptr, gt_start, gt_end, threshold):
    nd = len(det_video)
    ng = len(gt_start)
    tp = np.zeros(nd, dtype=np.int8)
    matched = np.full(nd, -1, dtype=np.int64)
    used = [False] * ng
    gs = [float(x) for x in gt_start]
    ge = [float(x) for x in gt_end]
    ptr = [int(x) for x in gt_ptr]
    for d in range(nd):
        v = int(det_video[d])
        ds, de = float(det_start[d]), float(det_end[d])
        best = -1
        best_iou = -1.0
        for g in range(ptr[v], ptr[v + 1]):
            if used[g]:
                continue
            iou = _tiou(ds, de, gs[g], ge[g])
            if iou > best_iou:
                best = g
                best_iou = iou
        if best >= 0 and best_iou >= threshold:
            used[best] = True
            tp[d] = 1
            matched[d] = best
    return tp, matched
