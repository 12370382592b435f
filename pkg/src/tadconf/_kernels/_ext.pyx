# cython: language_level=3
"""Compiled kernels; same contracts and arithmetic as ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


cdef inline double _tiou(double s1, double e1, double s2, double e2) noexcept nogil:
    cdef double inter = (e1 if e1 < e2 else e2) - (s1 if s1 > s2 else s2)
    if inter < 0.0:
        inter = 0.0
    cdef double union = (e1 - s1) + (e2 - s2) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def soft_nms_kernel(starts, ends, scores, labels, double sigma, double score_floor, Py_ssize_t max_keep):
    cdef double[::1] s = np.ascontiguousarray(starts, dtype=np.float64)
    cdef double[::1] e = np.ascontiguousarray(ends, dtype=np.float64)
    cdef double[::1] sc = np.array(scores, dtype=np.float64, copy=True)
    cdef long long[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = sc.shape[0]
    cdef unsigned char[::1] alive = np.zeros(n, dtype=np.uint8)
    keep_arr = np.empty(min(n, max_keep) if max_keep > 0 else 0, dtype=np.int64)
    kept_arr = np.empty(keep_arr.shape[0], dtype=np.float64)
    cdef long long[::1] keep = keep_arr
    cdef double[::1] kept = kept_arr
    cdef Py_ssize_t i, j, best, count = 0
    cdef double best_score, bs, be, iou
    cdef long long bl
    with nogil:
        for i in range(n):
            alive[i] = sc[i] >= score_floor
        while count < keep.shape[0]:
            best = -1
            best_score = -INFINITY
            for i in range(n):
                if alive[i] and sc[i] > best_score:
                    best = i
                    best_score = sc[i]
            if best < 0:
                break
            alive[best] = 0
            keep[count] = best
            kept[count] = best_score
            count += 1
            bs = s[best]
            be = e[best]
            bl = lab[best]
            for j in range(n):
                if alive[j] and lab[j] == bl:
                    iou = _tiou(bs, be, s[j], e[j])
                    sc[j] = sc[j] * exp(-(iou * iou) / sigma)
                    if sc[j] < score_floor:
                        alive[j] = 0
    return keep_arr[:count].copy(), kept_arr[:count].copy()


def match_kernel(det_video, det_start, det_end, gt_ptr, gt_start, gt_end, double threshold):
    cdef long long[::1] dv = np.ascontiguousarray(det_video, dtype=np.int64)
    cdef double[::1] ds = np.ascontiguousarray(det_start, dtype=np.float64)
    cdef double[::1] de = np.ascontiguousarray(det_end, dtype=np.float64)
    cdef long long[::1] ptr = np.ascontiguousarray(gt_ptr, dtype=np.int64)
    cdef double[::1] gs = np.ascontiguousarray(gt_start, dtype=np.float64)
    cdef double[::1] ge = np.ascontiguousarray(gt_end, dtype=np.float64)
    cdef Py_ssize_t nd = dv.shape[0]
    tp_arr = np.zeros(nd, dtype=np.int8)
    matched_arr = np.full(nd, -1, dtype=np.int64)
    cdef signed char[::1] tp = tp_arr
    cdef long long[::1] matched = matched_arr
    cdef unsigned char[::1] used = np.zeros(gs.shape[0], dtype=np.uint8)
    cdef Py_ssize_t d, g, best
    cdef long long v
    cdef double best_iou, iou
    with nogil:
        for d in range(nd):
            v = dv[d]
            best = -1
            best_iou = -1.0
            for g in range(ptr[v], ptr[v + 1]):
                if used[g]:
                    continue
                iou = _tiou(ds[d], de[d], gs[g], ge[g])
                if iou > best_iou:
                    best = g
                    best_iou = iou
            if best >= 0 and best_iou >= threshold:
                used[best] = 1
                tp[d] = 1
                matched[d] = best
    return tp_arr, matched_arr
