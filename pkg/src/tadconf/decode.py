"""Head outputs -> ranked detections.

Per location: decode the interval, look up the start confidence at the
predicted start and the end confidence at the predicted end (on the
location's own pyramid level), fuse with the action confidence, pre-filter,
and run class-aware Gaussian Soft-NMS per sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .assign import LabelSpace
from .heads import HeadOutputs, token_to_confidence
from .timeline import PyramidLocation, TemporalInterval

FUSION_MODES = ("boundary_only", "cls_only", "cls_s", "cls_e", "mean3", "product3", "cls_sqrt_se")
_FUSION_ALIASES = {
    "p_s*p_e": "boundary_only", "s*e": "boundary_only",
    "cls": "cls_only", "p_a": "cls_only",
    "cls*s": "cls_s", "cls·s": "cls_s",
    "cls*e": "cls_e", "cls·e": "cls_e",
    "avg": "mean3", "mean": "mean3",
    "cls*s*e": "product3", "product": "product3",
    "cls*sqrt(s*e)": "cls_sqrt_se", "cls·sqrt(s·e)": "cls_sqrt_se",
}


def canonical_fusion(mode: str) -> str:
    mode = _FUSION_ALIASES.get(mode, mode)
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; choose from {', '.join(FUSION_MODES)}")
    return mode


@dataclass(frozen=True)
class DecodeConfig:
    fusion: str = "cls_sqrt_se"
    sigma: float | None = None  # re-scale tokens with this sigma instead of the forward pass's
    lookup: str = "nearest"  # or "linear"
    pre_threshold: float = 0.001
    pre_topk: int = 2000
    nms_sigma: float = 0.5
    score_floor: float = 0.001
    max_keep: int = 200
    topv: int = 10
    topn: int = 30


@dataclass
class Proposal:
    interval: TemporalInterval
    label: object
    score: float
    origin: PyramidLocation | None = None
    components: tuple = field(default=(1.0, 1.0, 1.0))

    def to_json(self) -> dict:
        d = {"start_seconds": self.interval.start, "end_seconds": self.interval.end, "score": self.score}
        if isinstance(self.label, tuple):
            d["verb"], d["noun"] = int(self.label[0]), int(self.label[1])
        else:
            d["label"] = int(self.label)
        return d


def lookup_confidence(values, position: float, stride: float = 1.0, mode: str = "nearest") -> float:
    """Value of one level's confidence curve at a level-0 ``position``."""
    values = np.asarray(values, dtype=np.float64)
    return float(lookup_many(values, np.asarray([position], float), stride, mode)[0])


def lookup_many(values: np.ndarray, positions: np.ndarray, stride, mode: str = "nearest") -> np.ndarray:
    n = values.shape[0]
    x = np.asarray(positions, dtype=np.float64) / stride
    if mode == "nearest":
        idx = np.clip(np.floor(x + 0.5), 0, n - 1).astype(np.int64)
        return values[idx]
    if mode == "linear":
        x = np.clip(x, 0.0, n - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        frac = x - lo
        return values[lo] * (1.0 - frac) + values[hi] * frac
    raise ValueError(f"unknown lookup mode {mode!r}")


def fuse_scores(mode: str, p_a, p_s, p_e):
    mode = canonical_fusion(mode)
    p_a, p_s, p_e = (np.asarray(v, dtype=np.float64) for v in (p_a, p_s, p_e))
    if mode == "boundary_only":
        out = p_s * p_e
    elif mode == "cls_only":
        out = p_a * np.ones_like(p_s)
    elif mode == "cls_s":
        out = p_a * p_s
    elif mode == "cls_e":
        out = p_a * p_e
    elif mode == "mean3":
        out = (p_a + p_s + p_e) / 3.0
    elif mode == "product3":
        out = p_a * p_s * p_e
    else:
        out = p_a * np.sqrt(p_s * p_e)
    return float(out) if out.ndim == 0 else out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _top_indices(logits: np.ndarray, k: int) -> np.ndarray:
    # stable descending order: ties keep the lower class id first
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def combine_multitask(verb_logits, noun_logits, v: int = 10, n: int = 30) -> list[tuple[int, int, float]]:
    """Every pairing of the top-v verbs and top-n nouns, best first.

    The pair confidence is ``sigmoid(verb_logit) * sigmoid(noun_logit)``.
    """
    verb_logits = np.asarray(verb_logits, dtype=np.float64)
    noun_logits = np.asarray(noun_logits, dtype=np.float64)
    if not 1 <= v <= verb_logits.shape[0] or not 1 <= n <= noun_logits.shape[0]:
        raise ValueError(f"need 1 <= v <= {verb_logits.shape[0]} and 1 <= n <= {noun_logits.shape[0]}")
    rows, verbs, nouns, p = _multitask_candidates(verb_logits[None, :], noun_logits[None, :], v, n)
    order = np.argsort(-p, kind="stable")
    return [(int(verbs[i]), int(nouns[i]), float(p[i])) for i in order]


def _multitask_candidates(verb_logits, noun_logits, v, n):
    """Vectorized top-v x top-n candidates for every row."""
    top_v = _top_indices(verb_logits, v)
    top_n = _top_indices(noun_logits, n)
    pv = _sigmoid(np.take_along_axis(verb_logits, top_v, axis=1))
    pn = _sigmoid(np.take_along_axis(noun_logits, top_n, axis=1))
    rows = np.repeat(np.arange(verb_logits.shape[0]), v * n)
    verbs = np.repeat(top_v, n, axis=1).ravel()
    nouns = np.tile(top_n, (1, v)).ravel()
    p = (pv[:, :, None] * pn[:, None, :]).ravel()
    return rows, verbs, nouns, p


def soft_nms_arrays(starts, ends, scores, labels, decay_sigma: float = 0.5, score_floor: float = 0.001,
                    max_keep: int = 200, backend: str | None = None):
    """Gaussian Soft-NMS on parallel arrays; returns (kept indices, decayed scores) in selection order."""
    if not decay_sigma > 0:
        raise ValueError(f"decay_sigma must be positive, got {decay_sigma}")
    kernel = _kernels.get_backend(backend).soft_nms_kernel
    return kernel(starts, ends, scores, labels, float(decay_sigma), float(score_floor), int(max_keep))


def _label_codes(labels) -> np.ndarray:
    index = {}
    return np.asarray([index.setdefault(lab, len(index)) for lab in labels], dtype=np.int64)


def soft_nms(proposals: list[Proposal], decay_sigma: float = 0.5, score_floor: float = 0.001,
             max_keep: int = 200, backend: str | None = None) -> list[Proposal]:
    """Repeatedly keep the best proposal and decay same-class overlaps by ``exp(-tiou**2 / decay_sigma)``.

    Proposals whose score falls below ``score_floor`` are dropped; at most
    ``max_keep`` survive, ordered by final score.
    """
    if not proposals:
        return []
    keep, scores = soft_nms_arrays(
        [p.interval.start for p in proposals], [p.interval.end for p in proposals],
        [p.score for p in proposals], _label_codes([p.label for p in proposals]),
        decay_sigma, score_floor, max_keep, backend)
    return [replace(proposals[i], score=float(s)) for i, s in zip(keep, scores)]


@dataclass
class SequenceDetections:
    video_id: str
    starts: np.ndarray
    ends: np.ndarray
    scores: np.ndarray
    labels: list
    components: np.ndarray
    origin_rows: np.ndarray

    def __len__(self):
        return len(self.scores)

    def proposals(self, out: HeadOutputs | None = None) -> list[Proposal]:
        res = []
        for i in range(len(self)):
            origin = None
            if out is not None:
                r = self.origin_rows[i]
                b = out.batch
                origin = PyramidLocation(int(b.level[r]), int(b.index[r]), float(b.t[r]), int(b.stride[r]))
            res.append(Proposal(TemporalInterval(float(self.starts[i]), float(self.ends[i])), self.labels[i],
                                float(self.scores[i]), origin, tuple(float(c) for c in self.components[i])))
        return res

    def to_json(self) -> list:
        out = []
        for i in range(len(self)):
            d = {"start_seconds": float(self.starts[i]), "end_seconds": float(self.ends[i]),
                 "score": float(self.scores[i])}
            lab = self.labels[i]
            if isinstance(lab, tuple):
                d["verb"], d["noun"] = int(lab[0]), int(lab[1])
            else:
                d["label"] = int(lab)
            out.append(d)
        return out


def decode_sequence(out: HeadOutputs, seq: int, labels: LabelSpace, frame_rate: float,
                    cfg: DecodeConfig = DecodeConfig(), video_id: str = "") -> SequenceDetections:
    """Final detections (seconds) for sequence ``seq`` of the batch behind ``out``."""
    batch = out.batch
    rows = batch.rows(seq)
    grid = batch.grids[seq]
    seq_frames = float(grid.base_length)
    t = batch.t[rows]
    stride = batch.stride[rows]
    level = batch.level[rows]
    offsets = out.offsets[rows]
    conf = out.confidences[rows]
    if cfg.sigma is not None:
        conf = token_to_confidence(out.tokens[rows], cfg.sigma, out.confidence_mode)

    start = np.clip(t - offsets[:, 0], 0.0, seq_frames)
    end = np.clip(t + offsets[:, 1], 0.0, seq_frames)
    end = np.maximum(end, start)

    p_s = np.empty(len(t))
    p_e = np.empty(len(t))
    for lv in range(grid.num_levels):
        sl = grid.level_slice(lv)
        st = float(grid.stride[sl.start]) if sl.stop > sl.start else 1.0
        p_s[sl] = lookup_many(conf[sl, 0], start[sl], st, cfg.lookup)
        p_e[sl] = lookup_many(conf[sl, 1], end[sl], st, cfg.lookup)

    logits = out.logits[rows]
    if labels.multitask:
        v = min(cfg.topv, labels.num_verbs)
        n = min(cfg.topn, labels.num_nouns)
        cand_rows, verbs, nouns, p_a = _multitask_candidates(
            logits[:, :labels.num_verbs], logits[:, labels.num_verbs:], v, n)
        cand_labels = verbs * labels.num_nouns + nouns
    else:
        p_all = _sigmoid(logits)
        cand_rows = np.repeat(np.arange(len(t)), labels.num_classes)
        cand_labels = np.tile(np.arange(labels.num_classes), len(t))
        p_a = p_all.ravel()

    keep = p_a > cfg.pre_threshold
    cand_rows, cand_labels, p_a = cand_rows[keep], cand_labels[keep], p_a[keep]
    ps_c, pe_c = p_s[cand_rows], p_e[cand_rows]
    fused = fuse_scores(cfg.fusion, p_a, ps_c, pe_c)
    fused = np.atleast_1d(fused)
    order = np.argsort(-fused, kind="stable")[:cfg.pre_topk]
    cand_rows, cand_labels, p_a, ps_c, pe_c, fused = (
        a[order] for a in (cand_rows, cand_labels, p_a, ps_c, pe_c, fused))

    s_sec = start[cand_rows] / frame_rate
    e_sec = end[cand_rows] / frame_rate
    kept, scores = soft_nms_arrays(s_sec, e_sec, fused, cand_labels, cfg.nms_sigma, cfg.score_floor, cfg.max_keep)
    if labels.multitask:
        out_labels = [(int(c) // labels.num_nouns, int(c) % labels.num_nouns) for c in cand_labels[kept]]
    else:
        out_labels = [int(c) for c in cand_labels[kept]]
    comps = np.stack([p_a[kept], ps_c[kept], pe_c[kept]], axis=1) if len(kept) else np.zeros((0, 3))
    return SequenceDetections(video_id, s_sec[kept], e_sec[kept], scores, out_labels, comps,
                              rows.start + cand_rows[kept])


def decode_batch(out: HeadOutputs, labels: LabelSpace, frame_rates, video_ids,
                 cfg: DecodeConfig = DecodeConfig()) -> dict[str, SequenceDetections]:
    return {vid: decode_sequence(out, i, labels, frame_rates[i], cfg, vid)
            for i, vid in enumerate(video_ids)}

