"""Training losses, manual backpropagation, gradient checking and the trainer.

The total objective is ``l_cls + gamma * l_giou + omega * (l_conf_s + l_conf_e)``.
Every loss has a value-only public form plus a private ``*_grad`` twin that
also returns the gradient with respect to the head outputs; :func:`backward`
chains those through :func:`tadconf.heads.backward_heads`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .assign import LabelSpace, LocationTargets, concat_targets, confidence_training_mask
from .heads import HeadOutputs, HeadWeights, PyramidBatch, backward_heads, forward_heads, pack_pyramids

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.5
    gamma: float = 0.5
    omega: float = 0.5
    sigma: float = 5.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    task_weight: float = 0.5  # verb and noun share of l_cls in the multi-task case


@dataclass
class LossBreakdown:
    l_cls: float
    l_giou: float
    l_conf_s: float
    l_conf_e: float
    total: float
    num_positive: int = 0
    num_conf: int = 0

    def as_row(self) -> list:
        return [self.l_cls, self.l_giou, self.l_conf_s, self.l_conf_e, self.total]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


# -- individual losses --------------------------------------------------------

def _focal_grad(logits, targets, rows, normalizer, alpha=0.25, gamma=2.0):
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    ce = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    p_t = p * y + (1.0 - p) * (1.0 - y)
    a_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    m = 1.0 - p_t
    mod = m ** gamma
    terms = a_t * ce * mod
    # d(1 - p_t)/dx = -(2y - 1) p (1 - p)
    dm = -(2.0 * y - 1.0) * p * (1.0 - p)
    dmod = gamma * m ** (gamma - 1.0) * dm if gamma != 0 else 0.0
    grad = a_t * ((p - y) * mod + ce * dmod)
    w = np.asarray(rows, dtype=np.float64)[:, None]
    return float((terms * w).sum() / normalizer), grad * w / normalizer


def focal_loss(logits, class_targets, is_positive, valid=None, alpha=0.25, gamma=2.0) -> float:
    """Sigmoid focal loss summed over location-class pairs / max(1, #positives).

    ``valid`` marks rows that take part at all (default: every row).
    Background rows contribute as negatives.
    """
    rows = np.ones(len(is_positive), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    norm = max(1, int(np.asarray(is_positive, dtype=bool).sum()))
    return _focal_grad(logits, class_targets, rows, norm, alpha, gamma)[0]


def _classification_grad(logits, targets: LocationTargets, labels: LabelSpace, cfg: LossConfig, valid):
    norm = max(1, targets.num_positive)
    if not labels.multitask:
        return _focal_grad(logits, targets.class_targets, valid, norm, cfg.focal_alpha, cfg.focal_gamma)
    v = labels.num_verbs
    lv, gv = _focal_grad(logits[:, :v], targets.class_targets[:, :v], valid, norm, cfg.focal_alpha, cfg.focal_gamma)
    ln, gn = _focal_grad(logits[:, v:], targets.class_targets[:, v:], valid, norm, cfg.focal_alpha, cfg.focal_gamma)
    w = cfg.task_weight
    return w * lv + w * ln, np.concatenate([w * gv, w * gn], axis=1)


def _giou_grad(ps, pe, gs, ge, mask):
    """Mean of 1 - GIoU over ``mask`` with gradients w.r.t. predicted start/end."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    d_ps = np.zeros(len(mask))
    d_pe = np.zeros(len(mask))
    if n == 0:
        return 0.0, d_ps, d_pe
    ps, pe, gs, ge = ps[mask], pe[mask], gs[mask], ge[mask]
    lo = np.maximum(ps, gs)
    hi = np.minimum(pe, ge)
    overlap = hi > lo
    inter = np.where(overlap, hi - lo, 0.0)
    union = (pe - ps) + (ge - gs) - inter
    encl = np.maximum(pe, ge) - np.minimum(ps, gs)
    giou = inter / union - (encl - union) / encl
    loss = float((1.0 - giou).sum() / n)

    di_ps = np.where(overlap & (ps >= gs), -1.0, 0.0)
    di_pe = np.where(overlap & (pe <= ge), 1.0, 0.0)
    du_ps = -1.0 - di_ps
    du_pe = 1.0 - di_pe
    dc_ps = np.where(ps <= gs, -1.0, 0.0)
    dc_pe = np.where(pe >= ge, 1.0, 0.0)
    # giou = I/U - 1 + U/C
    def dgiou(di, du, dc):
        return di / union - inter * du / union ** 2 + du / encl - union * dc / encl ** 2

    d_ps[mask] = -dgiou(di_ps, du_ps, dc_ps) / n
    d_pe[mask] = -dgiou(di_pe, du_pe, dc_pe) / n
    return loss, d_ps, d_pe


def giou_regression_loss(pred_start, pred_end, gt_start, gt_end, is_positive) -> float:
    """Mean ``1 - GIoU`` over positive locations; 0 with no positives."""
    return _giou_grad(np.asarray(pred_start, float), np.asarray(pred_end, float),
                      np.asarray(gt_start, float), np.asarray(gt_end, float), is_positive)[0]


def _confidence_grad(p_hat, p, mask):
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    grad = np.zeros(len(mask))
    if n == 0:
        return 0.0, grad
    diff = np.asarray(p_hat, float)[mask] - np.asarray(p, float)[mask]
    grad[mask] = 2.0 * diff / n
    return float((diff * diff).sum() / n), grad


def confidence_loss(p_hat, p, conf_mask) -> float:
    """Mean squared confidence error over the ``conf_mask`` locations (T of them)."""
    return _confidence_grad(p_hat, p, conf_mask)[0]


def total_loss(l_cls: float, l_giou: float, l_conf_s: float, l_conf_e: float,
               gamma: float = 0.5, omega: float = 0.5, num_positive: int = 0, num_conf: int = 0) -> LossBreakdown:
    if gamma < 0 or omega < 0:
        raise ValueError("gamma and omega must be non-negative")
    total = l_cls + gamma * l_giou + omega * (l_conf_s + l_conf_e)
    return LossBreakdown(l_cls, l_giou, l_conf_s, l_conf_e, total, num_positive, num_conf)


# -- composite objective --------------------------------------------------------

def refresh_conf_mask(out: HeadOutputs, targets: LocationTargets, beta: float) -> np.ndarray:
    targets.conf_mask = confidence_training_mask(out.pred_start, out.pred_end,
                                                 targets.gt_start, targets.gt_end,
                                                 targets.is_positive, beta)
    return targets.conf_mask


def objective(out: HeadOutputs, targets: LocationTargets, labels: LabelSpace, cfg: LossConfig,
              need_grad: bool = True):
    """Loss breakdown for fixed ``targets.conf_mask`` plus output gradients."""
    valid = np.ones(len(targets.is_positive), dtype=bool)
    l_cls, d_logits = _classification_grad(out.logits, targets, labels, cfg, valid)
    l_giou, d_ps, d_pe = _giou_grad(out.pred_start, out.pred_end, targets.gt_start, targets.gt_end,
                                    targets.is_positive)
    l_s, d_cs = _confidence_grad(out.confidences[:, 0], targets.p_s, targets.conf_mask)
    l_e, d_ce = _confidence_grad(out.confidences[:, 1], targets.p_e, targets.conf_mask)
    parts = total_loss(l_cls, l_giou, l_s, l_e, cfg.gamma, cfg.omega,
                       targets.num_positive, int(targets.conf_mask.sum()))
    if not need_grad:
        return parts, None
    # pred_start = t - r_s and pred_end = t + r_e
    d_offsets = cfg.gamma * np.stack([-d_ps, d_pe], axis=1)
    d_conf = cfg.omega * np.stack([d_cs, d_ce], axis=1)
    return parts, (d_logits, d_offsets, d_conf)


def backward(w: HeadWeights, batch: PyramidBatch, targets: LocationTargets, labels: LabelSpace,
             cfg: LossConfig, refresh_mask: bool = True) -> LossBreakdown:
    """Forward, loss and exact gradients into ``w.grads`` (which are zeroed first).

    The confidence mask is a constant of the step: it is recomputed from the
    current predictions (when ``refresh_mask``) and never differentiated.
    """
    out = forward_heads(batch, w, cfg.sigma, keep_cache=True)
    if refresh_mask:
        refresh_conf_mask(out, targets, cfg.beta)
    parts, (d_logits, d_offsets, d_conf) = objective(out, targets, labels, cfg)
    w.zero_grad()
    backward_heads(out, w, d_logits, d_offsets, d_conf)
    return parts


def loss_value(w: HeadWeights, batch: PyramidBatch, targets: LocationTargets, labels: LabelSpace,
               cfg: LossConfig) -> float:
    out = forward_heads(batch, w, cfg.sigma)
    return objective(out, targets, labels, cfg, need_grad=False)[0].total


def _branch_signature(w, batch, targets, cfg):
    """Which side of every non-smooth point the objective currently sits on."""
    out = forward_heads(batch, w, cfg.sigma, keep_cache=True)
    pos = targets.is_positive
    raw = out.cache["raw_off"][pos] > 0.0
    ps, pe = out.pred_start[pos], out.pred_end[pos]
    gs, ge = targets.gt_start[pos], targets.gt_end[pos]
    return np.concatenate([raw.ravel(), ps >= gs, pe <= ge, np.minimum(pe, ge) > np.maximum(ps, gs)])


def gradient_check(w: HeadWeights, batch: PyramidBatch, targets: LocationTargets, labels: LabelSpace,
                   cfg: LossConfig = LossConfig(), eps: float = 1e-5, num_samples: int = 8,
                   seed: int = 0, abs_floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Samples ``num_samples`` entries from every parameter tensor. The error for
    one entry is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps
    float64 cancellation in the difference quotient (about 1e-11 absolute at
    ``eps=1e-5``) from dominating near-zero entries. When a perturbation
    would cross a rectifier or GIoU breakpoint, the step is shrunk tenfold (up
    to three times) so the difference quotient stays on one smooth piece.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    w = w.copy()
    backward(w, batch, targets, labels, cfg)
    analytic = {n: g.copy() for n, g in w.grads.items()}
    base_sig = _branch_signature(w, batch, targets, cfg)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, param in w.params.items():
        flat = param.reshape(-1)
        picks = rng.choice(flat.size, size=min(num_samples, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            h = eps
            for _ in range(4):
                flat[i] = orig + h
                up_sig = _branch_signature(w, batch, targets, cfg)
                f_up = loss_value(w, batch, targets, labels, cfg)
                flat[i] = orig - h
                dn_sig = _branch_signature(w, batch, targets, cfg)
                f_dn = loss_value(w, batch, targets, labels, cfg)
                flat[i] = orig
                if np.array_equal(up_sig, base_sig) and np.array_equal(dn_sig, base_sig):
                    break
                h *= 0.1
            numeric = (f_up - f_dn) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, err)
    return worst


def random_instance(seed: int, max_length: int = 32, max_levels: int = 2, max_classes: int = 4,
                    in_dim: int = 4, hidden: int = 8, multitask: bool | None = None):
    """Small random problem for gradient checks: ``(w, batch, targets, labels)``.

    Offset biases start positive so some predictions overlap their targets
    well enough to enter the confidence mask.
    """
    from .assign import GroundTruthSegment, assign_targets

    rng = np.random.default_rng(seed)
    levels = int(rng.integers(1, max_levels + 1))
    length = int(rng.integers(8, max_length + 1))
    if multitask is None:
        multitask = bool(rng.integers(0, 2))
    if multitask:
        labels = LabelSpace(num_verbs=int(rng.integers(1, 3)), num_nouns=int(rng.integers(1, 3)))
    else:
        labels = LabelSpace(num_classes=int(rng.integers(1, max_classes + 1)))
    segments = []
    for _ in range(int(rng.integers(1, 4))):
        s = float(rng.integers(0, length - 2))
        e = float(min(length, s + rng.integers(2, max(3, length // 2))))
        if labels.multitask:
            label = (int(rng.integers(labels.num_verbs)), int(rng.integers(labels.num_nouns)))
        else:
            label = int(rng.integers(labels.num_classes))
        segments.append(GroundTruthSegment.make(s, e, label))
    pyramid = [rng.normal(size=(length, in_dim))]
    for _ in range(1, levels):
        prev = pyramid[-1]
        half = prev.shape[0] // 2
        nxt = 0.5 * (prev[0:2 * half:2] + prev[1:2 * half:2])
        if prev.shape[0] % 2:
            nxt = np.concatenate([nxt, prev[-1:]])
        pyramid.append(nxt)
    batch = pack_pyramids([pyramid])
    targets = assign_targets(batch.grids[0], segments, labels, alpha=1)
    w = HeadWeights.init(in_dim, labels.width, hidden=hidden, seed=seed)
    for name, p in w.params.items():
        if p.ndim == 1:
            p += rng.normal(scale=0.1, size=p.shape)
    w.params["off_b"] += rng.uniform(1.0, 4.0, size=2)
    return w, batch, targets, labels


# -- training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 0  # 0 = full batch
    seed: int = 0
    alpha: int = 3
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass
class TrainingExample:
    pyramid: list
    targets: LocationTargets


def train_loop(w: HeadWeights, examples: Sequence[TrainingExample], labels: LabelSpace,
               cfg: TrainConfig, callback=None) -> tuple[HeadWeights, list[LossBreakdown]]:
    """Momentum gradient descent; returns trained weights and the per-step trace.

    Mini-batches (when ``batch_size`` is set) are drawn from a generator seeded
    with ``cfg.seed``, so identical inputs give bit-identical traces.
    """
    w = w.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = {n: np.zeros_like(p) for n, p in w.params.items()}
    n = len(examples)
    full = cfg.batch_size <= 0 or cfg.batch_size >= n
    static = None
    if full:
        static = (pack_pyramids([e.pyramid for e in examples]), concat_targets([e.targets for e in examples]))
    order = np.arange(n)
    cursor = n
    trace = []
    for step in range(1, cfg.steps + 1):
        if full:
            batch, targets = static
        else:
            if cursor + cfg.batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            pick = sorted(order[cursor:cursor + cfg.batch_size])
            cursor += cfg.batch_size
            batch = pack_pyramids([examples[i].pyramid for i in pick])
            targets = concat_targets([examples[i].targets for i in pick])
        parts = train_step(w, velocity, batch, targets, labels, cfg, step)
        trace.append(parts)
        if callback is not None:
            callback(step, parts)
    w.zero_grad()
    return w, trace


def train_step(w: HeadWeights, velocity: dict, batch: PyramidBatch, targets: LocationTargets,
               labels: LabelSpace, cfg: TrainConfig, step: int = 0) -> LossBreakdown:
    """One in-place momentum update; ``velocity`` maps parameter names to buffers."""
    parts = backward(w, batch, targets, labels, cfg.loss)
    if not np.isfinite(parts.total):
        raise TrainingDiverged(step, parts.total)
    for name, p in w.params.items():
        v = velocity.setdefault(name, np.zeros_like(p))
        v *= cfg.momentum
        v += w.grads[name]
        p -= cfg.lr * v
    if not w.all_finite():
        raise TrainingDiverged(step, float("nan"))
    return parts


def with_loss(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, loss=replace(cfg.loss, **kw))
