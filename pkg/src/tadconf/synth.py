"""Synthetic untrimmed sequences with class-informative feature pyramids.

Randomness comes from a counter-based SplitMix64 stream so the datasets can be
regenerated bit-for-bit by any implementation:

* ``key(seed, *path)`` folds integers into a 64-bit key:
  ``k = mix(seed)``, then ``k = mix(k ^ p)`` for each path element.
* draw ``n`` (0-based) of a stream is ``mix(key + (n + 1) * GOLDEN)``.
* ``mix`` is the SplitMix64 finalizer; all arithmetic is modulo 2**64.
* uniforms take the top 53 bits: ``(x >> 11) * 2**-53`` in [0, 1);
  normals use Box-Muller on two consecutive draws,
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.

Stream paths: ``(seed, 0)`` global (templates, bumps); ``(seed, 1, i)``
segments of sequence i; ``(seed, 2, i)`` noise of sequence i.

Level-0 features are the sum of the class templates of every segment covering
a frame, plus start/end bump vectors on the ``bump_width`` frames just outside
each segment, plus white noise. Level l+1 is the pairwise mean of level l
(an odd trailing row is carried over unchanged).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .assign import GroundTruthSegment, LabelSpace

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, *path: int) -> int:
    k = mix64(seed & MASK64)
    for p in path:
        k = mix64(k ^ (p & MASK64))
    return k


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class CounterStream:
    """Sequential view over one SplitMix64 counter stream."""

    def __init__(self, seed: int, *path: int):
        self.key = stream_key(seed, *path)
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64_array(np.uint64(self.key) + idx * np.uint64(GOLDEN))

    def uniform(self, n: int | None = None):
        u = (self.raw(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return float(u[0]) if n is None else u

    def normal(self, n: int) -> np.ndarray:
        u = (self.raw(2 * n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return low + min(int(self.uniform() * (high - low)), high - low - 1)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_sequences: int = 20
    sequence_length: int = 512
    num_classes: int | None = 4
    num_verbs: int | None = None
    num_nouns: int | None = None
    density: float = 8.0
    count_jitter: float = 0.5
    min_length: float = 4.0
    max_length: float = 64.0
    overlap_prob: float = 0.1
    feature_dim: int = 16
    noise: float = 0.1
    num_levels: int = 6
    frame_rate: float = 1.875
    bump_width: int = 2
    bump_scale: float = 1.0
    template_scale: float = 1.0

    @property
    def labels(self) -> LabelSpace:
        if self.num_verbs is not None or self.num_nouns is not None:
            return LabelSpace(num_verbs=self.num_verbs, num_nouns=self.num_nouns)
        return LabelSpace(num_classes=self.num_classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        if "num_verbs" in d and "num_classes" not in d:
            d = {**d, "num_classes": None}
        return cls(**d)

    def validate(self):
        self.labels  # raises on an inconsistent vocabulary
        if self.num_sequences < 0 or self.sequence_length < 1 or self.feature_dim < 1:
            raise ValueError("num_sequences >= 0, sequence_length >= 1, feature_dim >= 1 required")
        if not 1.0 <= self.min_length <= self.max_length <= self.sequence_length:
            raise ValueError(
                f"need 1 <= min_length ({self.min_length}) <= max_length ({self.max_length}) "
                f"<= sequence_length ({self.sequence_length})")
        if not 0.0 <= self.overlap_prob <= 1.0 or not 0.0 <= self.count_jitter <= 1.0:
            raise ValueError("overlap_prob and count_jitter must lie in [0, 1]")
        if self.noise < 0 or self.density < 0 or self.num_levels < 1:
            raise ValueError("noise and density must be >= 0 and num_levels >= 1")
        if self.max_length > self.min_length:
            mean_len = (self.max_length - self.min_length) / math.log(self.max_length / self.min_length)
        else:
            mean_len = self.min_length
        coverage = self.density * mean_len * (1.0 - self.overlap_prob) / self.sequence_length
        if coverage > 0.7:
            raise ValueError(
                f"infeasible config: {self.density} actions of mean length {mean_len:.1f} frames would "
                f"cover {coverage:.0%} of a {self.sequence_length}-frame sequence without overlap "
                f"(limit 70%); lower density or max_length, or raise overlap_prob")


@dataclass
class SyntheticSequence:
    video_id: str
    segments: list
    pyramid: list
    frame_rate: float

    @property
    def num_frames(self) -> int:
        return self.pyramid[0].shape[0]

    @property
    def duration_seconds(self) -> float:
        return self.num_frames / self.frame_rate


def build_pyramid(level0: np.ndarray, num_levels: int) -> list:
    levels = [np.asarray(level0, dtype=np.float64)]
    for _ in range(1, num_levels):
        prev = levels[-1]
        n = prev.shape[0]
        half = n // 2
        nxt = 0.5 * (prev[0:2 * half:2] + prev[1:2 * half:2])
        if n % 2:
            nxt = np.concatenate([nxt, prev[-1:]], axis=0)
        levels.append(nxt)
    return levels


def class_vectors(cfg: SynthConfig):
    """Unit-norm class templates (or verb and noun templates) and bump directions."""
    g = CounterStream(cfg.seed, 0)
    labels = cfg.labels

    def unit(n):
        v = g.normal(n * cfg.feature_dim).reshape(n, cfg.feature_dim)
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    if labels.multitask:
        verbs = unit(labels.num_verbs) * cfg.template_scale
        nouns = unit(labels.num_nouns) * cfg.template_scale
        templates = (verbs, nouns)
    else:
        templates = unit(labels.num_classes) * cfg.template_scale
    bumps = unit(2) * cfg.bump_scale
    return templates, bumps[0], bumps[1]


def template_for(label, templates, labels: LabelSpace) -> np.ndarray:
    if labels.multitask:
        verbs, nouns = templates
        return (verbs[label[0]] + nouns[label[1]]) / math.sqrt(2.0)
    return templates[label]


def sample_segments(cfg: SynthConfig, seq: int) -> list:
    g = CounterStream(cfg.seed, 1, seq)
    labels = cfg.labels
    L = cfg.sequence_length
    j = cfg.count_jitter
    count = int(math.floor(cfg.density * (1.0 - j + 2.0 * j * g.uniform()) + 0.5))
    lo, hi = math.log(cfg.min_length), math.log(cfg.max_length)
    taken = []
    out = []
    for _ in range(count):
        length = int(round(math.exp(lo + g.uniform() * (hi - lo))))
        length = max(1, min(length, L))
        if labels.multitask:
            label = (g.integer(0, labels.num_verbs), g.integer(0, labels.num_nouns))
        else:
            label = g.integer(0, labels.num_classes)
        allow_overlap = g.uniform() < cfg.overlap_prob
        start = None
        for _ in range(50):
            s = g.integer(0, L - length + 1)
            if allow_overlap or all(s + length <= a or s >= b for a, b in taken):
                start = s
                break
        if start is None:
            continue
        taken.append((start, start + length))
        out.append(GroundTruthSegment.make(start, start + length, label))
    out.sort(key=lambda seg: (seg.interval.start, seg.interval.end))
    return out


def render_features(cfg: SynthConfig, seq: int, segments, templates, start_bump, end_bump) -> np.ndarray:
    L, D = cfg.sequence_length, cfg.feature_dim
    labels = cfg.labels
    if cfg.noise > 0:
        feats = cfg.noise * CounterStream(cfg.seed, 2, seq).normal(L * D).reshape(L, D)
    else:
        feats = np.zeros((L, D))
    ramp = [(k + 1) / cfg.bump_width for k in range(cfg.bump_width)]
    for seg in segments:
        s, e = int(seg.interval.start), int(seg.interval.end)
        feats[s:e] += template_for(seg.label, templates, labels)
        for k, a in enumerate(ramp):
            f = s - cfg.bump_width + k
            if 0 <= f < L:
                feats[f] += a * start_bump
            f = e + cfg.bump_width - 1 - k
            if 0 <= f < L:
                feats[f] += a * end_bump
    return feats


def generate_dataset(cfg: SynthConfig) -> list[SyntheticSequence]:
    """Deterministic dataset: annotations in frames plus feature pyramids."""
    cfg.validate()
    templates, start_bump, end_bump = class_vectors(cfg)
    out = []
    for i in range(cfg.num_sequences):
        segments = sample_segments(cfg, i)
        level0 = render_features(cfg, i, segments, templates, start_bump, end_bump)
        out.append(SyntheticSequence(f"synth_{cfg.seed}_{i:04d}", segments,
                                     build_pyramid(level0, cfg.num_levels), cfg.frame_rate))
    return out
