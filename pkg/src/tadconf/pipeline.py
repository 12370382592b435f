"""Glue between the stages: datasets -> targets -> training -> detections -> report."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .assign import GroundTruthSegment, LabelSpace, assign_targets
from .decode import DecodeConfig, SequenceDetections, decode_batch
from .evaluation import SegmentTable
from .heads import HeadWeights, forward_heads, pack_pyramids
from .losses import TrainConfig, TrainingExample, train_loop
from .timeline import location_grid


@dataclass
class Video:
    """One annotated sequence: segments in feature frames plus its pyramid."""
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


def as_videos(seqs) -> list[Video]:
    return [Video(s.video_id, s.segments, s.pyramid, s.frame_rate) for s in seqs]


def training_examples(videos: Sequence[Video], labels: LabelSpace, alpha: int = 3,
                      scale_factor: int = 2) -> list[TrainingExample]:
    out = []
    for v in videos:
        grid = location_grid(v.num_frames, len(v.pyramid), scale_factor)
        out.append(TrainingExample(v.pyramid, assign_targets(grid, v.segments, labels, alpha)))
    return out


def train(videos: Sequence[Video], labels: LabelSpace, cfg: TrainConfig, hidden: int = 64,
          init_seed: int = 0, confidence_mode: str = "gaussian", callback=None):
    examples = training_examples(videos, labels, cfg.alpha)
    w = HeadWeights.init(videos[0].pyramid[0].shape[1], labels.width, hidden=hidden, seed=init_seed,
                         confidence_mode=confidence_mode)
    return train_loop(w, examples, labels, cfg, callback)


def detect(w: HeadWeights, videos: Sequence[Video], labels: LabelSpace,
           cfg: DecodeConfig = DecodeConfig(), sigma: float = 5.5) -> dict[str, SequenceDetections]:
    """Forward each video separately (no cross-sequence state) and decode."""
    out = {}
    for v in videos:
        heads_out = forward_heads(pack_pyramids([v.pyramid]), w, sigma)
        out.update(decode_batch(heads_out, labels, [v.frame_rate], [v.video_id], cfg))
    return out


def ground_truth_table(videos: Sequence[Video]) -> SegmentTable:
    recs = []
    for v in videos:
        for seg in v.segments:
            recs.append((v.video_id, seg.interval.start / v.frame_rate, seg.interval.end / v.frame_rate,
                         seg.label))
    return SegmentTable.from_records(recs)


def detection_table(dets: dict[str, SequenceDetections]) -> SegmentTable:
    recs = []
    for vid in sorted(dets):
        d = dets[vid]
        for i in range(len(d)):
            recs.append((vid, float(d.starts[i]), float(d.ends[i]), d.labels[i], float(d.scores[i])))
    return SegmentTable.from_records(recs, with_score=True)


def segments_in_frames(segments_json: Sequence[dict], frame_rate: float) -> list[GroundTruthSegment]:
    out = []
    for d in segments_json:
        label = (int(d["verb"]), int(d["noun"])) if "verb" in d else int(d["label"])
        out.append(GroundTruthSegment.make(float(d["start_seconds"]) * frame_rate,
                                           float(d["end_seconds"]) * frame_rate, label))
    return out


def mean_loss_drop(trace) -> float:
    """Relative drop from the first step's total loss to the trace minimum."""
    first = trace[0].total
    return (first - min(p.total for p in trace)) / first if first > 0 else 0.0

