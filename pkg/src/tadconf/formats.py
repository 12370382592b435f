"""On-disk formats: feature pyramids (FPY1), annotations, detections.

FPY1 layout, all little-endian::

    b"FPY1" | u32 num_levels | num_levels x (u32 length, u32 dim) | payload

The payload holds each level's ``length x dim`` float32 values in row-major
order, level after level, with nothing after the last level.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .assign import GroundTruthSegment, LabelSpace

FPY_MAGIC = b"FPY1"
ANNOTATION_VERSION = 1
DETECTION_VERSION = 1


class FormatError(ValueError):
    """Malformed input file; the message names the file and where it went wrong."""


# -- atomic writes --------------------------------------------------------------

def atomic_write(path, data: bytes | str):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write(path, dump_json(obj))


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at byte {exc.pos} (line {exc.lineno}): {exc.msg}") from None


# -- feature pyramids -------------------------------------------------------------

def pyramid_bytes(levels: Sequence[np.ndarray]) -> bytes:
    parts = [FPY_MAGIC, struct.pack("<I", len(levels))]
    for lv in levels:
        if lv.ndim != 2:
            raise ValueError(f"pyramid levels must be 2-D, got shape {lv.shape}")
        parts.append(struct.pack("<II", lv.shape[0], lv.shape[1]))
    for lv in levels:
        parts.append(np.ascontiguousarray(lv, dtype="<f4").tobytes())
    return b"".join(parts)


def pyramid_from_bytes(data: bytes, name: str = "<bytes>") -> list[np.ndarray]:
    if len(data) < 8:
        raise FormatError(f"{name}: truncated header at offset {len(data)} (need 8 bytes)")
    if data[:4] != FPY_MAGIC:
        raise FormatError(f"{name}: bad magic {data[:4]!r} at offset 0 (expected {FPY_MAGIC!r})")
    (num_levels,) = struct.unpack_from("<I", data, 4)
    header_end = 8 + 8 * num_levels
    if len(data) < header_end:
        raise FormatError(f"{name}: header declares {num_levels} levels but ends at offset {len(data)} "
                          f"(need {header_end} bytes)")
    shapes = [struct.unpack_from("<II", data, 8 + 8 * i) for i in range(num_levels)]
    expected = header_end + 4 * sum(n * d for n, d in shapes)
    if len(data) != expected:
        raise FormatError(f"{name}: payload ends at offset {len(data)} but the header implies {expected} bytes")
    levels, pos = [], header_end
    for n, d in shapes:
        count = n * d
        levels.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(n, d).astype(np.float32))
        pos += 4 * count
    return levels


def write_pyramid(path, levels):
    atomic_write(path, pyramid_bytes(levels))


def read_pyramid(path) -> list[np.ndarray]:
    return pyramid_from_bytes(Path(path).read_bytes(), str(path))


# -- annotations ------------------------------------------------------------------

def _segment_json(seg: GroundTruthSegment, frame_rate: float) -> dict:
    d = {"start_seconds": seg.interval.start / frame_rate, "end_seconds": seg.interval.end / frame_rate}
    if seg.single_label is not None:
        d["label"] = int(seg.single_label)
    else:
        d["verb"], d["noun"] = int(seg.verb_label), int(seg.noun_label)
    return d


def annotations_json(videos, labels: LabelSpace) -> dict:
    """``videos`` carry ``video_id``, ``segments`` (frames), ``frame_rate`` and ``duration_seconds``."""
    return {
        "version": ANNOTATION_VERSION,
        "vocabulary": labels.to_dict(),
        "videos": [{
            "id": v.video_id,
            "duration_seconds": v.duration_seconds,
            "frame_rate": v.frame_rate,
            "segments": [_segment_json(s, v.frame_rate) for s in v.segments],
        } for v in videos],
    }


def _check_label(seg: dict, labels: LabelSpace, where: str):
    if labels.multitask:
        if "verb" not in seg or "noun" not in seg:
            raise FormatError(f"{where}: expected verb and noun labels")
        for key, size in (("verb", labels.num_verbs), ("noun", labels.num_nouns)):
            val = seg[key]
            if not isinstance(val, int) or not 0 <= val < size:
                raise FormatError(f"{where}: unknown {key} label {val!r} (vocabulary has {size})")
    else:
        val = seg.get("label")
        if not isinstance(val, int) or not 0 <= val < labels.num_classes:
            raise FormatError(f"{where}: unknown label {val!r} (vocabulary has {labels.num_classes})")


def parse_annotations(doc: dict, name: str = "<annotations>"):
    """Validate an annotation document; returns ``(labels, videos)``.

    Each video is a dict with ``id``, ``duration_seconds``, ``frame_rate``
    and ``segments`` (JSON dicts, seconds).
    """
    if not isinstance(doc, dict) or doc.get("version") != ANNOTATION_VERSION:
        raise FormatError(f"{name}: unsupported or missing version (expected {ANNOTATION_VERSION})")
    try:
        labels = LabelSpace.from_dict(doc["vocabulary"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{name}: bad vocabulary: {exc}") from None
    videos = doc.get("videos")
    if not isinstance(videos, list):
        raise FormatError(f"{name}: 'videos' must be a list")
    seen = set()
    for i, v in enumerate(videos):
        where = f"{name}: videos[{i}]"
        for key in ("id", "duration_seconds", "frame_rate", "segments"):
            if key not in v:
                raise FormatError(f"{where}: missing {key!r}")
        if v["id"] in seen:
            raise FormatError(f"{where}: duplicate video id {v['id']!r}")
        seen.add(v["id"])
        if not v["frame_rate"] > 0 or v["duration_seconds"] < 0:
            raise FormatError(f"{where}: frame_rate must be > 0 and duration_seconds >= 0")
        for j, seg in enumerate(v["segments"]):
            sw = f"{where}.segments[{j}]"
            s, e = seg.get("start_seconds"), seg.get("end_seconds")
            if not isinstance(s, (int, float)) or not isinstance(e, (int, float)):
                raise FormatError(f"{sw}: start_seconds and end_seconds must be numbers")
            if not 0 <= s < e <= v["duration_seconds"] + 1e-9:
                raise FormatError(f"{sw}: segment [{s}, {e}] is empty or outside [0, {v['duration_seconds']}]")
            _check_label(seg, labels, sw)
    return labels, videos


def read_annotations(path):
    return parse_annotations(read_json(path), str(path))


def num_frames(video: dict) -> int:
    return int(round(video["duration_seconds"] * video["frame_rate"]))


# -- detections -------------------------------------------------------------------

def detections_json(per_video: dict) -> dict:
    """``per_video`` maps video id to a list of detection dicts (or objects with ``to_json``)."""
    results = {}
    for vid in sorted(per_video):
        d = per_video[vid]
        results[vid] = d.to_json() if hasattr(d, "to_json") else list(d)
    return {"version": DETECTION_VERSION, "results": results}


def parse_detections(doc: dict, labels: LabelSpace | None = None, name: str = "<detections>") -> dict:
    if not isinstance(doc, dict) or doc.get("version") != DETECTION_VERSION:
        raise FormatError(f"{name}: unsupported or missing version (expected {DETECTION_VERSION})")
    results = doc.get("results")
    if not isinstance(results, dict):
        raise FormatError(f"{name}: 'results' must map video ids to lists")
    for vid, dets in results.items():
        for j, d in enumerate(dets):
            where = f"{name}: results[{vid!r}][{j}]"
            for key in ("start_seconds", "end_seconds", "score"):
                if not isinstance(d.get(key), (int, float)):
                    raise FormatError(f"{where}: missing or non-numeric {key!r}")
            if d["end_seconds"] < d["start_seconds"]:
                raise FormatError(f"{where}: end_seconds < start_seconds")
            if labels is not None:
                _check_label(d, labels, where)
    return results


def read_detections(path, labels: LabelSpace | None = None) -> dict:
    return parse_detections(read_json(path), labels, str(path))


# -- dataset directories ------------------------------------------------------------
#
# <dir>/annotations.json and <dir>/features/<video id>.fpy

def feature_path(root, video_id: str) -> Path:
    return Path(root) / "features" / f"{video_id}.fpy"


def write_dataset(root, videos, labels: LabelSpace):
    root = Path(root)
    for v in videos:
        write_pyramid(feature_path(root, v.video_id), v.pyramid)
    write_json(root / "annotations.json", annotations_json(videos, labels))


def read_dataset(root):
    """Returns ``(labels, videos)`` with :class:`tadconf.pipeline.Video` entries (segments in frames)."""
    from .pipeline import Video, segments_in_frames

    root = Path(root)
    labels, docs = read_annotations(root / "annotations.json")
    videos = []
    for v in docs:
        path = feature_path(root, v["id"])
        if not path.exists():
            raise FormatError(f"{root}: missing feature file {path}")
        pyramid = read_pyramid(path)
        expected = num_frames(v)
        if not pyramid or pyramid[0].shape[0] != expected:
            got = pyramid[0].shape[0] if pyramid else 0
            raise FormatError(f"{path}: level 0 has {got} rows but the annotation implies {expected} frames")
        videos.append(Video(v["id"], segments_in_frames(v["segments"], v["frame_rate"]),
                            [lv.astype(np.float64) for lv in pyramid], float(v["frame_rate"])))
    return labels, videos
