"""Classification and boundary heads over a feature pyramid.

Both heads are stacks of kernel-3 1-D convolutions shared across pyramid
levels. The boundary head has one trunk and two top layers: one predicts
stride-scaled offsets to the start and end, the other predicts confidence
tokens that :func:`confidence_scale` turns into boundary confidences.

A batch of pyramids is packed into one row matrix (all sequences, all levels,
level-major). Convolutions use explicit neighbour indices so zero padding
happens at every level edge and nothing leaks across sequences.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .timeline import TemporalInterval, location_grid

CONFIDENCE_MODES = ("gaussian", "direct")

PARAM_NAMES = (
    "cls_w1", "cls_b1", "cls_w2", "cls_b2", "cls_w3", "cls_b3",
    "bnd_w1", "bnd_b1", "bnd_w2", "bnd_b2",
    "off_w", "off_b", "tok_w", "tok_b",
)


def confidence_scale(token, sigma: float = 5.5):
    """Map a confidence token to (0, 1]: ``exp(-token**2 / (2 sigma**2))``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    token = np.asarray(token, dtype=np.float64)
    out = np.exp(-(token * token) / (2.0 * sigma * sigma))
    return float(out) if out.ndim == 0 else out


def decode_boundaries(t: float, r_s: float, r_e: float, seq_length: float | None = None) -> TemporalInterval:
    start = max(t - r_s, 0.0)
    end = t + r_e
    if seq_length is not None:
        end = min(end, seq_length)
    # a location past the clamp bound still yields a valid (point) interval
    end = max(end, start)
    return TemporalInterval(start, end)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    s = _sigmoid(x)
    return x * s, s


@dataclass
class HeadWeights:
    """Parameters of both heads plus same-shaped gradient buffers."""
    in_dim: int
    hidden: int
    width: int
    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    confidence_mode: str = "gaussian"

    @classmethod
    def init(cls, in_dim: int, width: int, hidden: int = 64, seed: int = 0,
             confidence_mode: str = "gaussian", cls_bias: float = -2.0) -> "HeadWeights":
        if confidence_mode not in CONFIDENCE_MODES:
            raise ValueError(f"unknown confidence mode {confidence_mode!r}")
        rng = np.random.default_rng(seed)
        shapes = _param_shapes(in_dim, hidden, width)
        params = {}
        for name in PARAM_NAMES:
            shape = shapes[name]
            if len(shape) == 3:
                k = 1.0 / math.sqrt(shape[0] * shape[1])
                params[name] = rng.uniform(-k, k, size=shape)
            else:
                params[name] = np.zeros(shape)
        params["cls_b3"][:] = cls_bias
        w = cls(in_dim, hidden, width, params, confidence_mode=confidence_mode)
        w.zero_grad()
        return w

    @classmethod
    def zeros(cls, in_dim: int, width: int, hidden: int = 64) -> "HeadWeights":
        shapes = _param_shapes(in_dim, hidden, width)
        w = cls(in_dim, hidden, width, {n: np.zeros(shapes[n]) for n in PARAM_NAMES})
        w.zero_grad()
        return w

    def zero_grad(self):
        self.grads = {n: np.zeros_like(p) for n, p in self.params.items()}

    def copy(self) -> "HeadWeights":
        return HeadWeights(self.in_dim, self.hidden, self.width,
                           {n: p.copy() for n, p in self.params.items()},
                           {n: g.copy() for n, g in self.grads.items()},
                           self.confidence_mode)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params.values())


def _param_shapes(in_dim, hidden, width):
    return {
        "cls_w1": (3, in_dim, hidden), "cls_b1": (hidden,),
        "cls_w2": (3, hidden, hidden), "cls_b2": (hidden,),
        "cls_w3": (3, hidden, width), "cls_b3": (width,),
        "bnd_w1": (3, in_dim, hidden), "bnd_b1": (hidden,),
        "bnd_w2": (3, hidden, hidden), "bnd_b2": (hidden,),
        "off_w": (3, hidden, 2), "off_b": (2,),
        "tok_w": (3, hidden, 2), "tok_b": (2,),
    }


@dataclass
class PyramidBatch:
    """Several feature pyramids packed row-wise.

    ``prev``/``next`` hold the row of the left/right neighbour on the same
    level of the same sequence, or -1 at an edge.
    """
    features: np.ndarray
    grids: list
    seq_id: np.ndarray
    level: np.ndarray
    index: np.ndarray
    t: np.ndarray
    stride: np.ndarray
    prev: np.ndarray
    next: np.ndarray
    row_offsets: tuple

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_sequences(self) -> int:
        return len(self.grids)

    def rows(self, seq: int) -> slice:
        return slice(self.row_offsets[seq], self.row_offsets[seq + 1])

    @cached_property
    def first_rows(self) -> np.ndarray:
        return np.flatnonzero(self.prev < 0)

    @cached_property
    def last_rows(self) -> np.ndarray:
        return np.flatnonzero(self.next < 0)


def pack_pyramids(pyramids: Sequence[Sequence[np.ndarray]], scale_factor: int = 2) -> PyramidBatch:
    """Pack pyramids given as lists of per-level ``(length, dim)`` arrays."""
    feats, grids, seq_ids, prevs, nexts = [], [], [], [], []
    offsets = [0]
    dim = None
    for s, levels in enumerate(pyramids):
        base = levels[0].shape[0]
        grid = location_grid(base, len(levels), scale_factor)
        for lv, arr in enumerate(levels):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != grid.lengths[lv]:
                raise ValueError(
                    f"sequence {s} level {lv}: expected {grid.lengths[lv]} rows, got shape {arr.shape}")
            if dim is None:
                dim = arr.shape[1]
            elif arr.shape[1] != dim:
                raise ValueError(f"sequence {s} level {lv}: feature dim {arr.shape[1]} != {dim}")
            n = arr.shape[0]
            start = offsets[-1] + grid.offsets[lv]
            rows = np.arange(start, start + n)
            p = rows - 1
            p[0] = -1
            q = rows + 1
            q[-1] = -1
            prevs.append(p)
            nexts.append(q)
            feats.append(arr)
        grids.append(grid)
        seq_ids.append(np.full(len(grid), s, dtype=np.int64))
        offsets.append(offsets[-1] + len(grid))
    return PyramidBatch(
        features=np.concatenate(feats),
        grids=grids,
        seq_id=np.concatenate(seq_ids),
        level=np.concatenate([g.level for g in grids]),
        index=np.concatenate([g.index for g in grids]),
        t=np.concatenate([g.t for g in grids]),
        stride=np.concatenate([g.stride for g in grids]).astype(np.float64),
        prev=np.concatenate(prevs),
        next=np.concatenate(nexts),
        row_offsets=tuple(offsets),
    )


def _im2col(x, batch):
    # a row's neighbours are the adjacent rows unless it sits at a level edge
    n, d = x.shape
    cols = np.empty((n, 3 * d))
    cols[1:, :d] = x[:-1]
    cols[:, d:2 * d] = x
    cols[:-1, 2 * d:] = x[1:]
    cols[batch.first_rows, :d] = 0.0
    cols[batch.last_rows, 2 * d:] = 0.0
    return cols


def _col2im(dcols, batch, d):
    d_prev = dcols[:, :d].copy()
    d_next = dcols[:, 2 * d:].copy()
    d_prev[batch.first_rows] = 0.0
    d_next[batch.last_rows] = 0.0
    dx = dcols[:, d:2 * d].copy()
    dx[:-1] += d_prev[1:]
    dx[1:] += d_next[:-1]
    return dx


def conv1d(x, w, b, batch):
    cols = _im2col(x, batch)
    return cols @ w.reshape(-1, w.shape[2]) + b, cols


@dataclass
class HeadOutputs:
    """Per-row predictions for a :class:`PyramidBatch`.

    ``offsets`` are in level-0 frames; ``confidences`` come from the tokens
    through the configured scaling.
    """
    logits: np.ndarray
    offsets: np.ndarray
    tokens: np.ndarray
    confidences: np.ndarray
    batch: PyramidBatch
    sigma: float
    confidence_mode: str = "gaussian"
    cache: dict | None = None

    @property
    def pred_start(self):
        return self.batch.t - self.offsets[:, 0]

    @property
    def pred_end(self):
        return self.batch.t + self.offsets[:, 1]


def token_to_confidence(tokens, sigma, mode):
    if mode == "gaussian":
        return confidence_scale(tokens, sigma)
    if mode == "direct":
        return _sigmoid(tokens)
    raise ValueError(f"unknown confidence mode {mode!r}")


def forward_heads(batch: PyramidBatch, w: HeadWeights, sigma: float = 5.5, keep_cache: bool = False) -> HeadOutputs:
    if batch.features.shape[1] != w.in_dim:
        raise ValueError(f"feature dim {batch.features.shape[1]} does not match head input {w.in_dim}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    p = w.params
    x = batch.features
    cache = {}

    def trunk(prefix):
        z1, c1 = conv1d(x, p[prefix + "_w1"], p[prefix + "_b1"], batch)
        h1, s1 = _silu(z1)
        z2, c2 = conv1d(h1, p[prefix + "_w2"], p[prefix + "_b2"], batch)
        h2, s2 = _silu(z2)
        cache[prefix] = (c1, z1, s1, c2, z2, s2)
        return h2

    hc = trunk("cls")
    logits, c3 = conv1d(hc, p["cls_w3"], p["cls_b3"], batch)
    hb = trunk("bnd")
    raw_off, c_off = conv1d(hb, p["off_w"], p["off_b"], batch)
    tokens, c_tok = conv1d(hb, p["tok_w"], p["tok_b"], batch)
    offsets = np.maximum(raw_off, 0.0) * batch.stride[:, None]
    conf = token_to_confidence(tokens, sigma, w.confidence_mode)
    cache.update(cls_top=c3, bnd_top=c_off, raw_off=raw_off, tok_cols=c_tok)
    return HeadOutputs(logits, offsets, tokens, conf, batch, sigma, w.confidence_mode,
                       cache if keep_cache else None)


def backward_heads(out: HeadOutputs, w: HeadWeights, d_logits, d_offsets, d_conf):
    """Accumulate parameter gradients into ``w.grads`` from output gradients."""
    if out.cache is None:
        raise RuntimeError("forward_heads must run with keep_cache=True before backward")
    p, g, cache, batch = w.params, w.grads, out.cache, out.batch

    def top(cols, dy, wname, bname):
        wt = p[wname]
        g[wname] += (cols.T @ dy).reshape(wt.shape)
        g[bname] += dy.sum(axis=0)
        return _col2im(dy @ wt.reshape(-1, wt.shape[2]).T, batch, wt.shape[1])

    def trunk_back(prefix, dh2):
        c1, z1, s1, c2, z2, s2 = cache[prefix]
        dz2 = dh2 * (s2 * (1.0 + z2 * (1.0 - s2)))
        dh1 = top(c2, dz2, prefix + "_w2", prefix + "_b2")
        dz1 = dh1 * (s1 * (1.0 + z1 * (1.0 - s1)))
        top(c1, dz1, prefix + "_w1", prefix + "_b1")

    dhc = top(cache["cls_top"], d_logits, "cls_w3", "cls_b3")
    trunk_back("cls", dhc)

    d_raw = d_offsets * batch.stride[:, None] * (cache["raw_off"] > 0.0)
    if out.confidence_mode == "gaussian":
        d_tok = d_conf * out.confidences * (-out.tokens / (out.sigma * out.sigma))
    else:
        d_tok = d_conf * out.confidences * (1.0 - out.confidences)
    dhb = top(cache["bnd_top"], d_raw, "off_w", "off_b")
    dhb += top(cache["tok_cols"], d_tok, "tok_w", "tok_b")
    trunk_back("bnd", dhb)


# -- checkpoint file --------------------------------------------------------
#
# b"TCKP" | u32 version | u32 header_len | header (UTF-8 JSON) | payload
# The header lists tensors in payload order with their shapes; the payload is
# each tensor's little-endian float32 values in C order, back to back.

CKPT_MAGIC = b"TCKP"
CKPT_VERSION = 1


def checkpoint_bytes(w: HeadWeights, extra: dict | None = None) -> bytes:
    header = {
        "in_dim": w.in_dim,
        "hidden": w.hidden,
        "width": w.width,
        "confidence_mode": w.confidence_mode,
        "tensors": [{"name": n, "shape": list(w.params[n].shape)} for n in PARAM_NAMES],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(w.params[n], dtype="<f4").tobytes() for n in PARAM_NAMES)
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + payload


def weights_from_bytes(data: bytes) -> tuple[HeadWeights, dict]:
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic at offset 0)")
    if len(data) < 12:
        raise ValueError("truncated checkpoint header at offset 4")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} at offset 4")
    if len(data) < 12 + hlen:
        raise ValueError(f"truncated checkpoint header: need {12 + hlen} bytes, have {len(data)}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    params = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = pos + 4 * n
        if end > len(data):
            raise ValueError(f"checkpoint payload truncated in tensor {t['name']!r} at offset {pos}")
        params[t["name"]] = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(data):
        raise ValueError(f"checkpoint has {len(data) - pos} trailing bytes at offset {pos}")
    w = HeadWeights(header["in_dim"], header["hidden"], header["width"], params,
                    confidence_mode=header["confidence_mode"])
    w.zero_grad()
    return w, header.get("extra", {})

