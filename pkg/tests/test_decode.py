import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tadconf.assign import LabelSpace
from tadconf.decode import (
    FUSION_MODES, DecodeConfig, Proposal, combine_multitask, decode_sequence, fuse_scores,
    lookup_confidence, soft_nms, soft_nms_arrays,
)
from tadconf.heads import HeadOutputs, pack_pyramids
from tadconf.timeline import TemporalInterval, tiou


def test_lookup_examples():
    v = np.zeros(20)
    v[10], v[11] = 0.8, 0.2
    assert lookup_confidence(v, 10.0) == 0.8
    assert lookup_confidence(v, 10.4) == 0.8
    assert lookup_confidence(v, 10.6) == 0.2
    v[-1] = 0.3
    assert lookup_confidence(v, 55.0) == 0.3
    assert lookup_confidence(v, -4.0) == v[0]
    # level stride: position 44 on a stride-4 level is index 11
    assert lookup_confidence(v, 44.0, stride=4) == 0.2
    assert lookup_confidence(v, 10.5, mode="linear") == pytest.approx(0.5)


def test_fusion_examples():
    assert fuse_scores("cls_sqrt_se", 0.8, 1.0, 1.0) == 0.8
    assert fuse_scores("cls_sqrt_se", 0.8, 0.9, 0.64) == pytest.approx(0.607157, abs=5e-7)
    assert fuse_scores("product3", 0.8, 0.9, 0.64) == pytest.approx(0.4608, abs=1e-12)
    assert fuse_scores("cls·sqrt(s·e)", 0.8, 0.9, 0.64) == fuse_scores("cls_sqrt_se", 0.8, 0.9, 0.64)
    with pytest.raises(ValueError):
        fuse_scores("median", 0.5, 0.5, 0.5)


unit = st.floats(0, 1)


@given(unit, unit, unit, st.floats(0, 0.5))
def test_default_fusion_monotone(a, s, e, d):
    base = fuse_scores("cls_sqrt_se", a, s, e)
    assert fuse_scores("cls_sqrt_se", min(1, a + d), s, e) >= base
    assert fuse_scores("cls_sqrt_se", a, min(1, s + d), e) >= base
    assert fuse_scores("cls_sqrt_se", a, s, min(1, e + d)) >= base


@given(st.lists(unit, min_size=2, max_size=30))
def test_unit_boundaries_rank_like_cls_only(pa):
    pa = np.array(pa)
    ones = np.ones_like(pa)
    ref = np.argsort(-fuse_scores("cls_only", pa, ones, ones), kind="stable")
    for mode in ("cls_s", "cls_e", "product3", "cls_sqrt_se"):
        assert np.array_equal(np.argsort(-fuse_scores(mode, pa, ones, ones), kind="stable"), ref)
    # the mean can round distinct tiny scores together, so only non-strict order holds
    assert (np.diff(fuse_scores("mean3", pa, ones, ones)[ref]) <= 0).all()


def test_multitask_examples():
    c = combine_multitask([2.0, 1.0], [3.0, 0.5], 2, 2)
    assert len(c) == 4
    assert c[0][:2] == (0, 0)
    assert c[0][2] == pytest.approx(0.8390, abs=5e-5)
    sig = lambda x: 1 / (1 + math.exp(-x))
    assert c[0][2] == pytest.approx(sig(2) * sig(3), rel=1e-14)
    one = combine_multitask([0.1, 0.9, -1.0], [0.0, -2.0, 4.0, 1.0], 1, 1)
    assert [x[:2] for x in one] == [(1, 2)]
    assert len(combine_multitask(np.zeros(3), np.zeros(4), 3, 4)) == 12
    with pytest.raises(ValueError):
        combine_multitask([1.0], [1.0], 2, 1)


def test_soft_nms_examples():
    iv = TemporalInterval(1.0, 3.0)
    out = soft_nms([Proposal(iv, 0, 1.0), Proposal(iv, 0, 0.9)])
    assert [p.score for p in out] == [1.0, 0.9 * math.exp(-2.0)]
    assert out[1].score == pytest.approx(0.1218017549, abs=1e-10)
    single = soft_nms([Proposal(iv, 0, 0.3)])
    assert single[0].score == 0.3
    dis = soft_nms([Proposal(TemporalInterval(0, 1), 0, 0.4), Proposal(TemporalInterval(2, 3), 0, 0.6)])
    assert [p.score for p in dis] == [0.6, 0.4]
    other = soft_nms([Proposal(iv, 0, 1.0), Proposal(iv, 1, 0.9)])
    assert [p.score for p in other] == [1.0, 0.9]
    with pytest.raises(ValueError):
        soft_nms_arrays([0], [1], [1], [0], decay_sigma=0)


def reference_soft_nms(props, sigma, floor, max_keep):
    """Direct quadratic rendering of the decay rule on a working list."""
    work = [[p.interval.start, p.interval.end, p.score, p.label, i] for i, p in enumerate(props)]
    work = [w for w in work if w[2] >= floor]
    out = []
    while work and len(out) < max_keep:
        k = max(range(len(work)), key=lambda j: (work[j][2], -j))
        best = work.pop(k)
        out.append((best[4], best[2]))
        rest = []
        for w in work:
            if w[3] == best[3]:
                o = tiou(TemporalInterval(best[0], best[1]), TemporalInterval(w[0], w[1]))
                w[2] = w[2] * math.exp(-(o * o) / sigma)
            if w[2] >= floor:
                rest.append(w)
        work = rest
    return out


proposal_sets = st.lists(
    st.tuples(st.integers(0, 40), st.integers(1, 20), st.integers(0, 2),
              st.floats(0.0005, 1.0, allow_subnormal=False)),
    min_size=0, max_size=50)


@settings(max_examples=150)
@given(proposal_sets, st.sampled_from([0.1, 0.5, 1.0]))
def test_soft_nms_matches_reference(raw, sigma):
    props = [Proposal(TemporalInterval(s * 0.5, (s + d) * 0.5), lab, sc) for s, d, lab, sc in raw]
    ref = reference_soft_nms(props, sigma, 0.001, 200)
    for backend in ("python", "cython"):
        keep, scores = soft_nms_arrays([p.interval.start for p in props], [p.interval.end for p in props],
                                       [p.score for p in props], [p.label for p in props], sigma,
                                       backend=backend)
        assert list(zip(keep.tolist(), scores.tolist())) == ref


@given(proposal_sets)
def test_soft_nms_properties(raw):
    props = [Proposal(TemporalInterval(s, s + d), lab, sc) for s, d, lab, sc in raw]
    out = soft_nms(props, max_keep=10)
    assert len(out) <= 10
    scores = [p.score for p in out]
    assert scores == sorted(scores, reverse=True)
    orig = {id(p.interval): p.score for p in props}
    for p in out:
        assert p.score <= orig[id(p.interval)]
    alive = [p for p in props if p.score >= 0.001]
    if alive:
        assert out[0].score == max(p.score for p in alive)


def test_soft_nms_small_sigma_is_hard_nms():
    iv = TemporalInterval(0, 4)
    out = soft_nms([Proposal(iv, 0, 0.9), Proposal(iv, 0, 0.8), Proposal(TemporalInterval(5, 6), 0, 0.5)],
                   decay_sigma=1e-3)
    assert [p.score for p in out] == [0.9, 0.5]


def peaked_outputs(seg=(40, 72), length=128, num_classes=3, label=1):
    """One-level outputs where only the centre location is confident and exact."""
    batch = pack_pyramids([[np.zeros((length, 1))]])
    n = len(batch)
    logits = np.full((n, num_classes), -12.0)
    offsets = np.ones((n, 2))
    tokens = np.full((n, 2), 30.0)
    c = (seg[0] + seg[1]) // 2
    logits[c, label] = 6.0
    offsets[c] = [c - seg[0], seg[1] - c]
    tokens[seg[0], 0] = 0.0
    tokens[seg[1], 1] = 0.0
    conf = np.exp(-tokens ** 2 / (2 * 5.5 ** 2))
    return HeadOutputs(logits, offsets, tokens, conf, batch, 5.5)


def test_peaked_fixture_single_detection():
    out = peaked_outputs()
    det = decode_sequence(out, 0, LabelSpace(num_classes=3), frame_rate=1.0)
    assert len(det) == 1
    assert det.labels == [1]
    assert tiou(TemporalInterval(det.starts[0], det.ends[0]), TemporalInterval(40, 72)) >= 0.9
    comps = det.components[0]
    assert det.scores[0] == fuse_scores("cls_sqrt_se", *comps)


def test_init_bias_detections_rank_below_confident():
    out = peaked_outputs()
    out.logits[:] = -2.0
    out.logits[56, 0] = 4.0
    det = decode_sequence(out, 0, LabelSpace(num_classes=3), 1.0, DecodeConfig(fusion="cls_only"))
    assert len(det) > 1
    assert det.scores[0] == pytest.approx(1 / (1 + math.exp(-4.0)))
    assert (det.scores[1:] < det.scores[0]).all()


def test_unit_confidence_matches_cls_only():
    rng = np.random.default_rng(0)
    out = peaked_outputs()
    out.logits[:] = rng.normal(size=out.logits.shape)
    out.confidences[:] = 1.0
    a = decode_sequence(out, 0, LabelSpace(num_classes=3), 1.0, DecodeConfig(fusion="cls_only"))
    b = decode_sequence(out, 0, LabelSpace(num_classes=3), 1.0)
    assert np.array_equal(a.scores, b.scores) and a.labels == b.labels


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_decode_bounds_and_budget(mode):
    rng = np.random.default_rng(1)
    batch = pack_pyramids([[np.zeros((64, 1)), np.zeros((32, 1)), np.zeros((16, 1))]])
    n = len(batch)
    out = HeadOutputs(rng.normal(size=(n, 2)), rng.uniform(0, 80, size=(n, 2)), rng.normal(size=(n, 2)),
                      rng.uniform(size=(n, 2)), batch, 5.5)
    det = decode_sequence(out, 0, LabelSpace(num_classes=2), 2.0, DecodeConfig(fusion=mode, max_keep=25))
    assert len(det) <= 25
    assert (det.starts >= 0).all() and (det.ends <= 32.0).all() and (det.starts <= det.ends).all()
    for p in det.proposals(out):
        assert p.score <= fuse_scores(mode, *p.components) + 1e-15
        assert p.origin is not None


def test_multitask_decode_labels():
    out = peaked_outputs(num_classes=5)
    labels = LabelSpace(num_verbs=2, num_nouns=3)
    out.logits[:] = -12.0
    out.logits[56, 1] = 5.0  # verb 1
    out.logits[56, 2 + 2] = 5.0  # noun 2
    det = decode_sequence(out, 0, labels, 1.0, DecodeConfig(topv=2, topn=3))
    assert det.labels[0] == (1, 2)
