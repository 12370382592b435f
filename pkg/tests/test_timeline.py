import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tadconf.timeline import (
    PyramidConfig, TemporalInterval, giou_1d, giou_arrays, level_length, location_grid,
    pairwise_tiou, pyramid_locations, tiou, tiou_arrays,
)

I = TemporalInterval
coord = st.floats(min_value=0, max_value=1e3, allow_nan=False)


@st.composite
def intervals(draw):
    a, b = draw(coord), draw(coord)
    return I(min(a, b), max(a, b))


@pytest.mark.parametrize("a,b,expected", [
    ((0, 10), (0, 10), 1.0),
    ((0, 10), (5, 15), 1 / 3),
    ((0, 2), (4, 6), 0.0),
])
def test_tiou_examples(a, b, expected):
    assert tiou(I(*a), I(*b)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("a,b,expected", [
    ((0, 10), (0, 10), 1.0),
    ((0, 2), (4, 6), -1 / 3),
    ((0, 4), (2, 6), 1 / 3),
])
def test_giou_examples(a, b, expected):
    assert giou_1d(I(*a), I(*b)) == pytest.approx(expected, abs=1e-12)


def test_interval_rejects_reversed():
    with pytest.raises(ValueError):
        I(3, 2)
    assert I(2, 2).length() == 0


def test_zero_length_inputs():
    assert tiou(I(1, 1), I(1, 1)) == 0.0
    assert giou_1d(I(1, 1), I(1, 1)) == 0.0
    assert tiou(I(1, 1), I(0, 2)) == 0.0


@given(intervals(), intervals())
def test_tiou_symmetric_bounded(a, b):
    v = tiou(a, b)
    assert v == tiou(b, a)
    assert 0.0 <= v <= 1.0


@given(intervals())
def test_tiou_identity(a):
    assert tiou(a, a) == (1.0 if a.length() > 0 else 0.0)


@given(intervals(), intervals())
def test_giou_properties(a, b):
    g = giou_1d(a, b)
    assert g == pytest.approx(giou_1d(b, a), abs=1e-12)
    assert -1.0 <= g <= tiou(a, b) + 1e-12
    enclosure = max(a.end, b.end) - min(a.start, b.start)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    if enclosure > 0 and math.isclose(enclosure, a.length() + b.length() - inter, rel_tol=0, abs_tol=0):
        assert g == pytest.approx(tiou(a, b), abs=1e-12)


def test_giou_tends_to_minus_one():
    values = [giou_1d(I(0, 1), I(gap, gap + 1)) for gap in (2, 10, 100, 1e6)]
    assert values == sorted(values, reverse=True)
    assert values[-1] == pytest.approx(-1.0, abs=1e-5)


def test_array_forms_match_scalar():
    rng = np.random.default_rng(0)
    s1 = rng.uniform(0, 50, 200)
    e1 = s1 + rng.uniform(0, 20, 200)
    s2 = rng.uniform(0, 50, 200)
    e2 = s2 + rng.uniform(0, 20, 200)
    t = tiou_arrays(s1, e1, s2, e2)
    g = giou_arrays(s1, e1, s2, e2)
    for i in range(200):
        assert t[i] == tiou(I(s1[i], e1[i]), I(s2[i], e2[i]))
        assert g[i] == pytest.approx(giou_1d(I(s1[i], e1[i]), I(s2[i], e2[i])), abs=1e-15)
    m = pairwise_tiou(np.stack([s1[:5], e1[:5]], 1), np.stack([s2[:7], e2[:7]], 1))
    assert m.shape == (5, 7)
    assert m[3, 4] == tiou(I(s1[3], e1[3]), I(s2[4], e2[4]))


def test_default_pyramid_total():
    cfg = PyramidConfig()
    assert cfg.level_lengths() == [2304, 1152, 576, 288, 144, 72]
    assert len(pyramid_locations(cfg)) == 4536


def test_location_positions():
    locs = pyramid_locations(PyramidConfig(num_levels=3, base_length=16))
    by_key = {(p.level, p.index): p for p in locs}
    assert by_key[(0, 5)].t == 5
    assert by_key[(2, 3)].t == 12
    assert by_key[(2, 3)].stride == 4
    # level-major then index-major
    keys = [(p.level, p.index) for p in locs]
    assert keys == sorted(keys)


def test_ceiling_levels():
    assert [level_length(5, lv) for lv in range(4)] == [5, 3, 2, 1]


def test_grid_matches_locations():
    cfg = PyramidConfig(num_levels=4, base_length=37)
    grid = location_grid(cfg.base_length, cfg.num_levels)
    locs = pyramid_locations(cfg)
    assert len(grid) == len(locs)
    assert np.array_equal(grid.t, [p.t for p in locs])
    assert np.array_equal(grid.t, grid.index * grid.stride)
    for lv in range(4):
        assert (grid.level[grid.level_slice(lv)] == lv).all()
