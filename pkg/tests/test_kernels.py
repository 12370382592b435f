import os
import subprocess
import sys

import numpy as np
import pytest

from tadconf import _kernels

from conftest import interval_arrays

needs_ext = pytest.mark.skipif("cython" not in _kernels.BACKENDS, reason="compiled kernels not built")


@needs_ext
@pytest.mark.parametrize("seed", range(20))
def test_soft_nms_backends_identical(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 400))
    s, e = interval_arrays(rng, n)
    sc = rng.uniform(0, 1, n)
    lab = rng.integers(0, 3, n).astype(np.int64)
    sigma = float(rng.choice([0.1, 0.5, 2.0]))
    a = _kernels.BACKENDS["python"].soft_nms_kernel(s, e, sc, lab, sigma, 0.001, 150)
    b = _kernels.BACKENDS["cython"].soft_nms_kernel(s, e, sc, lab, sigma, 0.001, 150)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


@needs_ext
@pytest.mark.parametrize("seed", range(20))
def test_match_backends_identical(seed):
    rng = np.random.default_rng(seed)
    videos = int(rng.integers(1, 5))
    nd, ng = int(rng.integers(0, 200)), int(rng.integers(0, 60))
    det_video = rng.integers(0, videos + 1, nd).astype(np.int64)
    ds, de = interval_arrays(rng, nd)
    counts = np.bincount(rng.integers(0, videos, ng), minlength=videos)
    ptr = np.concatenate([[0], np.cumsum(counts), [ng]]).astype(np.int64)
    gs, ge = interval_arrays(rng, ng)
    thr = float(rng.uniform(0.1, 0.9))
    a = _kernels.BACKENDS["python"].match_kernel(det_video, ds, de, ptr, gs, ge, thr)
    b = _kernels.BACKENDS["cython"].match_kernel(det_video, ds, de, ptr, gs, ge, thr)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_empty_inputs(backend):
    k = _kernels.get_backend(backend)
    keep, scores = k.soft_nms_kernel(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, np.int64), 0.5, 0.001, 10)
    assert len(keep) == 0 and len(scores) == 0


def test_unknown_backend():
    with pytest.raises(ValueError, match="not available"):
        _kernels.get_backend("fortran")


def test_env_forces_fallback():
    code = "from tadconf import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, TADCONF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
