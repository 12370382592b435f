"""Compare the compiled and pure-Python kernels on Soft-NMS and detection matching.

    python benchmarks/bench_kernels.py [--sizes 200,1000,2000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from tadconf import _kernels


def nms_case(n, rng):
    starts = rng.uniform(0, 300, n)
    ends = starts + rng.uniform(1, 30, n)
    scores = rng.uniform(0, 1, n)
    labels = rng.integers(0, 4, n)
    return starts, ends, scores, labels.astype(np.int64)


def match_case(n, rng, videos=10):
    det_video = np.sort(rng.integers(0, videos, n)).astype(np.int64)
    det_start = rng.uniform(0, 300, n)
    det_end = det_start + rng.uniform(1, 30, n)
    per = max(1, n // (4 * videos))
    gt_ptr = np.arange(0, per * (videos + 1) + 1, per, dtype=np.int64)
    gt_ptr[-1] = gt_ptr[-2]
    gt_start = rng.uniform(0, 300, per * videos)
    gt_end = gt_start + rng.uniform(1, 30, per * videos)
    return det_video, det_start, det_end, gt_ptr, gt_start, gt_end


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="200,1000,2000")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = sorted(_kernels.BACKENDS)
    print(f"backends: {', '.join(backends)} (active: {_kernels.BACKEND})")
    print(f"{'kernel':<10}{'n':>7}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}  identical")
    rng = np.random.default_rng(0)
    for n in (int(x) for x in args.sizes.split(",")):
        cases = {
            "soft_nms": (nms_case(n, rng), lambda k, c: k.soft_nms_kernel(*c, 0.5, 0.001, 200)),
            "match": (match_case(n, rng), lambda k, c: k.match_kernel(*c, 0.5)),
        }
        for name, (case, call) in cases.items():
            times, outs = {}, {}
            for b in backends:
                kernel = _kernels.get_backend(b)
                times[b], outs[b] = best_of(lambda: call(kernel, case), args.repeat)
            same = all(all(np.array_equal(x, y) for x, y in zip(outs[backends[0]], outs[b])) for b in backends)
            speed = times["python"] / times["cython"] if "cython" in times else 1.0
            row = "".join(f"{1e3 * times[b]:>14.3f}" for b in backends)
            print(f"{name:<10}{n:>7}{row}{speed:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
