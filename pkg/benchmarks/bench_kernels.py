"""Compare the numba and pure-numpy kernels on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both implementations are imported directly, so the MEDOVD_DISABLE_NUMBA
flag is irrelevant here. Outputs are checked for equality before timing.
"""

import argparse
import time

import numpy as np

from medovd import curation, geometry, metrics


def random_boxes(rng, n, size=640.0):
    xy = rng.uniform(0, size * 0.9, (n, 2))
    wh = rng.uniform(4, size * 0.2, (n, 2))
    return np.hstack([xy, xy + wh])


def bench(fn, args, repeat):
    fn(*args)  # compile / warm caches
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    a, b = random_boxes(rng, 300), random_boxes(rng, 200)
    yield "iou_matrix 300x200", geometry._iou_matrix_numba, geometry._iou_matrix_numpy, (a, b)

    boxes = random_boxes(rng, 2000)
    order = np.argsort(-rng.random(2000), kind="stable")
    labels = rng.integers(0, 8, 2000)
    yield "nms 2000 boxes", geometry._nms_numba, geometry._nms_numpy, (boxes, order, labels, 0.7)

    ious = rng.random((1000, 300)) * (rng.random((1000, 300)) < 0.05)
    yield "greedy match 1000x300", metrics._greedy_match_numba, metrics._greedy_match_numpy, (ious, 0.5)

    lab = rng.integers(0, 12, (512, 512))
    yield "label extrema 512^2", curation._label_extrema_numba, curation._label_extrema_numpy, (lab, 12)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fast, slow, a in cases(rng):
        ra, rb = fast(*a), slow(*a)
        for x, y in zip(np.atleast_1d(ra) if not isinstance(ra, tuple) else ra,
                        np.atleast_1d(rb) if not isinstance(rb, tuple) else rb):
            if not np.allclose(x, y):
                raise SystemExit(f"{name}: implementations disagree")
        tf, ts = bench(fast, a, args.repeat), bench(slow, a, args.repeat)
        print(f"{name:<24}{tf * 1e3:>10.3f}{ts * 1e3:>10.3f}{ts / tf:>8.1f}x")


if __name__ == "__main__":
    main()
