"""Time the numba kernels against the pure-numpy fallback.

Usage::

    python benchmarks/bench_backends.py [--n 4000] [--dims 2,8,32] [--repeat 3]

Each case is run once untimed per backend (numba compiles on first use),
then timed ``--repeat`` times; the best time is reported together with the
largest difference between the two backends' results.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from kpn_entropy import _backend
from kpn_entropy.distributions import dimension_ramp, sample
from kpn_entropy.epmgp import box_logmass_batch
from kpn_entropy.estimators import EstimatorConfig, estimate_kpn
from kpn_entropy.knn import knn_all


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n, d, rng):
    s = sample(dimension_ramp("gaussian", d), n, int(rng.integers(1 << 31)))
    # EP inputs: random correlated Gaussians and boxes around their means
    m = min(n, 2000)
    a = rng.normal(size=(m, d, d))
    covs = a @ np.swapaxes(a, 1, 2) / d + 0.5 * np.eye(d)
    means = rng.normal(size=(m, d))
    lo = means + rng.normal(size=(m, d)) * 0.5 - 0.3
    p = max(d + 2, n // 50)
    return {
        "knn": lambda: knn_all(s, 4)[1],
        "ep": lambda: box_logmass_batch(means, covs, lo, lo + 0.6)[0],
        "kpn": lambda: np.array([estimate_kpn(s, EstimatorConfig(4, p)).estimate]),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--dims", default="2,8,32")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _backend.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'case':<6}{'d':>4}{'numpy s':>11}{'numba s':>11}{'speedup':>9}{'max |diff|':>13}")
    for d in (int(v) for v in args.dims.split(",")):
        rng = np.random.default_rng(args.seed + d)
        for name, fn in cases(args.n, d, rng).items():
            with _backend.backend("numpy"):
                t_np, r_np = best_time(fn, args.repeat)
            with _backend.backend("numba"):
                t_nb, r_nb = best_time(fn, args.repeat)
            diff = float(np.max(np.abs(r_np - r_nb)))
            print(f"{name:<6}{d:>4}{t_np:>11.3f}{t_nb:>11.3f}{t_np / t_nb:>9.1f}{diff:>13.2e}")


if __name__ == "__main__":
    main()
