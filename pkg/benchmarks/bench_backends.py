"""Benchmark the numba kernels against the pure-numpy fallbacks.

Kernel microbenchmarks run both implementations in-process; the end-to-end
sampler comparison re-launches the interpreter with REPULSE_NUMBA=0/1 so
each run uses exactly the code path a user would get.

    python benchmarks/bench_backends.py [--quick]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from repulse import _accel


def timeit(fn, *args, repeat=200, warmup=2):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def kernel_benchmarks(repeat):
    rng = np.random.default_rng(0)
    impls = {"numpy": _accel.impls("numpy")}
    try:
        impls["numba"] = _accel.impls("numba")
    except RuntimeError:
        print("numba backend unavailable; kernel table covers numpy only")

    n, d, k = 8, 2, 8
    points = np.ascontiguousarray(rng.normal(0, 1, (n, d)))
    logw = np.full(k, -np.log(k))
    mus = rng.normal(0, 2, (k, d))
    covs = np.stack([np.eye(d) * v for v in rng.uniform(0.3, 1.5, k)])
    precs = np.linalg.inv(covs)
    lognorms = -0.5 * (d * np.log(2 * np.pi) + np.linalg.slogdet(covs)[1])
    big_a = np.ascontiguousarray(rng.normal(0, 1, (2000, d)))
    big_b = np.ascontiguousarray(rng.normal(1, 1, (2000, d)))
    pos = rng.normal(0, 1, (n, d))
    grad = rng.normal(0, 1, (n, d))

    cases = [
        ("gmm_score (8 pts, 8 comps)", "gmm_score_prepped", (points, logw, mus, precs, lognorms), repeat),
        ("repulsion log_sum (8 pts)", "repulsion_forces_feat", (points, 0.7, 1.5, True), repeat),
        ("repulsion sum_log (8 pts)", "repulsion_forces_feat", (points, 0.7, 1.5, False), repeat),
        ("median distance (8 pts)", "median_pairwise_distance", (points,), repeat),
        ("adam update (8x2)", "adam_update", (pos, grad, np.zeros_like(pos), np.zeros_like(pos), 3, 0.05, 0.9, 0.99, 1e-8), repeat),
        ("energy sums (2000 vs 2000)", "energy_sums", (big_a, big_b), max(2, repeat // 50)),
    ]
    print(f"{'kernel':34s} " + " ".join(f"{name:>12s}" for name in impls) + "   speedup")
    for label, key, args, rep in cases:
        times = {name: timeit(impls[name][key], *args, repeat=rep) for name in impls}
        cols = " ".join(f"{times[name] * 1e6:9.1f} us" for name in impls)
        speed = times["numpy"] / times["numba"] if "numba" in times else float("nan")
        print(f"{label:34s} {cols}   {speed:6.1f}x")


RUN_SNIPPET = """
import time, numpy as np, repulse as rp
sch = rp.DiffusionSchedule()
spec = rp.KernelSpec(gamma=1.0, gamma_schedule="sigma_scaled")
wt = rp.WeightingSpec(1.0)
toy = rp.toy_bimodal()
rp.run_rsd(toy, spec, sch, wt, 2, 200, 0, t_order="descending")  # warm the JIT cache
t0 = time.perf_counter()
for seed in range({seeds}):
    rp.run_rsd(toy, spec, sch, wt, 2, 2000, seed, t_order="descending")
print((time.perf_counter() - t0) / {seeds})
"""


def run_benchmark(seeds):
    print(f"\nend-to-end: distillation run, 2 particles x 2000 steps (mean of {seeds} seeds)")
    results = {}
    for name, flag in (("numba", "1"), ("numpy", "0")):
        env = dict(os.environ, REPULSE_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, "-c", RUN_SNIPPET.format(seeds=seeds)],
            capture_output=True, text=True, env=env,
        )
        if out.returncode != 0:
            print(f"  {name}: failed\n{out.stderr}")
            continue
        results[name] = float(out.stdout.strip())
        print(f"  {name:6s} {results[name] * 1e3:8.1f} ms/run")
    if len(results) == 2:
        print(f"  speedup {results['numpy'] / results['numba']:.1f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="fewer repetitions")
    args = parser.parse_args()
    repeat = 50 if args.quick else 500
    print(f"active backend: {_accel.backend()}\n")
    kernel_benchmarks(repeat)
    run_benchmark(3 if args.quick else 10)


if __name__ == "__main__":
    main()
