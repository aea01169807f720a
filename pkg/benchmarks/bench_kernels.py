"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from hierkl import kernels


def cases(rng):
    B, K = 512, 10
    deltas = rng.normal(size=(B, K))
    coef = rng.random((B, K))
    z = rng.normal(size=(B * K, 200))
    g = rng.normal(size=z.shape)
    q = rng.normal(size=(500, 20))
    log_pi0 = np.log(np.full((500, 20), 1 / 20))
    N = 64

    def grid(mod):
        agent = rng.integers(0, 8, size=(N, 2))
        goal = rng.integers(0, 8, size=(N, 2))
        internal = np.zeros((N, 2), dtype=np.int64)
        steps = np.zeros(N, dtype=np.int64)
        acts = rng.integers(0, 4, size=N)
        active = np.ones(N, dtype=np.uint8)
        return lambda: mod.grid_step_batch(agent, goal, internal, steps, acts, active, 8, 8, 10 ** 9, 1.0, 0.1, 0.2)

    return {
        "backward_accumulate 512x10": lambda mod: (lambda: mod.backward_accumulate(deltas, coef)),
        "elu_forward 5120x200": lambda mod: (lambda: mod.elu_forward(z)),
        "elu_backward 5120x200": lambda mod: (lambda: mod.elu_backward(z, g)),
        "soft_backup 500x20": lambda mod: (lambda: mod.soft_backup(q, log_pi0, 0.5)),
        "grid_step_batch 64 envs": grid,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = kernels.BACKENDS
    if "cython" not in backends:
        print("compiled extension not available; timing the numpy fallback only")
    print(f"{'kernel':28s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, make in cases(rng).items():
        times = {}
        for b, mod in backends.items():
            fn = make(mod)
            fn()
            times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e6
        row = f"{name:28s}" + "".join(f"{times[b]:12.1f}us" for b in backends)
        if len(backends) > 1:
            row += f"{times['python'] / times['cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
