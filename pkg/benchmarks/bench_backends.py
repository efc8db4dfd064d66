"""Time the hot kernels on every available backend.

Usage: python benchmarks/bench_backends.py [--members 10] [--repeat 5]

Calls the kernel modules directly (same inputs, same call counts), so the
numbers compare implementations rather than experiment configurations.
"""
import argparse
import time

import numpy as np

from menkf._backend import available_backends
from menkf.integrate import _fast_half_matrices, _midpoint_matrices
from menkf.model import ModelParams
from menkf.obsmodel import make_observation_operator
from menkf.stats import LocalizationSpec, localization_taper


def _state_batch(p, m, seed=0):
    rng = np.random.default_rng(seed)
    return np.ascontiguousarray(8.0 + rng.standard_normal((m, 3 * p.n_grid)))


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(p, m, dt):
    M1T, M2T = _fast_half_matrices(p, dt)
    S1T, S2T, S2xT, c = _midpoint_matrices(p, dt)
    hop = make_observation_operator("x_every_second", p.n_grid)
    taper = localization_taper(p.n_grid, LocalizationSpec(radius=2.0))
    Csub = np.ascontiguousarray(taper[:, hop.cols])
    rinv = np.ascontiguousarray(np.full(hop.p, 1.0))
    rng = np.random.default_rng(1)
    yw = np.ascontiguousarray(rng.standard_normal(hop.p))
    FRc = None

    def tendency(k, Z):
        for _ in range(200):
            k.tendency_batch(Z, p.n_grid, p.eps, p.alpha, p.delta, p.gamma,
                             p.forcing, p.conservative)

    def strang(k, Z):
        k.step_strang_batch(Z.copy(), M1T, M2T, FRc, p.n_grid, dt, p.delta,
                            p.forcing, p.conservative, 1e-12, 50, 2000)

    def midpoint(k, Z):
        FR = np.ascontiguousarray(np.broadcast_to(c, Z.shape))
        k.step_midpoint_batch(Z.copy(), S1T, S2T, S2xT, FR, p.n_grid,
                              p.delta, 1e-12, 50, 2000)

    def increment(k, Z):
        for _ in range(500):
            k.analysis_increment(Z, hop.rows, hop.cols, hop.vals, rinv, 1.0,
                                 yw, Csub)

    def flow(k, Z):
        k.analysis_flow(Z.copy(), hop.rows, hop.cols, hop.vals, rinv, yw,
                        Csub, 2000, 1.0 / 2000)

    return [
        ("tendency_batch x200", tendency),
        ("strang 2000 steps", strang),
        ("midpoint 2000 steps", midpoint),
        ("analysis_increment x500", increment),
        ("analysis_flow K=2000", flow),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--members", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dt", type=float, default=0.0025)
    args = ap.parse_args()

    backends = available_backends()
    p = ModelParams()
    Z = _state_batch(p, args.members)
    cases = build_cases(p, args.members, args.dt)

    names = list(backends)
    width = max(len(label) for label, _ in cases)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{n:>10}" for n in names)
    if len(names) > 1:
        header += f"  {'speedup':>8}"
    print(f"members={args.members} n_grid={p.n_grid} (best of {args.repeat})")
    print(header)
    print("-" * len(header))
    for label, fn in cases:
        times = [_time(lambda k=k: fn(k, Z), args.repeat)
                 for k in backends.values()]
        row = f"{label:<{width}}  " + "  ".join(f"{t*1e3:8.2f}ms" for t in times)
        if len(times) > 1:
            row += f"  {times[0] / times[-1]:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
