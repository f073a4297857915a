"""Timing comparison of the compiled and pure-python kernel paths.

Run as `python -m misnmix.benchmark [--side N] [--iterations N]`. Both paths
consume identical pre-drawn random streams, so besides timing this doubles
as an agreement check on the sampler's hot loops.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import kernels
from .car import build_sigma
from .simgen import SimConfig, simulate_dataset


def _setup(side: int, seed: int):
    grid, adj, dataset, truth = simulate_dataset(
        SimConfig(lattice_side=side, retention_levels=(100,)), seed)
    S, m = dataset.n_species, dataset.n_sites
    rng = np.random.default_rng(seed)
    base_lin = truth.beta0[:, None] + truth.beta @ dataset.X.T
    u = truth.u.copy()
    N = truth.N.astype(np.int64).copy()
    theta = truth.theta
    sigma = build_sigma(truth.tau, truth.rho)
    lam = np.exp(base_lin + u)
    nb_cache = np.empty((S, m))
    kernels.negbin_grid(N, lam, theta, nb_cache)
    return adj, dataset, dict(u=u, base_lin=base_lin, N=N, theta=theta,
                              sigma=sigma, nb_cache=nb_cache, rng=rng)


def _time_u_sweep(fn, adj, env, iterations: int) -> float:
    rng = np.random.default_rng(0)
    S, m = env["u"].shape
    # warm-up triggers compilation for the numba path
    for repeat in range(2):
        u = env["u"].copy()
        nb = env["nb_cache"].copy()
        start = time.perf_counter()
        for _ in range(iterations):
            normals = rng.standard_normal((S, m))
            logu = np.log(rng.random((S, m)))
            accepts = np.zeros(S, dtype=np.int64)
            fn(u, env["base_lin"], env["N"], env["theta"], env["sigma"],
               adj.indptr, adj.indices, adj.degrees, nb,
               np.full(S, 0.3), normals, logu, accepts)
        elapsed = time.perf_counter() - start
    return elapsed


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--side", type=int, default=25,
                        help="lattice side length (default 25)")
    parser.add_argument("--iterations", type=int, default=50)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args(argv)

    adj, dataset, env = _setup(args.side, args.seed)
    m = env["u"].shape[1]
    print(f"lattice {args.side}x{args.side} ({m} sites), "
          f"{args.iterations} field sweeps per path")

    results = {}
    for label, fn in (("numba", kernels.u_sweep_numba),
                      ("python", kernels.u_sweep_python)):
        if label == "numba" and kernels.NUMBA_DISABLED:
            print("numba   : disabled via MISNMIX_DISABLE_NUMBA")
            continue
        results[label] = _time_u_sweep(fn, adj, env, args.iterations)
        per_sweep = results[label] / args.iterations * 1e3
        print(f"{label:8s}: {results[label]:8.3f} s total, {per_sweep:8.3f} ms/sweep")
    if len(results) == 2:
        print(f"speedup : {results['python'] / results['numba']:.1f}x")

    # agreement: one sweep from identical streams on both paths
    if not kernels.NUMBA_DISABLED:
        S = env["u"].shape[0]
        rng = np.random.default_rng(7)
        normals = rng.standard_normal((S, m))
        logu = np.log(rng.random((S, m)))
        outs = []
        for fn in (kernels.u_sweep_numba, kernels.u_sweep_python):
            u = env["u"].copy()
            nb = env["nb_cache"].copy()
            fn(u, env["base_lin"], env["N"], env["theta"], env["sigma"],
               adj.indptr, adj.indices, adj.degrees, nb,
               np.full(S, 0.3), normals, logu, np.zeros(S, dtype=np.int64))
            outs.append(u)
        agree = np.array_equal(outs[0], outs[1])
        print(f"paths agree bit-for-bit: {agree}")
        if not agree:
            return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
