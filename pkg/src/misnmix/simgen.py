"""Synthetic-data generation and the data-retention evaluation harness."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import car
from .geometry import Adjacency, GridGeometry, build_adjacency, lattice_grid
from .mcmc import PosteriorSamples, SamplerConfig, fit_model, equal_tail_interval, scalar_views
from .model import PriorConfig, SpeciesDataset, dataset_from_records

log = logging.getLogger(__name__)

# simulation truths: fixed, versioned defaults (recycled across dimensions)
TRUE_BETA0 = [1.2, 0.5, 0.8]
TRUE_BETA = [[0.8, 1.5, 0.2, 1.0, 0.6],
             [1.2, 0.4, 1.1, 0.6, 0.9],
             [0.5, 1.0, 1.4, 0.3, 0.7]]
TRUE_DELTA0 = [-0.3, 0.2, 0.5]
TRUE_DELTA = [[1.0, -1.0, 0.5, 0.2],
              [0.5, 1.0, -0.5, 0.8],
              [-0.8, 0.3, 0.9, -0.2]]
TRUE_TAU = [2.0, 2.5, 3.0]
TRUE_RHO = [0.5, 0.3, 0.4]
TRUE_THETA = [2.0, 1.5, 2.5]


def _recycle(values, *shape) -> np.ndarray:
    flat = np.resize(np.asarray(values, dtype=float), int(np.prod(shape)))
    return flat.reshape(shape)


@dataclass(frozen=True)
class SimConfig:
    lattice_side: int = 25
    n_regions: int = 5
    n_species: int = 3
    kappa_true: float = 0.2
    visits: int = 3
    p_covariates: int = 4
    q_covariates: int = 3
    retention_levels: tuple[float, ...] = (100, 50, 40, 30, 20, 10, 5, 2.5)
    covariate_correlation: float = 0.5

    def __post_init__(self):
        if self.lattice_side < 2 or self.visits < 1:
            raise ValueError("lattice_side >= 2 and visits >= 1 required")
        if any(not (0 < lv <= 100) for lv in self.retention_levels):
            raise ValueError("retention levels must lie in (0, 100]")
        if not (0 < self.kappa_true < 1):
            raise ValueError("kappa_true must lie in (0, 1)")


def desk_config() -> SimConfig:
    """Small profile for CI-scale runs."""
    return SimConfig(lattice_side=10, n_regions=5,
                     retention_levels=(100, 30, 2.5))


@dataclass(frozen=True)
class SimTruth:
    beta0: np.ndarray
    beta: np.ndarray
    delta0: np.ndarray
    delta: np.ndarray
    tau: np.ndarray
    rho: np.ndarray
    theta: np.ndarray
    u: np.ndarray            # (S, m)
    N: np.ndarray            # (S, m)
    kappa: np.ndarray        # (S, r)
    totals: np.ndarray       # (S,)

    def correlations(self) -> np.ndarray:
        corr = car.sigma_to_correlation(car.build_sigma(self.tau, self.rho))
        return corr[np.triu_indices(len(self.tau), k=1)]


def compositional_covariates(m: int, p: int, corr: float,
                             rng: np.random.Generator) -> np.ndarray:
    """Row-normalized correlated log-normals mimicking land-cover proportions."""
    C = np.full((p, p), corr) + (1 - corr) * np.eye(p)
    raw = np.exp(rng.multivariate_normal(np.zeros(p), C, size=m))
    return raw / raw.sum(axis=1, keepdims=True)


def simulate_dataset(config: SimConfig, seed: int
                     ) -> tuple[GridGeometry, Adjacency, SpeciesDataset, SimTruth]:
    """Generate one dataset from the full generative model, deterministic by seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    grid = lattice_grid(config.lattice_side, config.lattice_side,
                        n_regions=config.n_regions)
    adj = build_adjacency(grid)
    S, m, r = config.n_species, grid.n_sites, config.n_regions
    p_cov, q_cov = config.p_covariates, config.q_covariates

    beta0 = _recycle(TRUE_BETA0, S)
    beta = _recycle(TRUE_BETA, S, p_cov)
    delta0 = _recycle(TRUE_DELTA0, S)
    delta = _recycle(TRUE_DELTA, S, q_cov)
    tau = _recycle(TRUE_TAU, S)
    theta = _recycle(TRUE_THETA, S)
    rho = _recycle(TRUE_RHO, S * (S - 1) // 2)
    if not car.rho_is_valid(tau, rho):
        raise ValueError("default correlation truths invalid at this species count")

    X = compositional_covariates(m, p_cov, config.covariate_correlation, rng)
    G = compositional_covariates(m, q_cov, config.covariate_correlation, rng)
    u = car.sample_intrinsic_field(car.build_sigma(tau, rho), adj, rng)

    lam = np.exp(beta0[:, None] + beta @ X.T + u)
    p_det = 1.0 / (1.0 + np.exp(-(delta0[:, None] + delta @ G.T)))
    N = rng.negative_binomial(theta[:, None], theta[:, None] / (theta[:, None] + lam))
    obs = [(i, j, int(c))
           for i in range(S) for j in range(m)
           for c in rng.binomial(N[i, j], p_det[i, j], size=config.visits)]
    region_index = grid.region_index()
    R = np.zeros((S, r), dtype=np.int64)
    for i in range(S):
        np.add.at(R[i], region_index, N[i])
    kappa = np.full((S, r), config.kappa_true)
    z = rng.poisson(R * kappa)
    culls = [(i, k, int(z[i, k])) for i in range(S) for k in range(r)]
    dataset = dataset_from_records(S, m, r, obs, culls, X, G)
    truth = SimTruth(beta0=beta0, beta=beta, delta0=delta0, delta=delta,
                     tau=tau, rho=rho, theta=theta, u=u, N=N.astype(np.int64),
                     kappa=kappa, totals=N.sum(axis=1).astype(np.int64))
    return grid, adj, dataset, truth


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_retention(dataset: SpeciesDataset, percent: float, seed: int) -> SpeciesDataset:
    """Thin observations to the given percentage per species, cull data untouched.

    Whole sites (with all their visits) are retained first, in a seeded random
    order shared across retention levels, so lower levels are nested subsets
    of higher ones and multi-visit sites survive.
    """
    if not (0 < percent <= 100):
        raise ValueError("percent must lie in (0, 100]")
    if percent == 100:
        return dataset
    S, m = dataset.n_species, dataset.n_sites
    kept: list[tuple[int, int, int]] = []
    for i in range(S):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, i)))
        perm = rng.permutation(m)
        total = int(dataset.obs_ptr[i, m] - dataset.obs_ptr[i, 0])
        target = _round_half_up(percent / 100.0 * total)
        if target < 4:
            raise ValueError(
                f"retention {percent}% keeps {target} < 4 observations "
                f"for species {i}; unfittable")
        taken = 0
        for j in perm:
            lo, hi = dataset.obs_ptr[i, j], dataset.obs_ptr[i, j + 1]
            counts = dataset.obs_counts[lo:hi]
            take = min(len(counts), target - taken)
            for c in counts[:take]:
                kept.append((i, int(j), int(c)))
            taken += take
            if taken >= target:
                break
    culls = [(i, k, int(dataset.culls[i, k]))
             for i in range(S) for k in range(dataset.n_regions)]
    return dataset_from_records(S, m, dataset.n_regions, kept, culls,
                                dataset.X, dataset.G)


def rmse_surface(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-species RMSE between centred spatial surfaces (fields are
    identified only up to a constant)."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth shapes differ")
    e = estimate - estimate.mean(axis=1, keepdims=True)
    t = truth - truth.mean(axis=1, keepdims=True)
    return np.sqrt(np.mean((e - t) ** 2, axis=1))


def _interval_contains(series: np.ndarray, value: float) -> bool:
    _, lo, hi = equal_tail_interval(series.ravel())
    return lo <= value <= hi


def parameter_coverage(samples: PosteriorSamples, truth: SimTruth,
                       include_totals: bool = True) -> tuple[float, dict[str, bool]]:
    """Fraction of inferred parameters whose 95% interval contains the truth."""
    truth_map: dict[str, float] = {}
    for name, arr in (("beta0", truth.beta0), ("beta", truth.beta),
                      ("delta0", truth.delta0), ("delta", truth.delta),
                      ("tau", truth.tau), ("theta", truth.theta),
                      ("rho", truth.rho)):
        arr = np.atleast_1d(arr)
        if arr.ndim == 1:
            for i, v in enumerate(arr):
                truth_map[f"{name}[{i}]"] = float(v)
        else:
            for idx in np.ndindex(arr.shape):
                truth_map[f"{name}[{','.join(map(str, idx))}]"] = float(arr[idx])
    views = scalar_views(samples)
    hits: dict[str, bool] = {}
    for name, value in truth_map.items():
        if name in views:
            hits[name] = _interval_contains(views[name], value)
    if include_totals:
        totals = samples.species_totals()
        for i, v in enumerate(truth.totals):
            hits[f"total[{i}]"] = _interval_contains(totals[..., i], float(v))
    frac = sum(hits.values()) / len(hits)
    return frac, hits


def coverage_report(fits: dict[float, PosteriorSamples], truth: SimTruth) -> list[dict]:
    """One row per retention level: coverage fraction across all parameters."""
    rows = []
    for level in sorted(fits, reverse=True):
        frac, hits = parameter_coverage(fits[level], truth)
        rows.append({"retention": level, "coverage": frac,
                     "n_params": len(hits),
                     "totals_covered": all(v for k, v in hits.items()
                                           if k.startswith("total"))})
    return rows


@dataclass
class StudyResult:
    rmse_rows: list[dict] = field(default_factory=list)
    coverage_rows: list[dict] = field(default_factory=list)
    totals_rows: list[dict] = field(default_factory=list)
    correlation_rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)


def run_study(config: SimConfig, n_datasets: int, sampler: SamplerConfig,
              priors: PriorConfig | None = None, seed: int = 0) -> StudyResult:
    """Fit every dataset x retention-level cell and tabulate RMSE, coverage,
    species-total intervals, and correlation intervals."""
    if n_datasets < 1:
        raise ValueError("n_datasets must be >= 1")
    priors = priors or PriorConfig()
    result = StudyResult()
    for d in range(n_datasets):
        ds_seed = seed + d
        grid, adj, dataset, truth = simulate_dataset(config, ds_seed)
        kappa = truth.kappa
        fits: dict[float, PosteriorSamples] = {}
        for level in config.retention_levels:
            try:
                thinned = apply_retention(dataset, level, ds_seed)
                cfg = replace(sampler, seed=sampler.seed + d * 1000)
                samples = fit_model(thinned, kappa, priors, grid, adj, cfg,
                                    scenario_id=int(level * 10))
            except Exception as exc:
                log.exception("dataset %d retention %s failed", d, level)
                result.failures.append({"dataset": d, "retention": level,
                                        "error": str(exc)})
                continue
            fits[level] = samples
            u_mean = samples.flat("u").mean(axis=0)
            rmse = rmse_surface(u_mean, truth.u)
            row = {"dataset": d, "retention": level}
            row.update({f"species{i}": float(v) for i, v in enumerate(rmse)})
            result.rmse_rows.append(row)
            totals = samples.species_totals()
            for i in range(config.n_species):
                med, lo, hi = equal_tail_interval(totals[..., i].ravel())
                result.totals_rows.append(
                    {"dataset": d, "retention": level, "species": i,
                     "median": med, "lo95": lo, "hi95": hi,
                     "truth": int(truth.totals[i])})
            if config.n_species > 1:
                corr = samples.correlations()
                true_corr = truth.correlations()
                for k in range(corr.shape[-1]):
                    med, lo, hi = equal_tail_interval(corr[..., k].ravel())
                    result.correlation_rows.append(
                        {"dataset": d, "retention": level, "pair": k,
                         "median": med, "lo95": lo, "hi95": hi,
                         "width": hi - lo, "truth": float(true_corr[k])})
        for row in coverage_report(fits, truth):
            result.coverage_rows.append({"dataset": d, **row})
    return result
