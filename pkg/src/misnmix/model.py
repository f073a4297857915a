"""Data containers, likelihoods, priors, and the joint log-posterior.

The model combines per-visit binomial detection at fine-grid sites, a
negative-binomial latent abundance layer with a multivariate CAR spatial
field, and a Poisson approximation linking regional cull totals to summed
latent abundance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

from . import car
from .geometry import Adjacency, GridGeometry

LINPRED_CLAMP = 50.0


@dataclass(frozen=True)
class SpeciesDataset:
    """Visit counts, regional cull totals, and site covariates.

    Observations are stored per species in CSR layout over sites:
    obs_counts[obs_ptr[i, j]:obs_ptr[i, j+1]] are species i's visit counts at
    site j. X and G rows are compositional (sum to 1).
    """

    n_species: int
    obs_ptr: np.ndarray      # (S, m+1) int64
    obs_counts: np.ndarray   # flat int64
    culls: np.ndarray        # (S, r) int64
    X: np.ndarray            # (m, p)
    G: np.ndarray            # (m, q)

    def __post_init__(self):
        S = self.n_species
        m = self.X.shape[0]
        if self.obs_ptr.shape != (S, m + 1):
            raise ValueError("obs_ptr must be (S, m+1)")
        if self.G.shape[0] != m:
            raise ValueError("X and G must have one row per site")
        if np.any(self.obs_counts < 0) or np.any(self.culls < 0):
            raise ValueError("counts must be non-negative")
        for M, name in ((self.X, "X"), (self.G, "G")):
            if M.size:
                if np.any(M < 0) or np.any(M > 1):
                    raise ValueError(f"{name} entries must lie in [0, 1]")
                bad = np.nonzero(np.abs(M.sum(axis=1) - 1.0) > 1e-6)[0]
                if bad.size:
                    raise ValueError(
                        f"{name} rows {bad.tolist()[:5]} do not sum to 1 (tolerance 1e-6)")

    @property
    def n_sites(self) -> int:
        return self.X.shape[0]

    @property
    def n_regions(self) -> int:
        return self.culls.shape[1]

    @property
    def n_obs(self) -> int:
        return len(self.obs_counts)

    def max_counts(self) -> np.ndarray:
        """(S, m) max observed count per (species, site); 0 where unvisited."""
        S, m = self.n_species, self.n_sites
        out = np.zeros((S, m), dtype=np.int64)
        for i in range(S):
            for j in range(m):
                lo, hi = self.obs_ptr[i, j], self.obs_ptr[i, j + 1]
                if hi > lo:
                    out[i, j] = self.obs_counts[lo:hi].max()
        return out

    def visit_counts(self) -> np.ndarray:
        """(S, m) number of visits per (species, site)."""
        return np.diff(self.obs_ptr, axis=1).astype(np.int64)


def dataset_from_records(n_species: int, n_sites: int, n_regions: int,
                         observations: list[tuple[int, int, int]],
                         culls: list[tuple[int, int, int]],
                         X: np.ndarray, G: np.ndarray) -> SpeciesDataset:
    """Build a SpeciesDataset from (species, site, count) observation records
    and (species, region, count) cull records. Each (species, region) must
    appear exactly once in culls."""
    per_site: dict[tuple[int, int], list[int]] = {}
    for sp, site, count in observations:
        if not (0 <= sp < n_species):
            raise ValueError(f"unknown species {sp}")
        if not (0 <= site < n_sites):
            raise ValueError(f"unknown site {site}")
        per_site.setdefault((sp, site), []).append(int(count))
    obs_ptr = np.zeros((n_species, n_sites + 1), dtype=np.int64)
    flat: list[int] = []
    for i in range(n_species):
        for j in range(n_sites):
            flat.extend(per_site.get((i, j), []))
            obs_ptr[i, j + 1] = len(flat)
        if i + 1 < n_species:
            obs_ptr[i + 1, 0] = len(flat)
    z = np.full((n_species, n_regions), -1, dtype=np.int64)
    for sp, region, count in culls:
        if not (0 <= sp < n_species and 0 <= region < n_regions):
            raise ValueError(f"cull record ({sp},{region}) out of range")
        if z[sp, region] >= 0:
            raise ValueError(f"duplicate cull record for species {sp}, region {region}")
        z[sp, region] = int(count)
    if np.any(z < 0):
        missing = list(zip(*np.nonzero(z < 0)))
        raise ValueError(f"missing cull records for {missing[:5]}")
    return SpeciesDataset(n_species=n_species, obs_ptr=obs_ptr,
                          obs_counts=np.array(flat, dtype=np.int64),
                          culls=z, X=np.asarray(X, float), G=np.asarray(G, float))


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters; parameterizations are explicit in field names."""

    laplace_location: float = 1.0   # abundance coefficients
    laplace_scale: float = 1.0
    gamma_shape: float = 10.0       # spatial precision tau
    gamma_scale: float = 0.5
    exp_rate: float = 0.5           # negative-binomial dispersion theta
    normal_sd: float = 5.0          # intercepts and detection coefficients

    def __post_init__(self):
        for name in ("laplace_scale", "gamma_shape", "gamma_scale",
                     "exp_rate", "normal_sd"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class ParameterState:
    """One point in parameter space. Mutable; owned by a single chain."""

    beta0: np.ndarray   # (S,)
    beta: np.ndarray    # (S, p)
    delta0: np.ndarray  # (S,)
    delta: np.ndarray   # (S, q)
    tau: np.ndarray     # (S,)
    theta: np.ndarray   # (S,)
    rho: np.ndarray     # (S(S-1)/2,)
    u: np.ndarray       # (S, m)
    N: np.ndarray       # (S, m) int64

    def copy(self) -> "ParameterState":
        return ParameterState(**{k: v.copy() for k, v in self.__dict__.items()})

    def sigma(self) -> np.ndarray:
        return car.build_sigma(self.tau, self.rho)

    def validate_support(self, max_counts: np.ndarray) -> None:
        if np.any(self.tau <= 0) or np.any(self.theta <= 0):
            raise ValueError("tau and theta must be > 0")
        if np.any(np.abs(self.rho) >= 1):
            raise ValueError("rho must lie in (-1, 1)")
        if np.any(self.N < max_counts):
            raise ValueError("latent N below an observed count")


def linpred_lambda(state: ParameterState, X: np.ndarray) -> np.ndarray:
    """(S, m) mean abundance lambda = exp(beta0 + X beta + u), clamped at +-50."""
    lin = state.beta0[:, None] + state.beta @ X.T + state.u
    return np.exp(np.clip(lin, -LINPRED_CLAMP, LINPRED_CLAMP))


def detection_prob(state: ParameterState, G: np.ndarray) -> np.ndarray:
    """(S, m) per-visit detection probability, inverse-logit link."""
    return expit(state.delta0[:, None] + state.delta @ G.T)


def mean_abundance(state: ParameterState, X: np.ndarray, species: int, site: int) -> float:
    return float(linpred_lambda(state, X)[species, site])


def negbin_logpmf(n, lam, theta):
    """Mean-dispersion negative binomial: mean lam, variance lam + lam^2/theta."""
    n = np.asarray(n)
    if np.any(n < 0):
        raise ValueError("negative count")
    lam = np.asarray(lam, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return (gammaln(n + theta) - gammaln(theta) - gammaln(n + 1)
            + theta * np.log(theta / (theta + lam))
            + n * np.log(lam / (theta + lam)))


def binom_logpmf(n, N, p):
    """Binomial logpmf with exact handling of the p in {0, 1} boundaries."""
    n = np.asarray(n, dtype=np.int64)
    N = np.asarray(N, dtype=np.int64)
    p = np.asarray(p, dtype=float)
    out = np.where(n <= N, 0.0, -np.inf)
    interior = (p > 0.0) & (p < 1.0) & (n <= N)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (gammaln(N + 1) - gammaln(n + 1) - gammaln(N - n + 1)
               + n * np.log(p) + (N - n) * np.log1p(-p))
    out = np.where(interior, val, out)
    out = np.where((p >= 1.0) & (n != N), -np.inf, out)
    out = np.where((p <= 0.0) & (n != 0), -np.inf, out)
    return out


def poisson_logpmf(z, rate):
    """Poisson logpmf; rate 0 is a point mass at z = 0."""
    z = np.asarray(z, dtype=np.int64)
    rate = np.asarray(rate, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = z * np.log(rate) - rate - gammaln(z + 1)
    zero = rate <= 0.0
    return np.where(zero, np.where(z == 0, 0.0, -np.inf), val)


def obs_loglik(state: ParameterState, dataset: SpeciesDataset) -> float:
    """Sum of per-visit binomial terms; returns -inf if any n > N."""
    p = detection_prob(state, dataset.G)
    total = 0.0
    for i in range(dataset.n_species):
        for j in range(dataset.n_sites):
            lo, hi = dataset.obs_ptr[i, j], dataset.obs_ptr[i, j + 1]
            if hi == lo:
                continue
            counts = dataset.obs_counts[lo:hi]
            terms = binom_logpmf(counts, state.N[i, j], p[i, j])
            s = float(np.sum(terms))
            if not np.isfinite(s):
                return -math.inf
            total += s
    return total


def regional_totals(N: np.ndarray, region_index: np.ndarray, n_regions: int) -> np.ndarray:
    """(S, r) integer sums of latent N over each region's sites."""
    S = N.shape[0]
    out = np.zeros((S, n_regions), dtype=np.int64)
    for i in range(S):
        np.add.at(out[i], region_index, N[i])
    return out


def cull_loglik(state: ParameterState, dataset: SpeciesDataset,
                kappa: np.ndarray, region_index: np.ndarray) -> float:
    """Poisson terms for regional cull totals, rate R_ik * kappa_ik."""
    if np.any(kappa <= 0) or np.any(kappa >= 1):
        raise ValueError("kappa entries must lie in (0, 1)")
    R = regional_totals(state.N, region_index, dataset.n_regions)
    terms = poisson_logpmf(dataset.culls, R * kappa)
    total = float(np.sum(terms))
    return total if np.isfinite(total) else -math.inf


def laplace_logpdf(x, loc, scale):
    return -math.log(2.0 * scale) - np.abs(np.asarray(x) - loc) / scale


def gamma_logpdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = ((shape - 1.0) * np.log(x) - x / scale
               - shape * math.log(scale) - gammaln(shape))
    return np.where(x > 0, val, -np.inf)


def expon_logpdf(x, rate):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, math.log(rate) - rate * x, -np.inf)


def normal_logpdf(x, mean, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * ((x - mean) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2.0 * math.pi)


def log_prior(state: ParameterState, priors: PriorConfig, adj: Adjacency) -> float:
    """Sum of all prior terms, including the MICAR kernel on the spatial field.

    Out-of-support parameters give -inf; the rho prior is uniform on (-1, 1)
    restricted to the SPD set (rejection).
    """
    if np.any(state.tau <= 0) or np.any(state.theta <= 0):
        return -math.inf
    if np.any(np.abs(state.rho) >= 1) or not car.rho_is_valid(state.tau, state.rho):
        return -math.inf
    total = float(np.sum(laplace_logpdf(state.beta, priors.laplace_location,
                                        priors.laplace_scale)))
    total += float(np.sum(gamma_logpdf(state.tau, priors.gamma_shape, priors.gamma_scale)))
    total += float(np.sum(expon_logpdf(state.theta, priors.exp_rate)))
    total += float(np.sum(normal_logpdf(state.beta0, 0.0, priors.normal_sd)))
    total += float(np.sum(normal_logpdf(state.delta0, 0.0, priors.normal_sd)))
    total += float(np.sum(normal_logpdf(state.delta, 0.0, priors.normal_sd)))
    total += len(state.rho) * math.log(0.5)  # uniform(-1, 1)
    total += car.micar_logdensity(state.u, state.sigma(), adj)
    return total


def joint_log_posterior(state: ParameterState, dataset: SpeciesDataset,
                        kappa: np.ndarray, priors: PriorConfig,
                        geometry: GridGeometry, adj: Adjacency) -> float:
    """obs + latent NegBin + cull + prior. -inf propagates; NaN raises."""
    lp = log_prior(state, priors, adj)
    if lp == -math.inf:
        return -math.inf
    lam = linpred_lambda(state, dataset.X)
    nb = float(np.sum(negbin_logpmf(state.N, lam, state.theta[:, None])))
    ol = obs_loglik(state, dataset)
    cl = cull_loglik(state, dataset, kappa, geometry.region_index())
    total = lp + nb + ol + cl
    if math.isnan(total):
        raise FloatingPointError("NaN in joint log-posterior")
    return total
