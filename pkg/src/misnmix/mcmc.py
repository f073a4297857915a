"""Adaptive Metropolis-within-Gibbs engine, diagnostics, and summaries."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import car, kernels
from .geometry import Adjacency, GridGeometry
from .model import (ParameterState, PriorConfig, SpeciesDataset, binom_logpmf,
                    gamma_logpdf, expon_logpdf, laplace_logpdf, normal_logpdf,
                    LINPRED_CLAMP)

log = logging.getLogger(__name__)

TARGET_SCALAR = 0.44
TARGET_VECTOR = 0.234
N_INIT_CAP = 1_000_000


@dataclass(frozen=True)
class SamplerConfig:
    n_iterations: int = 40_000
    n_burnin: int = 20_000
    thin: int = 20
    n_chains: int = 3
    seed: int = 0
    initial_scale: float = 0.5
    adapt: bool = True
    adapt_window: int = 50
    latent_step_width: int = 5
    sample_blocks: tuple[str, ...] | None = None  # None = all blocks

    def __post_init__(self):
        if self.n_burnin >= self.n_iterations:
            raise ValueError("n_burnin must be < n_iterations")
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be >= 1")
        if self.initial_scale <= 0:
            raise ValueError("initial_scale must be > 0")
        if self.latent_step_width < 1:
            raise ValueError("latent_step_width must be >= 1 (w = 0 is degenerate)")

    @property
    def n_retained(self) -> int:
        return (self.n_iterations - self.n_burnin) // self.thin


ALL_BLOCKS = ("u", "beta0", "beta", "delta0", "delta", "tau", "theta", "rho", "N")


@dataclass
class PosteriorSamples:
    """Retained draws keyed by parameter name, shaped (n_chains, n_kept, ...)."""

    draws: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    @property
    def n_kept(self) -> int:
        return next(iter(self.draws.values())).shape[1]

    def flat(self, name: str) -> np.ndarray:
        """(n_chains * n_kept, ...) with chains concatenated."""
        a = self.draws[name]
        return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])

    def species_totals(self) -> np.ndarray:
        """(n_chains, n_kept, S) latent population totals per draw."""
        return self.draws["N"].sum(axis=-1)

    def regional_totals(self, region_index: np.ndarray, n_regions: int) -> np.ndarray:
        """(n_chains, n_kept, S, r) draws of regional populations."""
        N = self.draws["N"]
        out = np.zeros(N.shape[:3] + (n_regions,), dtype=np.int64)
        for k in range(n_regions):
            out[..., k] = N[..., region_index == k].sum(axis=-1)
        return out

    def correlations(self) -> np.ndarray:
        """(n_chains, n_kept, S(S-1)/2) between-species correlations per draw."""
        tau, rho = self.draws["tau"], self.draws["rho"]
        nc, nk, S = tau.shape
        out = np.zeros_like(rho)
        iu = np.triu_indices(S, k=1)
        for c in range(nc):
            for t in range(nk):
                corr = car.sigma_to_correlation(car.build_sigma(tau[c, t], rho[c, t]))
                out[c, t] = corr[iu]
        return out


def scalar_views(samples: PosteriorSamples,
                 names: tuple[str, ...] = ("beta0", "beta", "delta0", "delta",
                                           "tau", "theta", "rho")) -> dict[str, np.ndarray]:
    """Flatten multi-dim parameters into named scalar series (n_chains, n_kept)."""
    out = {}
    for name in names:
        if name not in samples.draws:
            continue
        a = samples.draws[name]
        if a.ndim == 2:
            out[name] = a
            continue
        flatshape = int(np.prod(a.shape[2:]))
        flatted = a.reshape(a.shape[0], a.shape[1], flatshape)
        for idx in range(flatshape):
            sub = np.unravel_index(idx, a.shape[2:])
            label = name + "[" + ",".join(str(s) for s in sub) + "]"
            out[label] = flatted[:, :, idx]
    return out


def rw_metropolis_block(x: np.ndarray, logpost, current_lp: float, scale: float,
                        rng: np.random.Generator) -> tuple[np.ndarray, float, bool]:
    """Generic Gaussian random-walk Metropolis step on an unconstrained vector.

    logpost evaluates the target at a point; proposals use a spherical
    Gaussian with the given scale. Raises if the current log-posterior is
    non-finite (an invalid chain state, not a rejectable proposal).
    """
    if not np.isfinite(current_lp):
        raise ValueError("current log-posterior is non-finite; invalid chain state")
    prop = x + scale * rng.standard_normal(np.shape(x))
    lp_prop = logpost(prop)
    if math.log(rng.uniform()) < lp_prop - current_lp:
        return prop, lp_prop, True
    return x, current_lp, False


class ScaleAdapter:
    """Robbins-Monro proposal-scale adaptation, frozen after burn-in."""

    def __init__(self, scale: float, target: float):
        self.log_scale = math.log(scale)
        self.target = target
        self.frozen = False
        self._t = 0

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def update(self, acc_rate: float) -> None:
        if self.frozen:
            log.warning("adapt_scales called after burn-in; ignored")
            return
        self._t += 1
        self.log_scale += self._t ** -0.6 * (acc_rate - self.target)


def adapt_scales(scale: float, acc_rate: float, t: int, target: float) -> float:
    """One Robbins-Monro update: log s <- log s + t^-0.6 (acc - target)."""
    return math.exp(math.log(scale) + t ** -0.6 * (acc_rate - target))


def chain_rng(seed: int, scenario_id: int, chain_id: int) -> np.random.Generator:
    """Independent, reproducible stream for a (scenario, chain) pair.

    scenario_id -1 (the deterministic mean scenario) maps to spawn key 0."""
    if scenario_id < -1:
        raise ValueError("scenario_id must be >= -1")
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(scenario_id + 1, chain_id)))


def draw_initial_state(dataset: SpeciesDataset, priors: PriorConfig,
                       adj: Adjacency, rng: np.random.Generator) -> ParameterState:
    """Initial state from the priors; N starts at max(observed, round(lambda))."""
    S, m = dataset.n_species, dataset.n_sites
    p_cov, q_cov = dataset.X.shape[1], dataset.G.shape[1]
    beta0 = rng.normal(0.0, priors.normal_sd, S)
    delta0 = rng.normal(0.0, priors.normal_sd, S)
    delta = rng.normal(0.0, priors.normal_sd, (S, q_cov))
    beta = rng.laplace(priors.laplace_location, priors.laplace_scale, (S, p_cov))
    tau = rng.gamma(priors.gamma_shape, priors.gamma_scale, S)
    theta = rng.exponential(1.0 / priors.exp_rate, S)
    n_rho = S * (S - 1) // 2
    for _ in range(1000):
        rho = rng.uniform(-1.0, 1.0, n_rho)
        if car.rho_is_valid(tau, rho):
            break
    else:
        raise RuntimeError("could not draw a valid correlation structure")
    u = car.sample_intrinsic_field(car.build_sigma(tau, rho), adj, rng)
    state = ParameterState(beta0=beta0, beta=beta, delta0=delta0, delta=delta,
                           tau=tau, theta=theta, rho=rho, u=u,
                           N=np.zeros((S, m), dtype=np.int64))
    lin = np.clip(state.beta0[:, None] + state.beta @ dataset.X.T + u,
                  -LINPRED_CLAMP, LINPRED_CLAMP)
    lam = np.exp(lin)
    # cap avoids absurd integer latents from extreme prior draws
    state.N = np.maximum(dataset.max_counts(),
                         np.minimum(np.round(lam), N_INIT_CAP).astype(np.int64))
    return state


class _ChainRunner:
    """Owns one chain's state, caches, proposal scales, and RNG stream."""

    def __init__(self, dataset: SpeciesDataset, kappa: np.ndarray | None,
                 priors: PriorConfig, geometry: GridGeometry, adj: Adjacency,
                 config: SamplerConfig, rng: np.random.Generator,
                 init_state: ParameterState | None = None):
        self.dataset = dataset
        self.priors = priors
        self.geometry = geometry
        self.adj = adj
        self.config = config
        self.rng = rng
        self.use_cull = kappa is not None
        self.kappa = (np.asarray(kappa, dtype=float) if self.use_cull
                      else np.zeros_like(dataset.culls, dtype=float))
        if self.use_cull and (np.any(self.kappa <= 0) or np.any(self.kappa >= 1)):
            raise ValueError("kappa entries must lie in (0, 1)")
        self.blocks = (tuple(config.sample_blocks) if config.sample_blocks is not None
                       else ALL_BLOCKS)
        self.region_index = geometry.region_index()
        self.max_counts = dataset.max_counts()
        self.S, self.m = dataset.n_species, dataset.n_sites

        self.state = init_state.copy() if init_state is not None else None
        if self.state is None:
            for attempt in range(100):
                cand = draw_initial_state(dataset, priors, adj, rng)
                # extreme latent starts mix too slowly for an integer RW
                if cand.N.max() > 10_000 + dataset.max_counts().max():
                    continue
                if np.isfinite(self._init_lp(cand)):
                    self.state = cand
                    break
            if self.state is None:
                raise RuntimeError(
                    "no finite-posterior initial state after 100 prior draws")
        self._center_u()
        self._rebuild_caches()
        if not np.isfinite(self._total_lp()):
            raise RuntimeError("initial state has non-finite posterior")

        scalar_blocks = [("beta0", i) for i in range(self.S)]
        scalar_blocks += [("delta0", i) for i in range(self.S)]
        scalar_blocks += [("tau", i) for i in range(self.S)]
        scalar_blocks += [("theta", i) for i in range(self.S)]
        scalar_blocks += [("rho", k) for k in range(len(self.state.rho))]
        scalar_blocks += [("u", i) for i in range(self.S)]
        p_cov, q_cov = dataset.X.shape[1], dataset.G.shape[1]
        if p_cov:
            scalar_blocks += [("beta_ridge", i) for i in range(self.S)]
        if q_cov:
            scalar_blocks += [("delta_ridge", i) for i in range(self.S)]
        vector_blocks = [("beta", i) for i in range(self.S)]
        vector_blocks += [("delta", i) for i in range(self.S)]
        s0 = config.initial_scale
        self.adapters = {b: ScaleAdapter(s0, TARGET_SCALAR) for b in scalar_blocks}
        self.adapters.update({b: ScaleAdapter(s0, TARGET_VECTOR) for b in vector_blocks})
        self.n_width = np.full(self.S, config.latent_step_width, dtype=np.int64)
        self.acc_counts: dict = {b: [0, 0] for b in list(self.adapters) +
                                 [("N", i) for i in range(self.S)] +
                                 [("N_indep", i) for i in range(self.S)] +
                                 [("beta0_joint", i) for i in range(self.S)]}

    # ---- caches -----------------------------------------------------------

    def _rebuild_caches(self):
        st = self.state
        self.base_lin = st.beta0[:, None] + st.beta @ self.dataset.X.T
        self.lam = np.exp(np.clip(self.base_lin + st.u, -LINPRED_CLAMP, LINPRED_CLAMP))
        self.nb_cache = np.empty((self.S, self.m))
        kernels.negbin_grid(st.N, self.lam, st.theta, self.nb_cache)
        self.p = expit(st.delta0[:, None] + st.delta @ self.dataset.G.T)
        self.sigma = st.sigma()
        self.R = np.zeros((self.S, self.dataset.n_regions), dtype=np.int64)
        for i in range(self.S):
            np.add.at(self.R[i], self.region_index, st.N[i])
        self._rebuild_qf()

    def _rebuild_qf(self):
        """QF[a,b] = phi_a^T L phi_b, so the MICAR kernel is cheap in Sigma."""
        self.QF = np.empty((self.S, self.S))
        for a in range(self.S):
            for b in range(a, self.S):
                v = car.pairwise_quadform(self.state.u[a], self.state.u[b], self.adj)
                self.QF[a, b] = self.QF[b, a] = v

    def _micar_from_qf(self, sigma: np.ndarray) -> float:
        rank = self.m - self.adj.n_components
        sign, logdet = np.linalg.slogdet(sigma)
        return -0.5 * float(np.sum(sigma * self.QF)) + 0.5 * rank * logdet

    def _obs_ll_species(self, i: int, p_row: np.ndarray) -> float:
        ds = self.dataset
        lo, hi = ds.obs_ptr[i, 0], ds.obs_ptr[i, self.m]
        if hi == lo:
            return 0.0
        counts = ds.obs_counts[lo:hi]
        sites = self._obs_sites[lo:hi]
        return float(np.sum(binom_logpmf(counts, self.state.N[i, sites], p_row[sites])))

    @property
    def _obs_sites(self) -> np.ndarray:
        cached = getattr(self, "_obs_sites_arr", None)
        if cached is None:
            ds = self.dataset
            cached = np.empty(ds.n_obs, dtype=np.int64)
            for i in range(self.S):
                for j in range(self.m):
                    cached[ds.obs_ptr[i, j]:ds.obs_ptr[i, j + 1]] = j
            self._obs_sites_arr = cached
        return cached

    def _cull_ll(self, R: np.ndarray) -> float:
        if not self.use_cull:
            return 0.0
        z = self.dataset.culls
        rate = R * self.kappa
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(rate > 0, z * np.log(rate) - rate,
                           np.where(z == 0, 0.0, -np.inf))
        return float(np.sum(val))

    def _init_lp(self, state: ParameterState) -> float:
        from .model import joint_log_posterior
        kappa = self.kappa if self.use_cull else None
        if kappa is None:
            from .model import log_prior, negbin_logpmf, obs_loglik
            lp = log_prior(state, self.priors, self.adj)
            if lp == -math.inf:
                return lp
            lin = np.clip(state.beta0[:, None] + state.beta @ self.dataset.X.T + state.u,
                          -LINPRED_CLAMP, LINPRED_CLAMP)
            nb = float(np.sum(negbin_logpmf(state.N, np.exp(lin), state.theta[:, None])))
            return lp + nb + obs_loglik(state, self.dataset)
        return joint_log_posterior(state, self.dataset, kappa, self.priors,
                                   self.geometry, self.adj)

    def _total_lp(self) -> float:
        return self._init_lp(self.state)

    def _center_u(self):
        """Sum-to-zero identification per connected component."""
        labels = self.adj.component_labels
        for comp in range(self.adj.n_components):
            mask = labels == comp
            self.state.u[:, mask] -= self.state.u[:, mask].mean(axis=1, keepdims=True)

    # ---- prior log-densities per block ------------------------------------

    def _prior_beta0(self, v):
        return float(np.sum(normal_logpdf(v, 0.0, self.priors.normal_sd)))

    def _prior_beta(self, v):
        return float(np.sum(laplace_logpdf(v, self.priors.laplace_location,
                                           self.priors.laplace_scale)))

    def _prior_tau(self, v):
        return float(np.sum(gamma_logpdf(v, self.priors.gamma_shape,
                                         self.priors.gamma_scale)))

    def _prior_theta(self, v):
        return float(np.sum(expon_logpdf(v, self.priors.exp_rate)))

    # ---- block updates -----------------------------------------------------

    def _record(self, block, accepted: bool | float):
        c = self.acc_counts[block]
        c[0] += float(accepted)
        c[1] += 1

    def _accept(self, delta: float) -> bool:
        return math.log(self.rng.uniform()) < delta

    def _update_u(self):
        st = self.state
        normals = self.rng.standard_normal((self.S, self.m))
        logu = np.log(self.rng.uniform(size=(self.S, self.m)))
        scales = np.array([self.adapters[("u", i)].scale for i in range(self.S)])
        accepts = np.zeros(self.S, dtype=np.int64)
        kernels.u_sweep(st.u, self.base_lin, st.N, st.theta, self.sigma,
                        self.adj.indptr, self.adj.indices,
                        self.adj.degrees.astype(np.float64),
                        self.nb_cache, scales, normals, logu, accepts)
        for i in range(self.S):
            self._record(("u", i), accepts[i] / self.m)
        self._center_u()
        self.lam = np.exp(np.clip(self.base_lin + st.u, -LINPRED_CLAMP, LINPRED_CLAMP))
        kernels.negbin_grid(st.N, self.lam, st.theta, self.nb_cache)
        self._rebuild_qf()

    def _abundance_row_delta(self, i: int, base_row_new: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        st = self.state
        lam_new = np.exp(np.clip(base_row_new + st.u[i], -LINPRED_CLAMP, LINPRED_CLAMP))
        nb_new = np.empty((1, self.m))
        kernels.negbin_grid(st.N[i:i + 1], lam_new[None, :], st.theta[i:i + 1], nb_new)
        return float(nb_new.sum() - self.nb_cache[i].sum()), lam_new, nb_new[0]

    def _update_beta0(self, i: int):
        st = self.state
        d = self.adapters[("beta0", i)].scale * self.rng.standard_normal()
        prop = st.beta0[i] + d
        dll, lam_new, nb_new = self._abundance_row_delta(i, self.base_lin[i] + d)
        dprior = float(normal_logpdf(prop, 0, self.priors.normal_sd)
                       - normal_logpdf(st.beta0[i], 0, self.priors.normal_sd))
        ok = self._accept(dll + dprior)
        if ok:
            st.beta0[i] = prop
            self.base_lin[i] += d
            self.lam[i] = lam_new
            self.nb_cache[i] = nb_new
        self._record(("beta0", i), ok)

    def _obs_ll_row(self, i: int, N_row: np.ndarray, p_row: np.ndarray) -> float:
        ds = self.dataset
        lo, hi = ds.obs_ptr[i, 0], ds.obs_ptr[i, self.m]
        if hi == lo:
            return 0.0
        sites = self._obs_sites[lo:hi]
        return float(np.sum(binom_logpmf(ds.obs_counts[lo:hi],
                                         N_row[sites], p_row[sites])))

    def _cull_ll_row(self, i: int, R_row: np.ndarray) -> float:
        if not self.use_cull:
            return 0.0
        z = self.dataset.culls[i]
        rate = R_row * self.kappa[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(rate > 0, z * np.log(rate) - rate,
                           np.where(z == 0, 0.0, -np.inf))
        return float(np.sum(val))

    def _update_beta0_joint(self, i: int):
        """Shift beta0[i] and redraw the species' latent counts together.

        The latent negative-binomial terms cancel against the proposal, so the
        ratio is the intercept prior plus data terms; with sparse data this
        move carries the intercept across shifts the random walk cannot."""
        st = self.state
        d = self.adapters[("beta0", i)].scale * self.rng.standard_normal()
        prop = st.beta0[i] + d
        lam_new = np.exp(np.clip(self.base_lin[i] + d + st.u[i],
                                 -LINPRED_CLAMP, LINPRED_CLAMP))
        th = float(st.theta[i])
        N_new = self.rng.negative_binomial(th, th / (th + lam_new)).astype(np.int64)
        if np.any(N_new < self.max_counts[i]):
            self._record(("beta0_joint", i), False)
            return
        R_new = np.bincount(self.region_index, weights=N_new,
                            minlength=self.dataset.n_regions).astype(np.int64)
        delta = (float(normal_logpdf(prop, 0, self.priors.normal_sd)
                       - normal_logpdf(st.beta0[i], 0, self.priors.normal_sd))
                 + self._obs_ll_row(i, N_new, self.p[i])
                 - self._obs_ll_row(i, st.N[i], self.p[i])
                 + self._cull_ll_row(i, R_new) - self._cull_ll_row(i, self.R[i]))
        ok = self._accept(delta)
        if ok:
            st.beta0[i] = prop
            self.base_lin[i] += d
            self.lam[i] = lam_new
            st.N[i] = N_new
            self.R[i] = R_new
            kernels.negbin_grid(st.N[i:i + 1], lam_new[None, :],
                                st.theta[i:i + 1], self.nb_cache[i:i + 1])
        self._record(("beta0_joint", i), ok)

    def _update_beta(self, i: int):
        st = self.state
        step = self.adapters[("beta", i)].scale * self.rng.standard_normal(st.beta.shape[1])
        prop = st.beta[i] + step
        base_new = st.beta0[i] + self.dataset.X @ prop
        dll, lam_new, nb_new = self._abundance_row_delta(i, base_new)
        dprior = self._prior_beta(prop) - self._prior_beta(st.beta[i])
        ok = self._accept(dll + dprior)
        if ok:
            st.beta[i] = prop
            self.base_lin[i] = base_new
            self.lam[i] = lam_new
            self.nb_cache[i] = nb_new
        self._record(("beta", i), ok)

    def _update_abundance_ridge(self, i: int):
        """Translate (beta0[i], beta[i]) along the compositional flat direction.

        With X rows summing to 1, beta0 + c and beta - c*1 leave the linear
        predictor (almost) unchanged, so the random walk along this ridge is
        driven by the priors; without this move the pair mixes only through
        tiny individual steps."""
        st = self.state
        c = self.adapters[("beta_ridge", i)].scale * self.rng.standard_normal()
        prop0 = st.beta0[i] + c
        prop_vec = st.beta[i] - c
        base_new = prop0 + self.dataset.X @ prop_vec
        dll, lam_new, nb_new = self._abundance_row_delta(i, base_new)
        dprior = (float(normal_logpdf(prop0, 0, self.priors.normal_sd)
                        - normal_logpdf(st.beta0[i], 0, self.priors.normal_sd))
                  + self._prior_beta(prop_vec) - self._prior_beta(st.beta[i]))
        ok = self._accept(dll + dprior)
        if ok:
            st.beta0[i] = prop0
            st.beta[i] = prop_vec
            self.base_lin[i] = base_new
            self.lam[i] = lam_new
            self.nb_cache[i] = nb_new
        self._record(("beta_ridge", i), ok)

    def _update_detection_ridge(self, i: int):
        """Same flat-direction translation for (delta0[i], delta[i])."""
        st = self.state
        c = self.adapters[("delta_ridge", i)].scale * self.rng.standard_normal()
        prop0 = st.delta0[i] + c
        prop_vec = st.delta[i] - c
        p_new = expit(prop0 + self.dataset.G @ prop_vec)
        dll = self._obs_ll_species(i, p_new) - self._obs_ll_species(i, self.p[i])
        dprior = (float(normal_logpdf(prop0, 0, self.priors.normal_sd)
                        - normal_logpdf(st.delta0[i], 0, self.priors.normal_sd))
                  + float(np.sum(normal_logpdf(prop_vec, 0, self.priors.normal_sd))
                          - np.sum(normal_logpdf(st.delta[i], 0, self.priors.normal_sd))))
        ok = self._accept(dll + dprior)
        if ok:
            st.delta0[i] = prop0
            st.delta[i] = prop_vec
            self.p[i] = p_new
        self._record(("delta_ridge", i), ok)

    def _update_detection(self, kind: str, i: int):
        st = self.state
        scale = self.adapters[(kind, i)].scale
        if kind == "delta0":
            prop0 = st.delta0[i] + scale * self.rng.standard_normal()
            prop_vec = st.delta[i]
            dprior = float(normal_logpdf(prop0, 0, self.priors.normal_sd)
                           - normal_logpdf(st.delta0[i], 0, self.priors.normal_sd))
        else:
            prop0 = st.delta0[i]
            prop_vec = st.delta[i] + scale * self.rng.standard_normal(st.delta.shape[1])
            dprior = float(np.sum(normal_logpdf(prop_vec, 0, self.priors.normal_sd))
                           - np.sum(normal_logpdf(st.delta[i], 0, self.priors.normal_sd)))
        p_new = expit(prop0 + self.dataset.G @ prop_vec)
        dll = self._obs_ll_species(i, p_new) - self._obs_ll_species(i, self.p[i])
        ok = self._accept(dll + dprior)
        if ok:
            st.delta0[i] = prop0
            st.delta[i] = prop_vec
            self.p[i] = p_new
        self._record((kind, i), ok)

    def _update_tau(self, i: int):
        st = self.state
        d = self.adapters[("tau", i)].scale * self.rng.standard_normal()
        prop = st.tau[i] * math.exp(d)
        tau_new = st.tau.copy()
        tau_new[i] = prop
        if not car.rho_is_valid(tau_new, st.rho):
            self._record(("tau", i), False)
            return
        sigma_new = car.build_sigma(tau_new, st.rho)
        delta = (self._micar_from_qf(sigma_new) - self._micar_from_qf(self.sigma)
                 + self._prior_tau(prop) - self._prior_tau(st.tau[i])
                 + math.log(prop) - math.log(st.tau[i]))  # log-scale Jacobian
        ok = self._accept(delta)
        if ok:
            st.tau[i] = prop
            self.sigma = sigma_new
        self._record(("tau", i), ok)

    def _update_theta(self, i: int):
        st = self.state
        d = self.adapters[("theta", i)].scale * self.rng.standard_normal()
        prop = st.theta[i] * math.exp(d)
        nb_new = np.empty((1, self.m))
        kernels.negbin_grid(st.N[i:i + 1], self.lam[i][None, :], np.array([prop]), nb_new)
        delta = (float(nb_new.sum() - self.nb_cache[i].sum())
                 + self._prior_theta(prop) - self._prior_theta(st.theta[i])
                 + math.log(prop) - math.log(st.theta[i]))
        ok = self._accept(delta)
        if ok:
            st.theta[i] = prop
            self.nb_cache[i] = nb_new[0]
        self._record(("theta", i), ok)

    def _update_rho(self, k: int):
        st = self.state
        d = self.adapters[("rho", k)].scale * self.rng.standard_normal()
        x_new = math.atanh(st.rho[k]) + d
        rho_new = st.rho.copy()
        rho_new[k] = math.tanh(x_new)
        if not car.rho_is_valid(st.tau, rho_new):
            self._record(("rho", k), False)
            return
        sigma_new = car.build_sigma(st.tau, rho_new)
        # atanh-scale proposal Jacobian: d rho / d x = 1 - rho^2
        delta = (self._micar_from_qf(sigma_new) - self._micar_from_qf(self.sigma)
                 + math.log1p(-rho_new[k] ** 2) - math.log1p(-st.rho[k] ** 2))
        ok = self._accept(delta)
        if ok:
            st.rho[k] = rho_new[k]
            self.sigma = sigma_new
        self._record(("rho", k), ok)

    def _update_N(self, i: int):
        st = self.state
        w = int(self.n_width[i])
        raw = self.rng.integers(0, 2 * w, size=self.m)
        eps = raw - w
        eps[eps >= 0] += 1  # uniform on {-w..-1, 1..w}
        logu = np.log(self.rng.uniform(size=self.m))
        order = self.rng.permutation(self.m)
        acc = kernels.n_sweep_species(
            st.N[i], self.lam[i], st.theta[i], self.p[i],
            self.dataset.obs_ptr[i], self.dataset.obs_counts, self.max_counts[i],
            self.region_index, self.R[i], self.dataset.culls[i], self.kappa[i],
            self.use_cull, self.nb_cache[i], eps, logu, order)
        self._record(("N", i), acc / self.m)
        # independence move from the latent layer: the random walk alone
        # cannot track large shifts in lambda
        th = float(st.theta[i])
        prop = self.rng.negative_binomial(
            th, th / (th + self.lam[i])).astype(np.int64)
        logu2 = np.log(self.rng.uniform(size=self.m))
        order2 = self.rng.permutation(self.m)
        acc2 = kernels.n_indep_sweep_species(
            st.N[i], prop, self.lam[i], st.theta[i], self.p[i],
            self.dataset.obs_ptr[i], self.dataset.obs_counts, self.max_counts[i],
            self.region_index, self.R[i], self.dataset.culls[i], self.kappa[i],
            self.use_cull, self.nb_cache[i], logu2, order2)
        self._record(("N_indep", i), acc2 / self.m)

    # ---- main loop ---------------------------------------------------------

    def sweep(self):
        if "u" in self.blocks:
            self._update_u()
        for i in range(self.S):
            if "beta0" in self.blocks:
                self._update_beta0(i)
                if "N" in self.blocks:
                    self._update_beta0_joint(i)
            if "beta" in self.blocks and self.state.beta.shape[1]:
                self._update_beta(i)
                if "beta0" in self.blocks:
                    self._update_abundance_ridge(i)
        for i in range(self.S):
            if "delta0" in self.blocks:
                self._update_detection("delta0", i)
            if "delta" in self.blocks and self.state.delta.shape[1]:
                self._update_detection("delta", i)
                if "delta0" in self.blocks:
                    self._update_detection_ridge(i)
        if "tau" in self.blocks:
            for i in range(self.S):
                self._update_tau(i)
        if "theta" in self.blocks:
            for i in range(self.S):
                self._update_theta(i)
        if "rho" in self.blocks:
            for k in range(len(self.state.rho)):
                self._update_rho(k)
        if "N" in self.blocks:
            for i in range(self.S):
                self._update_N(i)

    def _adapt(self, iteration: int):
        cfg = self.config
        if not cfg.adapt or iteration > cfg.n_burnin:
            return
        if iteration % cfg.adapt_window:
            return
        for block, adapter in self.adapters.items():
            acc, tot = self.acc_counts[block]
            if tot:
                adapter.update(acc / tot)
            self.acc_counts[block] = [0, 0]
        for i in range(self.S):
            acc, tot = self.acc_counts[("N", i)]
            if tot:
                rate = acc / tot
                if rate < 0.1:
                    self.n_width[i] = max(1, self.n_width[i] // 2)
                elif rate > 0.6:
                    self.n_width[i] += max(1, self.n_width[i] // 2)
            self.acc_counts[("N", i)] = [0, 0]

    def run(self) -> dict[str, np.ndarray]:
        cfg = self.config
        kept = cfg.n_retained
        S, m = self.S, self.m
        out = {
            "beta0": np.empty((kept, S)),
            "beta": np.empty((kept, S, self.state.beta.shape[1])),
            "delta0": np.empty((kept, S)),
            "delta": np.empty((kept, S, self.state.delta.shape[1])),
            "tau": np.empty((kept, S)),
            "theta": np.empty((kept, S)),
            "rho": np.empty((kept, len(self.state.rho))),
            "u": np.empty((kept, S, m)),
            "N": np.empty((kept, S, m), dtype=np.int64),
        }
        idx = 0
        for it in range(1, cfg.n_iterations + 1):
            self.sweep()
            self._adapt(it)
            if it == cfg.n_burnin:
                for adapter in self.adapters.values():
                    adapter.frozen = True
                for b in self.acc_counts:
                    self.acc_counts[b] = [0, 0]
            if it > cfg.n_burnin and (it - cfg.n_burnin) % cfg.thin == 0:
                st = self.state
                for name in ("beta0", "beta", "delta0", "delta", "tau",
                             "theta", "rho", "u", "N"):
                    out[name][idx] = getattr(st, name)
                idx += 1
        assert idx == kept
        return out

    def acceptance_rates(self) -> dict[str, float]:
        rates = {}
        for block, (acc, tot) in self.acc_counts.items():
            if tot:
                rates["/".join(str(b) for b in block)] = acc / tot
        return rates


def run_chain(dataset: SpeciesDataset, kappa: np.ndarray | None,
              priors: PriorConfig, geometry: GridGeometry, adj: Adjacency,
              config: SamplerConfig, chain_id: int, scenario_id: int = 0,
              init_state: ParameterState | None = None
              ) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """One chain: (retained draws, post-burn-in acceptance rates)."""
    rng = chain_rng(config.seed, scenario_id, chain_id)
    runner = _ChainRunner(dataset, kappa, priors, geometry, adj, config, rng,
                          init_state=init_state)
    draws = runner.run()
    return draws, runner.acceptance_rates()


def fit_model(dataset: SpeciesDataset, kappa: np.ndarray | None,
              priors: PriorConfig, geometry: GridGeometry, adj: Adjacency,
              config: SamplerConfig, scenario_id: int = 0,
              init_state: ParameterState | None = None) -> PosteriorSamples:
    """Run all chains for one cull scenario and stack the retained draws."""
    per_chain = []
    acc = {}
    for c in range(config.n_chains):
        draws, rates = run_chain(dataset, kappa, priors, geometry, adj, config,
                                 chain_id=c, scenario_id=scenario_id,
                                 init_state=init_state)
        per_chain.append(draws)
        acc[f"chain{c}"] = rates
    stacked = {name: np.stack([d[name] for d in per_chain])
               for name in per_chain[0]}
    meta = {"scenario_id": scenario_id, "seed": config.seed,
            "n_iterations": config.n_iterations, "n_burnin": config.n_burnin,
            "thin": config.thin, "acceptance": acc}
    return PosteriorSamples(draws=stacked, meta=meta)


# ---- diagnostics ------------------------------------------------------------

def split_rhat(series: np.ndarray) -> tuple[float, bool]:
    """Split-R-hat for one scalar parameter, series shaped (n_chains, n_draws).

    Returns (rhat, degenerate); zero-variance input reports 1.0 degenerate.
    """
    nc, nd = series.shape
    half = nd // 2
    splits = np.concatenate([series[:, :half], series[:, half:2 * half]], axis=0)
    means = splits.mean(axis=1)
    variances = splits.var(axis=1, ddof=1)
    W = variances.mean()
    if W <= 1e-300:
        return 1.0, True
    B = half * means.var(ddof=1)
    var_plus = (half - 1) / half * W + B / half
    return float(math.sqrt(var_plus / W)), False


def ess(series: np.ndarray) -> float:
    """Effective sample size via chain-averaged autocorrelations
    (initial monotone positive-pair truncation)."""
    nc, nd = series.shape
    if nd < 4:
        return float(nc * nd)
    means = series.mean(axis=1)
    W = series.var(axis=1, ddof=1).mean()
    if W <= 1e-300:
        return float(nc * nd)
    B = nd * means.var(ddof=1) if nc > 1 else 0.0
    var_plus = (nd - 1) / nd * W + B / nd
    # chain-averaged autocovariances via FFT
    acov = np.zeros(nd)
    for c in range(nc):
        x = series[c] - series[c].mean()
        n_fft = 2 ** int(math.ceil(math.log2(2 * nd)))
        f = np.fft.rfft(x, n_fft)
        ac = np.fft.irfft(f * np.conj(f), n_fft)[:nd].real / nd
        acov += ac
    acov /= nc
    rho = 1.0 - (W - acov) / var_plus
    # Geyer initial positive sequence on paired sums
    tail = 0.0
    t = 1
    while t + 1 < nd:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tail += pair
        t += 2
    return float(nc * nd / (1.0 + 2.0 * tail))


def diagnostics(samples: PosteriorSamples,
                extra: dict[str, np.ndarray] | None = None) -> dict[str, dict]:
    """Split-R-hat and ESS per scalar parameter; flags R-hat > 1.05."""
    views = scalar_views(samples)
    if extra:
        views.update(extra)
    report = {}
    for name, series in views.items():
        rhat, degen = split_rhat(series)
        report[name] = {"rhat": rhat, "ess": ess(series),
                        "degenerate": degen, "flagged": rhat > 1.05}
    return report


def equal_tail_interval(draws: np.ndarray) -> tuple[float, float, float]:
    """(median, 2.5%, 97.5%) with numpy's default (type-7) quantile rule."""
    lo, med, hi = np.quantile(draws, [0.025, 0.5, 0.975])
    return float(med), float(lo), float(hi)


def summarize(samples: PosteriorSamples, geometry: GridGeometry | None = None,
              derived: tuple[str, ...] = ("totals", "correlations")) -> list[dict]:
    """Median and equal-tailed 95% interval per scalar quantity.

    Derived quantities are computed per draw first (e.g. totals are per-draw
    sums over sites) and the quantiles taken afterwards.
    """
    rows = []
    for name, series in scalar_views(samples).items():
        med, lo, hi = equal_tail_interval(series.ravel())
        rows.append({"name": name, "median": med, "lo95": lo, "hi95": hi})
    if "totals" in derived:
        totals = samples.species_totals()
        for i in range(totals.shape[-1]):
            med, lo, hi = equal_tail_interval(totals[..., i].ravel())
            rows.append({"name": f"total[{i}]", "median": med, "lo95": lo, "hi95": hi})
    if "regional" in derived and geometry is not None:
        reg = samples.regional_totals(geometry.region_index(), geometry.n_regions)
        for i in range(reg.shape[2]):
            for k in range(reg.shape[3]):
                med, lo, hi = equal_tail_interval(reg[:, :, i, k].ravel())
                rows.append({"name": f"regional[{i},{k}]",
                             "median": med, "lo95": lo, "hi95": hi})
    if "correlations" in derived and samples.draws["tau"].shape[-1] > 1:
        corr = samples.correlations()
        for k in range(corr.shape[-1]):
            med, lo, hi = equal_tail_interval(corr[..., k].ravel())
            rows.append({"name": f"correlation[{k}]", "median": med,
                         "lo95": lo, "hi95": hi})
    return rows
