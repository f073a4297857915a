"""Cull-percentage elicitation bands, scenario sampling, and posterior pooling.

Cull rates cannot be estimated jointly with detection, so each fit conditions
on one complete draw of regional cull percentages; pooling the per-scenario
posteriors approximately marginalizes the cull rates.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from .geometry import Adjacency, GridGeometry
from .mcmc import PosteriorSamples, SamplerConfig, fit_model, equal_tail_interval
from .model import PriorConfig, SpeciesDataset

log = logging.getLogger(__name__)

DEFAULT_BANDS = {
    "Low": {"mean": 10.0, "sd": 2.55, "lo": 5.0, "hi": 15.0},
    "Mid": {"mean": 15.0, "sd": 2.55, "lo": 10.0, "hi": 20.0},
    "High": {"mean": 25.0, "sd": 2.55, "lo": 20.0, "hi": 30.0},
}


@dataclass(frozen=True)
class CullBand:
    """Elicited cull-percentage band: truncated normal on the percent scale."""

    name: str
    mean_percent: float
    sd_percent: float
    lo_percent: float
    hi_percent: float

    def __post_init__(self):
        if not (0.0 < self.lo_percent < self.mean_percent < self.hi_percent < 100.0):
            raise ValueError(f"band {self.name}: need 0 < lo < mean < hi < 100")
        if self.sd_percent <= 0:
            raise ValueError(f"band {self.name}: sd must be > 0")

    def sample(self, size, rng: np.random.Generator, truncate: bool = True) -> np.ndarray:
        """Draw cull proportions (percent / 100)."""
        if truncate:
            a = (self.lo_percent - self.mean_percent) / self.sd_percent
            b = (self.hi_percent - self.mean_percent) / self.sd_percent
            pct = truncnorm.rvs(a, b, loc=self.mean_percent, scale=self.sd_percent,
                                size=size, random_state=rng)
        else:
            pct = rng.normal(self.mean_percent, self.sd_percent, size=size)
        return np.asarray(pct) / 100.0


def default_bands() -> dict[str, CullBand]:
    return {name: CullBand(name, d["mean"], d["sd"], d["lo"], d["hi"])
            for name, d in DEFAULT_BANDS.items()}


@dataclass(frozen=True)
class BandAssignment:
    """Band name for every (species, region) cell, shape (S, r)."""

    names: np.ndarray  # (S, r) of band-name strings

    @classmethod
    def uniform(cls, n_species: int, n_regions: int, band: str = "Mid") -> "BandAssignment":
        return cls(names=np.full((n_species, n_regions), band, dtype=object))

    def validate(self, bands: dict[str, CullBand]) -> None:
        unknown = {n for n in self.names.ravel() if n not in bands}
        if unknown:
            raise ValueError(f"assignment references unknown bands {sorted(unknown)}")


@dataclass(frozen=True)
class CullScenario:
    """One complete draw of cull proportions for every (species, region) cell."""

    scenario_id: int
    kappa: np.ndarray  # (S, r), proportions in (0, 1)

    def __post_init__(self):
        if np.any(self.kappa <= 0) or np.any(self.kappa >= 1):
            raise ValueError("kappa entries must lie strictly in (0, 1)")


def sample_scenarios(assignment: BandAssignment, bands: dict[str, CullBand],
                     n_scenarios: int, seed: int,
                     truncate: bool = True) -> list[CullScenario]:
    """Draw cull scenarios from the assigned bands, deterministic by seed.

    Scenario s uses its own derived stream, so extending n_scenarios never
    perturbs earlier scenarios.
    """
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be >= 1")
    assignment.validate(bands)
    S, r = assignment.names.shape
    out = []
    for s in range(n_scenarios):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, s)))
        kappa = np.empty((S, r))
        for i in range(S):
            for k in range(r):
                kappa[i, k] = bands[assignment.names[i, k]].sample(None, rng,
                                                                   truncate=truncate)
        out.append(CullScenario(scenario_id=s, kappa=kappa))
    return out


def mean_scenario(assignment: BandAssignment, bands: dict[str, CullBand]) -> CullScenario:
    """Deterministic scenario at every band's mean (scenario_id -1)."""
    assignment.validate(bands)
    S, r = assignment.names.shape
    kappa = np.empty((S, r))
    for i in range(S):
        for k in range(r):
            kappa[i, k] = bands[assignment.names[i, k]].mean_percent / 100.0
    return CullScenario(scenario_id=-1, kappa=kappa)


def _fit_one(args):
    dataset, scenario, priors, geometry, adj, config = args
    samples = fit_model(dataset, scenario.kappa, priors, geometry, adj, config,
                        scenario_id=scenario.scenario_id)
    return scenario.scenario_id, samples


def fit_scenarios(dataset: SpeciesDataset, scenarios: list[CullScenario],
                  priors: PriorConfig, geometry: GridGeometry, adj: Adjacency,
                  config: SamplerConfig, n_workers: int = 1,
                  on_result=None) -> tuple[dict[int, PosteriorSamples], list[int]]:
    """Fit every scenario; returns (results keyed by scenario id, failed ids).

    A failing scenario never aborts the rest. `on_result(scenario_id, samples)`
    persists each fit as it completes.
    """
    if not scenarios:
        raise ValueError("need at least one scenario")
    results: dict[int, PosteriorSamples] = {}
    failed: list[int] = []
    jobs = [(dataset, sc, priors, geometry, adj, config) for sc in scenarios]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for (sid, samples) in pool.map(_fit_one, jobs):
                results[sid] = samples
                if on_result:
                    on_result(sid, samples)
    else:
        for job in jobs:
            sid = job[1].scenario_id
            try:
                _, samples = _fit_one(job)
            except Exception:
                log.exception("scenario %d fit failed", sid)
                failed.append(sid)
                continue
            results[sid] = samples
            if on_result:
                on_result(sid, samples)
    return results, failed


def pool_samples(per_scenario: list[PosteriorSamples],
                 allow_partial_meta: bool = False) -> PosteriorSamples:
    """Concatenate retained draws across scenarios with equal weight per draw.

    The pooled object has a single chain axis; scenario attribution is kept
    in meta['scenario_per_draw'].
    """
    if not per_scenario:
        raise ValueError("nothing to pool")
    names = set(per_scenario[0].draws)
    for ps in per_scenario[1:]:
        if set(ps.draws) != names:
            raise ValueError("parameter sets differ across scenario fits")
        for n in names:
            if ps.draws[n].shape[2:] != per_scenario[0].draws[n].shape[2:]:
                raise ValueError(f"shape mismatch for {n}")
    pooled = {n: np.concatenate([ps.flat(n) for ps in per_scenario])[None, ...]
              for n in names}
    scenario_per_draw = np.concatenate([
        np.full(ps.n_chains * ps.n_kept, ps.meta.get("scenario_id", -1))
        for ps in per_scenario])
    meta = {"pooled": True, "n_scenarios": len(per_scenario),
            "scenario_per_draw": scenario_per_draw,
            "partial": allow_partial_meta}
    return PosteriorSamples(draws=pooled, meta=meta)


def total_intervals(samples: PosteriorSamples) -> list[dict]:
    totals = samples.species_totals()
    rows = []
    for i in range(totals.shape[-1]):
        med, lo, hi = equal_tail_interval(totals[..., i].ravel())
        rows.append({"species": i, "median": med, "lo95": lo, "hi95": hi,
                     "width": hi - lo})
    return rows


def sensitivity_sweep(dataset: SpeciesDataset, configurations: dict[str, list[CullScenario]],
                      priors: PriorConfig, geometry: GridGeometry, adj: Adjacency,
                      config: SamplerConfig, n_workers: int = 1) -> list[dict]:
    """Fit each named scenario set, pool it, and tabulate species-total intervals.

    Configurations map a label to its scenario list (a single mean scenario,
    an altered-band variant, or a scenario-count sweep entry).
    """
    if len(configurations) < 2:
        raise ValueError("need at least 2 configurations to compare")
    rows = []
    for label, scenario_list in configurations.items():
        results, failed = fit_scenarios(dataset, scenario_list, priors, geometry,
                                        adj, config, n_workers=n_workers)
        if failed:
            log.warning("configuration %s: scenarios %s failed", label, failed)
        pooled = pool_samples([results[k] for k in sorted(results)])
        for row in total_intervals(pooled):
            rows.append({"configuration": label, **row})
    return rows
