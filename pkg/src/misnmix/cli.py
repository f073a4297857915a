"""Command-line interface.

Subcommands: simulate | fit | fit-scenarios | summarize | evaluate | diagnose.
Exit codes: 0 success, 1 task failure, 2 usage error. All randomness comes
from explicit seeds in config files or flags, never from the environment.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .geometry import GridGeometry
from .mcmc import SamplerConfig, diagnostics, fit_model, summarize
from .model import PriorConfig
from .scenarios import (BandAssignment, CullBand, default_bands, fit_scenarios,
                        mean_scenario, pool_samples, sample_scenarios,
                        total_intervals)
from .simgen import SimConfig, run_study, simulate_dataset

log = logging.getLogger(__name__)


def _bands_from_config(raw: dict) -> dict[str, CullBand]:
    if not raw:
        return default_bands()
    return {name: CullBand(name, d["mean"], d["sd"], d["lo"], d["hi"])
            for name, d in raw.items()}


def _assignment_from_config(raw: list, n_species: int,
                            region_ids: np.ndarray) -> BandAssignment:
    if not raw:
        return BandAssignment.uniform(n_species, len(region_ids))
    lut = {int(r): i for i, r in enumerate(region_ids)}
    names = np.full((n_species, len(region_ids)), "", dtype=object)
    for entry in raw:
        names[int(entry["species"]), lut[int(entry["region_id"])]] = entry["band"]
    if (names == "").any():
        raise ValueError("band assignment does not cover every (species, region)")
    return BandAssignment(names=names)


def _load_run(config_path):
    cfg = mio.RunConfig.from_json(config_path)
    grid, adj, dataset = mio.load_dataset(cfg.grid, cfg.observations, cfg.culls,
                                          cfg.covariates_x, cfg.covariates_g,
                                          edges_path=cfg.edges)
    return cfg, grid, adj, dataset


def _geometry_meta(grid: GridGeometry) -> dict:
    return {"site_region": grid.site_region.tolist(),
            "region_ids": grid.region_ids.tolist()}


def _write_fit(outdir, samples, grid, config_path, cfg, extra_files=()):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    samples.meta.update(_geometry_meta(grid))
    files = mio.save_samples(outdir, samples, gzip_output=cfg.gzip_samples)
    files.extend(extra_files)
    mio.write_manifest(outdir, files, config_hash=mio.config_hash(config_path))


def cmd_simulate(args) -> int:
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        if "retention_levels" in raw:
            raw["retention_levels"] = tuple(raw["retention_levels"])
        sim = SimConfig(**raw)
    else:
        sim = SimConfig()
    grid, adj, dataset, truth = simulate_dataset(sim, args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    files = mio.save_dataset(outdir, grid, adj, dataset)
    truth_path = outdir / "truth.json"
    with open(truth_path, "w") as fh:
        json.dump(mio._jsonable({f.name: getattr(truth, f.name)
                                 for f in dataclasses.fields(truth)}),
                  fh, indent=2, sort_keys=True)
    files.append(truth_path)
    mio.write_manifest(outdir, files,
                       config_hash=mio.config_hash(args.config) if args.config else "")
    print(f"wrote {dataset.n_obs} observations over {grid.n_sites} sites to {outdir}")
    return 0


def _resolve_kappa(cfg, grid, dataset):
    """Fixed cull proportions for a single fit: explicit file, else band means,
    else no cull likelihood at all."""
    if cfg.kappa_file:
        return mio.load_kappa(cfg.kappa_file, dataset.n_species, grid.region_ids)
    if cfg.bands or cfg.assignment:
        bands = _bands_from_config(cfg.bands)
        assignment = _assignment_from_config(cfg.assignment, dataset.n_species,
                                             grid.region_ids)
        return mean_scenario(assignment, bands).kappa
    return None


def cmd_fit(args) -> int:
    cfg, grid, adj, dataset = _load_run(args.config)
    kappa = _resolve_kappa(cfg, grid, dataset)
    if kappa is None:
        log.warning("no cull proportions configured; fitting without cull data")
    samples = fit_model(dataset, kappa, cfg.priors, grid, adj, cfg.sampler)
    _write_fit(args.out, samples, grid, args.config, cfg)
    print(f"fit complete: {samples.n_chains} chains x {samples.n_kept} retained draws")
    return 0


def cmd_fit_scenarios(args) -> int:
    cfg, grid, adj, dataset = _load_run(args.config)
    bands = _bands_from_config(cfg.bands)
    assignment = _assignment_from_config(cfg.assignment, dataset.n_species,
                                         grid.region_ids)
    seed = args.seed if args.seed is not None else cfg.sampler.seed
    scenarios = sample_scenarios(assignment, bands, args.n_scenarios, seed)
    results, failed = fit_scenarios(dataset, scenarios, cfg.priors, grid, adj,
                                    cfg.sampler, n_workers=cfg.n_workers)
    if failed and not args.allow_partial:
        print(f"error: scenarios {failed} failed; rerun with --allow-partial "
              "to pool the rest", file=sys.stderr)
        return 1
    if not results:
        print("error: every scenario failed", file=sys.stderr)
        return 1
    pooled = pool_samples([results[s.scenario_id] for s in scenarios
                           if s.scenario_id in results],
                          allow_partial_meta=bool(failed))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    kappa_rows = ((s.scenario_id, i, grid.region_ids[k], s.kappa[i, k])
                  for s in scenarios
                  for i in range(dataset.n_species)
                  for k in range(dataset.n_regions))
    kfile = mio.write_csv(outdir / "scenario_kappa.csv",
                          ["scenario_id", "species", "region_id", "kappa"],
                          kappa_rows)
    _write_fit(outdir, pooled, grid, args.config, cfg, extra_files=[kfile])
    print(f"pooled {len(results)} scenarios ({len(failed)} failed) "
          f"-> {pooled.n_kept} draws")
    return 0


def cmd_summarize(args) -> int:
    indir = Path(args.fit)
    if args.pooled and (indir / "pooled").is_dir():
        indir = indir / "pooled"
    bad = mio.verify_manifest(indir)
    if bad:
        print(f"error: fit directory fails checksum verification: {bad}",
              file=sys.stderr)
        return 1
    samples = mio.load_samples(indir)
    meta = samples.meta
    if "site_region" not in meta:
        print("error: fit metadata lacks geometry; cannot map sites to regions",
              file=sys.stderr)
        return 1
    site_region = np.asarray(meta["site_region"], dtype=np.int64)
    region_ids = np.asarray(meta["region_ids"], dtype=np.int64)
    lut = {int(r): i for i, r in enumerate(region_ids)}
    region_index = np.array([lut[int(r)] for r in site_region], dtype=np.int64)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    reg = samples.regional_totals(region_index, len(region_ids))
    county_rows = []
    from .mcmc import equal_tail_interval
    for k, rid in enumerate(region_ids):
        for i in range(reg.shape[2]):
            med, lo, hi = equal_tail_interval(reg[:, :, i, k].ravel())
            county_rows.append((int(rid), i, med, lo, hi))
    files = [mio.write_csv(outdir / "county_estimates.csv",
                           ["region", "species", "median", "lo95", "hi95"],
                           county_rows)]
    files.append(mio.write_csv(outdir / "totals.csv",
                               ["species", "median", "lo95", "hi95", "width"],
                               (tuple(r.values()) for r in total_intervals(samples))))
    rows = summarize(samples)
    files.append(mio.write_csv(outdir / "parameters.csv",
                               ["name", "median", "lo95", "hi95"],
                               ((r["name"], r["median"], r["lo95"], r["hi95"])
                                for r in rows)))
    mio.write_manifest(outdir, files)
    print(f"wrote county_estimates.csv, totals.csv, parameters.csv to {outdir}")
    return 0


def cmd_evaluate(args) -> int:
    with open(args.config) as fh:
        raw = json.load(fh)
    sim_raw = raw.get("sim", {})
    if "retention_levels" in sim_raw:
        sim_raw["retention_levels"] = tuple(sim_raw["retention_levels"])
    sim = SimConfig(**sim_raw)
    sampler = SamplerConfig(**raw["sampler"])
    priors = PriorConfig(**raw.get("priors", {}))
    n_datasets = int(raw.get("n_datasets", 1))
    result = run_study(sim, n_datasets, sampler, priors, seed=args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    files = []

    def dump(name, rows):
        if not rows:
            return
        header = list(rows[0])
        files.append(mio.write_csv(outdir / name, header,
                                   (tuple(r[h] for h in header) for r in rows)))

    dump("rmse.csv", result.rmse_rows)
    dump("coverage.csv", result.coverage_rows)
    dump("totals.csv", result.totals_rows)
    dump("correlations.csv", result.correlation_rows)
    dump("failures.csv", result.failures)
    mio.write_manifest(outdir, files, config_hash=mio.config_hash(args.config))
    if result.failures:
        print(f"{len(result.failures)} cell(s) failed; see failures.csv",
              file=sys.stderr)
        return 1
    print(f"evaluation complete: {len(result.rmse_rows)} fitted cells")
    return 0


def cmd_diagnose(args) -> int:
    samples = mio.load_samples(args.fit)
    report = diagnostics(samples)
    rows = ((name, d["rhat"], d["ess"], d["degenerate"], d["flagged"])
            for name, d in sorted(report.items()))
    mio.write_csv(args.out, ["name", "rhat", "ess", "degenerate", "flagged"], rows)
    n_flagged = sum(d["flagged"] for d in report.values())
    print(f"{len(report)} parameters, {n_flagged} flagged (split R-hat > 1.05)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="misnmix",
        description="Joint-species abundance models from misaligned count "
                    "and cull data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON with simulation settings (optional)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the model with fixed cull proportions")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-scenarios",
                       help="fit under sampled cull scenarios and pool draws")
    p.add_argument("--config", required=True)
    p.add_argument("--n-scenarios", type=int, required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="scenario-sampling seed (defaults to sampler seed)")
    p.add_argument("--allow-partial", action="store_true",
                   help="pool whatever scenarios succeeded")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_scenarios)

    p = sub.add_parser("summarize", help="posterior summaries from a fit directory")
    p.add_argument("--fit", required=True)
    p.add_argument("--pooled", action="store_true",
                   help="summarize the pooled scenario draws")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("evaluate", help="run the data-retention simulation study")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="convergence diagnostics for a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
