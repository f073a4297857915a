import json

import numpy as np
import pytest

from misnmix import io as mio
from misnmix.cli import main
from misnmix.mcmc import SamplerConfig, fit_model
from misnmix.model import PriorConfig
from misnmix.simgen import SimConfig, simulate_dataset


@pytest.fixture(scope="module")
def tiny_sim():
    cfg = SimConfig(lattice_side=3, n_regions=2, n_species=2, visits=2,
                    p_covariates=2, q_covariates=2, retention_levels=(100,))
    return simulate_dataset(cfg, seed=4)


@pytest.fixture()
def dataset_dir(tiny_sim, tmp_path):
    grid, adj, dataset, truth = tiny_sim
    mio.save_dataset(tmp_path / "data", grid, adj, dataset)
    return tmp_path / "data"


def _run_config(dataset_dir, tmp_path, **sampler_overrides):
    sampler = {"n_iterations": 120, "n_burnin": 60, "thin": 3,
               "n_chains": 2, "seed": 7}
    sampler.update(sampler_overrides)
    cfg = {"grid": str(dataset_dir / "grid.csv"),
           "observations": str(dataset_dir / "observations.csv"),
           "culls": str(dataset_dir / "culls.csv"),
           "covariates_x": str(dataset_dir / "covariates_x.csv"),
           "covariates_g": str(dataset_dir / "covariates_g.csv"),
           "edges": str(dataset_dir / "edges.csv"),
           "sampler": sampler}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_float_rendering_round_trips():
    x = 0.1 + 0.2  # not representable; 17 significant digits recover the bits
    assert float(mio.fmt(x)) == x
    assert mio.fmt(3) == "3"
    assert mio.fmt(np.int64(3)) == "3"


def test_dataset_round_trip_exact(tiny_sim, dataset_dir):
    grid, adj, dataset, truth = tiny_sim
    g2, a2, d2 = mio.load_dataset(
        dataset_dir / "grid.csv", dataset_dir / "observations.csv",
        dataset_dir / "culls.csv", dataset_dir / "covariates_x.csv",
        dataset_dir / "covariates_g.csv", edges_path=dataset_dir / "edges.csv")
    assert np.array_equal(g2.site_region, grid.site_region)
    assert np.array_equal(g2.centroids, grid.centroids)
    assert np.array_equal(a2.indices, adj.indices)
    assert np.array_equal(d2.obs_ptr, dataset.obs_ptr)
    assert np.array_equal(d2.obs_counts, dataset.obs_counts)
    assert np.array_equal(d2.culls, dataset.culls)
    assert np.array_equal(d2.X, dataset.X)   # bit-exact via 17-digit rendering
    assert np.array_equal(d2.G, dataset.G)


def test_load_errors_carry_location(dataset_dir, tmp_path):
    obs = tmp_path / "bad_obs.csv"
    obs.write_text("species,site_id,visit,count\n0,99,0,1\n")
    with pytest.raises(mio.LoadError, match=r"bad_obs\.csv:2.*unknown site_id"):
        mio.load_dataset(dataset_dir / "grid.csv", obs,
                         dataset_dir / "culls.csv",
                         dataset_dir / "covariates_x.csv",
                         dataset_dir / "covariates_g.csv")
    bad_header = tmp_path / "h.csv"
    bad_header.write_text("a,b\n")
    with pytest.raises(mio.LoadError, match="expected header"):
        mio.load_grid(bad_header)


def test_covariate_validation(dataset_dir, tmp_path):
    cov = tmp_path / "cov.csv"
    cov.write_text("site_id,X1,X2\n" +
                   "\n".join(f"{j},0.9,0.3" for j in range(9)) + "\n")
    with pytest.raises(mio.LoadError, match="sums to"):
        mio.load_dataset(dataset_dir / "grid.csv",
                         dataset_dir / "observations.csv",
                         dataset_dir / "culls.csv", cov,
                         dataset_dir / "covariates_g.csv")


def test_samples_round_trip_exact(tiny_sim, tmp_path):
    grid, adj, dataset, truth = tiny_sim
    sampler = SamplerConfig(n_iterations=60, n_burnin=30, thin=3,
                            n_chains=2, seed=1)
    samples = fit_model(dataset, truth.kappa, PriorConfig(), grid, adj, sampler)
    mio.save_samples(tmp_path / "fit", samples)
    back = mio.load_samples(tmp_path / "fit")
    for name in samples.draws:
        assert np.array_equal(back.draws[name].astype(samples.draws[name].dtype),
                              samples.draws[name]), name


def test_manifest_detects_tampering(dataset_dir):
    files = sorted(dataset_dir.glob("*.csv"))
    mio.write_manifest(dataset_dir, files)
    assert mio.verify_manifest(dataset_dir) == []
    target = dataset_dir / "culls.csv"
    target.write_text(target.read_text() + "0,0,999\n")
    assert mio.verify_manifest(dataset_dir) == ["culls.csv"]


def test_run_config_requires_seed(dataset_dir, tmp_path):
    cfg = {"grid": str(dataset_dir / "grid.csv"),
           "observations": str(dataset_dir / "observations.csv"),
           "culls": str(dataset_dir / "culls.csv"),
           "covariates_x": str(dataset_dir / "covariates_x.csv"),
           "covariates_g": str(dataset_dir / "covariates_g.csv"),
           "sampler": {"n_iterations": 10, "n_burnin": 5}}
    path = tmp_path / "noseed.json"
    path.write_text(json.dumps(cfg))
    with pytest.raises(ValueError, match="seed"):
        mio.RunConfig.from_json(path)


def test_cli_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["fit"])  # missing required flags
    assert exc.value.code == 2


def test_cli_missing_config_is_task_failure(tmp_path):
    assert main(["fit", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o")]) == 1


def test_cli_full_pipeline(dataset_dir, tmp_path, capsys):
    run = _run_config(dataset_dir, tmp_path)
    fit_dir = tmp_path / "fit"
    assert main(["fit", "--config", str(run), "--out", str(fit_dir)]) == 0
    assert (fit_dir / "manifest.json").exists()

    summ = tmp_path / "summary"
    assert main(["summarize", "--fit", str(fit_dir), "--out", str(summ)]) == 0
    header = (summ / "county_estimates.csv").read_text().splitlines()[0]
    assert header == "region,species,median,lo95,hi95"

    diag = tmp_path / "diag.csv"
    assert main(["diagnose", "--fit", str(fit_dir), "--out", str(diag)]) == 0
    assert diag.read_text().startswith("name,rhat,ess")

    # tampering with a persisted chain must fail summarize
    chain = fit_dir / "chain0.csv"
    chain.write_text(chain.read_text() + "#\n")
    assert main(["summarize", "--fit", str(fit_dir),
                 "--out", str(tmp_path / "s2")]) == 1


def test_cli_fit_scenarios_and_pooled_summary(dataset_dir, tmp_path):
    run = _run_config(dataset_dir, tmp_path, n_chains=1)
    out = tmp_path / "scen"
    assert main(["fit-scenarios", "--config", str(run), "--n-scenarios", "3",
                 "--out", str(out)]) == 0
    pooled = mio.load_samples(out)
    assert pooled.n_kept == 3 * 20
    assert (out / "scenario_kappa.csv").exists()
    assert main(["summarize", "--fit", str(out), "--pooled",
                 "--out", str(tmp_path / "psumm")]) == 0


def test_cli_simulate_deterministic(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"lattice_side": 3, "n_regions": 2,
                               "n_species": 2, "visits": 2,
                               "p_covariates": 2, "q_covariates": 2,
                               "retention_levels": [100]}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg), "--seed", "5",
                 "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(cfg), "--seed", "5",
                 "--out", str(b)]) == 0
    for name in ("grid.csv", "observations.csv", "culls.csv", "truth.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
