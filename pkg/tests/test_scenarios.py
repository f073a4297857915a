import numpy as np
import pytest
from scipy import stats

from misnmix.mcmc import PosteriorSamples
from misnmix.scenarios import (BandAssignment, CullBand, CullScenario,
                               default_bands, mean_scenario, pool_samples,
                               sample_scenarios, total_intervals)


def test_default_bands_values():
    bands = default_bands()
    assert set(bands) == {"Low", "Mid", "High"}
    assert bands["Low"].mean_percent == 10.0
    assert bands["Mid"].lo_percent == 10.0 and bands["Mid"].hi_percent == 20.0
    assert bands["High"].mean_percent == 25.0
    assert all(b.sd_percent == 2.55 for b in bands.values())


def test_band_validation():
    with pytest.raises(ValueError):
        CullBand("bad", 5.0, 2.0, 10.0, 20.0)   # mean below lo
    with pytest.raises(ValueError):
        CullBand("bad", 15.0, 0.0, 10.0, 20.0)  # sd must be positive


def test_band_sampling_truncated_moments():
    band = default_bands()["Mid"]
    rng = np.random.default_rng(0)
    draws = band.sample(50_000, rng)
    assert draws.min() >= band.lo_percent / 100.0
    assert draws.max() <= band.hi_percent / 100.0
    a = (band.lo_percent - band.mean_percent) / band.sd_percent
    b = (band.hi_percent - band.mean_percent) / band.sd_percent
    ref_mean = stats.truncnorm.mean(a, b, loc=band.mean_percent,
                                    scale=band.sd_percent) / 100.0
    assert draws.mean() == pytest.approx(ref_mean, abs=2e-4)


def test_band_sampling_untruncated():
    band = default_bands()["Mid"]
    rng = np.random.default_rng(1)
    draws = band.sample(50_000, rng, truncate=False)
    assert draws.mean() == pytest.approx(0.15, abs=5e-4)
    # without truncation some draws escape the elicited range
    assert (draws < band.lo_percent / 100.0).any()


def test_assignment_validation():
    bands = default_bands()
    good = BandAssignment.uniform(2, 3)
    good.validate(bands)
    bad = BandAssignment(names=np.array([["Mid", "Nope"]], dtype=object))
    with pytest.raises(ValueError, match="unknown bands"):
        bad.validate(bands)


def test_scenario_kappa_support():
    with pytest.raises(ValueError):
        CullScenario(scenario_id=0, kappa=np.array([[0.0, 0.2]]))


def test_sample_scenarios_deterministic_and_extensible():
    bands = default_bands()
    assignment = BandAssignment.uniform(2, 3)
    five = sample_scenarios(assignment, bands, 5, seed=11)
    ten = sample_scenarios(assignment, bands, 10, seed=11)
    for a, b in zip(five, ten):
        assert a.scenario_id == b.scenario_id
        assert np.array_equal(a.kappa, b.kappa)
    assert len({s.scenario_id for s in ten}) == 10
    for s in ten:
        assert np.all((s.kappa >= 0.10) & (s.kappa <= 0.20))


def test_mean_scenario_values():
    bands = default_bands()
    names = np.array([["Low", "High"], ["Mid", "Mid"]], dtype=object)
    s = mean_scenario(BandAssignment(names=names), bands)
    assert s.scenario_id == -1
    assert np.allclose(s.kappa, [[0.10, 0.25], [0.15, 0.15]])


def _fake_samples(seed, n_kept=20, scenario_id=0):
    rng = np.random.default_rng(seed)
    draws = {"N": rng.integers(0, 30, (1, n_kept, 2, 4)),
             "tau": rng.uniform(1, 5, (1, n_kept, 2)),
             "rho": rng.uniform(-0.5, 0.5, (1, n_kept, 1))}
    return PosteriorSamples(draws=draws, meta={"scenario_id": scenario_id})


def test_pool_samples_concatenates_with_attribution():
    parts = [_fake_samples(i, scenario_id=i) for i in range(3)]
    pooled = pool_samples(parts)
    assert pooled.n_chains == 1
    assert pooled.n_kept == 60
    attribution = pooled.meta["scenario_per_draw"]
    assert len(attribution) == 60
    assert list(attribution[:20]) == [0] * 20
    assert np.array_equal(pooled.draws["N"][0, 20:40], parts[1].draws["N"][0])


def test_pool_samples_shape_mismatch():
    a = _fake_samples(0)
    b = _fake_samples(1)
    b.draws["N"] = b.draws["N"][..., :3]
    with pytest.raises(ValueError):
        pool_samples([a, b])
    with pytest.raises(ValueError):
        pool_samples([])


def test_total_intervals_rows():
    rows = total_intervals(_fake_samples(2))
    assert [r["species"] for r in rows] == [0, 1]
    for r in rows:
        assert r["lo95"] <= r["median"] <= r["hi95"]
        assert r["width"] == pytest.approx(r["hi95"] - r["lo95"])
