import numpy as np
import pytest

from misnmix import kernels
from misnmix.car import build_sigma
from misnmix.geometry import build_adjacency, lattice_grid
from misnmix.model import negbin_logpmf

needs_numba = pytest.mark.skipif(
    kernels.NUMBA_DISABLED,
    reason="compiled path disabled via MISNMIX_DISABLE_NUMBA")


def _u_sweep_inputs(seed=0, S=2, side=3):
    adj = build_adjacency(lattice_grid(side, side, n_regions=1))
    m = adj.n_sites
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((S, m))
    base_lin = rng.normal(0.5, 0.3, (S, m))
    N = rng.integers(0, 12, (S, m)).astype(np.int64)
    theta = np.array([1.5, 2.5])[:S]
    sigma = build_sigma(np.full(S, 2.0), np.full(S * (S - 1) // 2, 0.3))
    lam = np.exp(base_lin + u)
    nb = negbin_logpmf(N, lam, theta[:, None])
    normals = rng.standard_normal((S, m))
    logu = np.log(rng.random((S, m)))
    return adj, dict(u=u, base_lin=base_lin, N=N, theta=theta, sigma=sigma,
                     nb=np.asarray(nb), normals=normals, logu=logu)


def _run_u_sweep(fn, adj, env):
    u = env["u"].copy()
    nb = env["nb"].copy()
    accepts = np.zeros(u.shape[0], dtype=np.int64)
    fn(u, env["base_lin"], env["N"], env["theta"], env["sigma"],
       adj.indptr, adj.indices, adj.degrees.astype(np.float64), nb,
       np.full(u.shape[0], 0.4), env["normals"], env["logu"], accepts)
    return u, nb, accepts


def _n_sweep_inputs(seed=3, m=9):
    rng = np.random.default_rng(seed)
    N = rng.integers(2, 15, m).astype(np.int64)
    lam = rng.uniform(1.0, 8.0, m)
    theta = 2.0
    p = rng.uniform(0.2, 0.8, m)
    visits = 2
    obs_ptr = np.arange(0, visits * m + 1, visits, dtype=np.int64)
    obs_counts = np.concatenate(
        [rng.binomial(N[j], p[j], visits) for j in range(m)]).astype(np.int64)
    max_counts = np.array([obs_counts[obs_ptr[j]:obs_ptr[j + 1]].max()
                           for j in range(m)], dtype=np.int64)
    region_index = (np.arange(m) % 3).astype(np.int64)
    R = np.zeros(3, dtype=np.int64)
    np.add.at(R, region_index, N)
    z = np.maximum(0, (0.2 * R).astype(np.int64))
    kappa = np.full(3, 0.2)
    nb_row = np.asarray(negbin_logpmf(N, lam, theta))
    w = 3
    raw = rng.integers(0, 2 * w, m)
    eps = raw - w
    eps[eps >= 0] += 1
    logu = np.log(rng.random(m))
    order = rng.permutation(m)
    return dict(N=N, lam=lam, theta=theta, p=p, obs_ptr=obs_ptr,
                obs_counts=obs_counts, max_counts=max_counts,
                region_index=region_index, R=R, z=z, kappa=kappa,
                nb_row=nb_row, eps=eps, logu=logu, order=order)


def _run_n_sweep(fn, env):
    N = env["N"].copy()
    R = env["R"].copy()
    nb = env["nb_row"].copy()
    acc = fn(N, env["lam"], env["theta"], env["p"], env["obs_ptr"],
             env["obs_counts"], env["max_counts"], env["region_index"],
             R, env["z"], env["kappa"], True, nb, env["eps"], env["logu"],
             env["order"])
    return N, R, nb, acc


def test_negbin_grid_matches_vectorized():
    rng = np.random.default_rng(1)
    N = rng.integers(0, 20, (3, 7)).astype(np.int64)
    lam = rng.uniform(0.5, 6.0, (3, 7))
    theta = np.array([1.0, 2.0, 3.0])
    out = np.empty((3, 7))
    kernels.negbin_grid(N, lam, theta, out)
    ref = negbin_logpmf(N, lam, theta[:, None])
    assert np.allclose(out, ref, atol=1e-10)


@needs_numba
def test_negbin_grid_paths_identical():
    rng = np.random.default_rng(2)
    N = rng.integers(0, 30, (2, 11)).astype(np.int64)
    lam = rng.uniform(0.5, 9.0, (2, 11))
    theta = np.array([1.2, 0.7])
    a, b = np.empty((2, 11)), np.empty((2, 11))
    kernels.negbin_grid_numba(N, lam, theta, a)
    kernels.negbin_grid_python(N, lam, theta, b)
    assert np.array_equal(a, b)


@needs_numba
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_u_sweep_paths_identical(seed):
    """Both paths consume the same pre-drawn streams and must agree exactly."""
    adj, env = _u_sweep_inputs(seed)
    out_nb = _run_u_sweep(kernels.u_sweep_numba, adj, env)
    out_py = _run_u_sweep(kernels.u_sweep_python, adj, env)
    for a, b in zip(out_nb, out_py):
        assert np.array_equal(a, b)


@needs_numba
@pytest.mark.parametrize("seed", [3, 4, 5])
def test_n_sweep_paths_identical(seed):
    env = _n_sweep_inputs(seed)
    out_nb = _run_n_sweep(kernels.n_sweep_species_numba, env)
    out_py = _run_n_sweep(kernels.n_sweep_species_python, env)
    for a, b in zip(out_nb[:3], out_py[:3]):
        assert np.array_equal(a, b)
    assert out_nb[3] == out_py[3]


def test_n_sweep_respects_observation_floor():
    env = _n_sweep_inputs()
    N, R, nb, acc = _run_n_sweep(kernels.n_sweep_species, env)
    assert np.all(N >= env["max_counts"])
    # regional totals stay in sync with the mutated latents
    R_check = np.zeros(3, dtype=np.int64)
    np.add.at(R_check, env["region_index"], N)
    assert np.array_equal(R, R_check)
    # negbin cache matches a fresh evaluation
    ref = negbin_logpmf(N, env["lam"], env["theta"])
    assert np.allclose(nb, ref, atol=1e-10)


def test_u_sweep_cache_consistency():
    adj, env = _u_sweep_inputs(9)
    u, nb, accepts = _run_u_sweep(kernels.u_sweep, adj, env)
    lam = np.exp(np.clip(env["base_lin"] + u, -50, 50))
    ref = np.empty_like(nb)
    kernels.negbin_grid(env["N"], lam, env["theta"], ref)
    assert np.allclose(nb, ref, atol=1e-10)
    assert accepts.sum() > 0  # some proposals must move at these scales


def _run_n_indep(fn, env, prop):
    N = env["N"].copy()
    R = env["R"].copy()
    nb = env["nb_row"].copy()
    acc = fn(N, prop, env["lam"], env["theta"], env["p"], env["obs_ptr"],
             env["obs_counts"], env["max_counts"], env["region_index"],
             R, env["z"], env["kappa"], True, nb, env["logu"], env["order"])
    return N, R, nb, acc


@needs_numba
@pytest.mark.parametrize("seed", [6, 7, 8])
def test_n_indep_sweep_paths_identical(seed):
    env = _n_sweep_inputs(seed)
    rng = np.random.default_rng(seed + 100)
    prop = rng.integers(0, 25, len(env["N"])).astype(np.int64)
    out_nb = _run_n_indep(kernels.n_indep_sweep_species_numba, env, prop)
    out_py = _run_n_indep(kernels.n_indep_sweep_species_python, env, prop)
    for a, b in zip(out_nb[:3], out_py[:3]):
        assert np.array_equal(a, b)
    assert out_nb[3] == out_py[3]


def test_n_indep_sweep_invariants():
    env = _n_sweep_inputs(11)
    rng = np.random.default_rng(12)
    prop = rng.integers(0, 25, len(env["N"])).astype(np.int64)
    N, R, nb, acc = _run_n_indep(kernels.n_indep_sweep_species, env, prop)
    assert np.all(N >= env["max_counts"])
    R_check = np.zeros(3, dtype=np.int64)
    np.add.at(R_check, env["region_index"], N)
    assert np.array_equal(R, R_check)
    ref = negbin_logpmf(N, env["lam"], env["theta"])
    assert np.allclose(nb, ref, atol=1e-10)


def test_n_indep_sweep_is_gibbs_without_data():
    """With no visit counts and the cull term disabled, the proposal and the
    latent prior cancel exactly, so every draw must be accepted verbatim."""
    env = _n_sweep_inputs(13)
    m = len(env["N"])
    empty_ptr = np.zeros(m + 1, dtype=np.int64)
    rng = np.random.default_rng(14)
    prop = rng.integers(0, 25, m).astype(np.int64)
    N = env["N"].copy()
    R = env["R"].copy()
    nb = env["nb_row"].copy()
    acc = kernels.n_indep_sweep_species(
        N, prop, env["lam"], env["theta"], env["p"], empty_ptr,
        np.zeros(0, dtype=np.int64), np.zeros(m, dtype=np.int64),
        env["region_index"], R, env["z"], env["kappa"], False, nb,
        env["logu"], env["order"])
    assert acc == m
    assert np.array_equal(N, prop)
