"""Hot inner loops of the sampler: spatial-field and latent-count sweeps.

Each kernel is compiled with numba @njit. Setting the environment variable
MISNMIX_DISABLE_NUMBA=1 before import selects the pure-Python fallback
(the kernels' own .py_func), which runs the identical arithmetic without
compilation. `python -m misnmix.benchmark` compares the two paths.

All randomness is pre-drawn by the caller and passed in as arrays, so both
paths consume the same stream and a chain is deterministic either way.
"""

from __future__ import annotations

import math
import os

from numba import njit

NUMBA_DISABLED = os.environ.get("MISNMIX_DISABLE_NUMBA", "0") == "1"

LINPRED_CLAMP = 50.0
NEG_INF = -math.inf


@njit(cache=True)
def _negbin_logpmf_scalar(n, lam, theta):
    return (math.lgamma(n + theta) - math.lgamma(theta) - math.lgamma(n + 1.0)
            + theta * math.log(theta / (theta + lam))
            + n * math.log(lam / (theta + lam)))


@njit(cache=True)
def _negbin_grid(N, lam, theta, out):
    S, m = N.shape
    for i in range(S):
        for j in range(m):
            out[i, j] = _negbin_logpmf_scalar(float(N[i, j]), lam[i, j], theta[i])


@njit(cache=True)
def _u_sweep(u, base_lin, N, theta, sigma, indptr, indices, degrees,
             nb_cache, scale_u, normals, logu, accepts):
    """One Metropolis pass over every (species, site) spatial-effect scalar.

    Mutates u and nb_cache in place; adds per-species acceptance counts to
    accepts. The prior delta uses only the site's Markov blanket.
    """
    S, m = u.shape
    for i in range(S):
        for j in range(m):
            d = scale_u[i] * normals[i, j]
            deg = degrees[j]
            # g = sum_b sigma[i,b] * (L u_b)_j
            g = 0.0
            for b in range(S):
                lu = deg * u[b, j]
                for t in range(indptr[j], indptr[j + 1]):
                    lu -= u[b, indices[t]]
                g += sigma[i, b] * lu
            dprior = -0.5 * (2.0 * d * g + d * d * sigma[i, i] * deg)
            lin = base_lin[i, j] + u[i, j] + d
            if lin > LINPRED_CLAMP:
                lin = LINPRED_CLAMP
            elif lin < -LINPRED_CLAMP:
                lin = -LINPRED_CLAMP
            lam_new = math.exp(lin)
            nb_new = _negbin_logpmf_scalar(float(N[i, j]), lam_new, theta[i])
            if logu[i, j] < dprior + nb_new - nb_cache[i, j]:
                u[i, j] += d
                nb_cache[i, j] = nb_new
                accepts[i] += 1


@njit(cache=True)
def _binom_delta(counts, n_old, n_new, p):
    """Sum over visits of binomial logpmf(count; n, p) differences."""
    if p >= 1.0:
        for t in range(len(counts)):
            if counts[t] != n_new:
                return NEG_INF
        for t in range(len(counts)):
            if counts[t] != n_old:
                return math.inf  # escaping a -inf state; accept
        return 0.0
    if p <= 0.0:
        return 0.0  # valid states need all counts 0; term constant in N
    log1mp = math.log1p(-p)
    delta = 0.0
    for t in range(len(counts)):
        c = float(counts[t])
        delta += (math.lgamma(n_new + 1.0) - math.lgamma(n_new - c + 1.0)
                  - math.lgamma(n_old + 1.0) + math.lgamma(n_old - c + 1.0)
                  + (n_new - n_old) * log1mp)
    return delta


@njit(cache=True)
def _cull_term(R, z, kappa):
    if R <= 0:
        return 0.0 if z == 0 else NEG_INF
    return z * math.log(kappa * R) - kappa * R


@njit(cache=True)
def _n_sweep_species(N, lam, theta, p, obs_ptr, obs_counts, max_counts,
                     region_index, R, z, kappa, use_cull, nb_row,
                     eps, logu, order):
    """One randomized-order pass over a species' latent site abundances.

    Integer random-walk proposals; acceptance touches only the site's
    negative-binomial term, its visit binomial terms, and the one affected
    regional Poisson term. Mutates N, R, and the cached negbin row.
    Returns acceptances.
    """
    accepted = 0
    for idx in range(len(order)):
        j = order[idx]
        step = eps[idx]
        n_old = N[j]
        n_new = n_old + step
        if n_new < 0 or n_new < max_counts[j]:
            continue
        nb_new = _negbin_logpmf_scalar(float(n_new), lam[j], theta)
        delta = nb_new - nb_row[j]
        lo, hi = obs_ptr[j], obs_ptr[j + 1]
        if hi > lo:
            delta += _binom_delta(obs_counts[lo:hi], float(n_old), float(n_new), p[j])
        if use_cull:
            k = region_index[j]
            r_new = R[k] + (n_new - n_old)
            delta += _cull_term(float(r_new), float(z[k]), kappa[k])
            delta -= _cull_term(float(R[k]), float(z[k]), kappa[k])
        if logu[idx] < delta:
            N[j] = n_new
            if use_cull:
                R[region_index[j]] = R[region_index[j]] + (n_new - n_old)
            nb_row[j] = nb_new
            accepted += 1
    return accepted


@njit(cache=True)
def _n_indep_sweep_species(N, prop, lam, theta, p, obs_ptr, obs_counts,
                           max_counts, region_index, R, z, kappa, use_cull,
                           nb_row, logu, order):
    """Independence move: propose N_j from its negative-binomial layer.

    The latent prior and the proposal cancel, so acceptance touches only the
    visit binomial terms and the regional Poisson term; with neither, the move
    is an exact Gibbs draw. Mutates N, R, and the cached negbin row.
    """
    accepted = 0
    for idx in range(len(order)):
        j = order[idx]
        n_old = N[j]
        n_new = prop[j]
        if n_new == n_old:
            accepted += 1
            continue
        if n_new < max_counts[j]:
            continue
        delta = 0.0
        lo, hi = obs_ptr[j], obs_ptr[j + 1]
        if hi > lo:
            delta += _binom_delta(obs_counts[lo:hi], float(n_old), float(n_new), p[j])
        if use_cull:
            k = region_index[j]
            r_new = R[k] + (n_new - n_old)
            delta += _cull_term(float(r_new), float(z[k]), kappa[k])
            delta -= _cull_term(float(R[k]), float(z[k]), kappa[k])
        if logu[idx] < delta:
            N[j] = n_new
            if use_cull:
                R[region_index[j]] = R[region_index[j]] + (n_new - n_old)
            nb_row[j] = _negbin_logpmf_scalar(float(n_new), lam[j], theta)
            accepted += 1
    return accepted


# dispatch: compiled kernels by default, pure-Python twins under the env flag
negbin_grid_numba = _negbin_grid
negbin_grid_python = _negbin_grid.py_func
u_sweep_numba = _u_sweep
u_sweep_python = _u_sweep.py_func
n_sweep_species_numba = _n_sweep_species
n_sweep_species_python = _n_sweep_species.py_func
n_indep_sweep_species_numba = _n_indep_sweep_species
n_indep_sweep_species_python = _n_indep_sweep_species.py_func

if NUMBA_DISABLED:
    # rebind the helper names too so the fallback never triggers compilation
    _negbin_logpmf_scalar = _negbin_logpmf_scalar.py_func
    _binom_delta = _binom_delta.py_func
    _cull_term = _cull_term.py_func
    negbin_grid = negbin_grid_python
    u_sweep = u_sweep_python
    n_sweep_species = n_sweep_species_python
    n_indep_sweep_species = n_indep_sweep_species_python
else:
    negbin_grid = negbin_grid_numba
    u_sweep = u_sweep_numba
    n_sweep_species = n_sweep_species_numba
    n_indep_sweep_species = n_indep_sweep_species_numba
