"""CAR-family Gaussian Markov random field densities and sampling.

All quadratic forms are computed edge-wise from neighbour lists; the full
Kronecker precision is never materialized.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import Adjacency

log = logging.getLogger(__name__)


def _check_spd(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("sigma must be square")
    if not np.allclose(sigma, sigma.T, atol=1e-12):
        raise ValueError("sigma must be symmetric")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError("sigma is not positive definite") from exc
    return sigma


def pairwise_quadform(phi_a: np.ndarray, phi_b: np.ndarray, adj: Adjacency) -> float:
    """phi_a^T (D - A) phi_b = sum over edges of (da_j - da_k)(db_j - db_k)."""
    edges = adj.edge_list()
    if edges.size == 0:
        return 0.0
    j, k = edges[:, 0], edges[:, 1]
    return float(np.sum((phi_a[j] - phi_a[k]) * (phi_b[j] - phi_b[k])))


def icar_logdensity(u: np.ndarray, tau: float, adj: Adjacency) -> float:
    """Improper ICAR log-density: -(tau/2) * qf + ((m - c)/2) log tau.

    Invariant to adding a constant per connected component.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    u = np.asarray(u, dtype=float)
    if u.shape != (adj.n_sites,):
        raise ValueError("u length must equal number of sites")
    qf = pairwise_quadform(u, u, adj)
    rank = adj.n_sites - adj.n_components
    return -0.5 * tau * qf + 0.5 * rank * math.log(tau)


def micar_logdensity(phi: np.ndarray, sigma: np.ndarray, adj: Adjacency) -> float:
    """Multivariate intrinsic CAR log-density with precision Sigma kron (D - A).

    Kernel -0.5 * vec(phi)^T (Sigma kron L) vec(phi) plus the rank-aware
    normalizer ((m - c)/2) log det Sigma. Rows of phi are species.
    """
    sigma = _check_spd(sigma)
    phi = np.asarray(phi, dtype=float)
    n_species = sigma.shape[0]
    if phi.shape != (n_species, adj.n_sites):
        raise ValueError("phi must be (n_species, n_sites)")
    qf = 0.0
    for a in range(n_species):
        qf += sigma[a, a] * pairwise_quadform(phi[a], phi[a], adj)
        for b in range(a + 1, n_species):
            qf += 2.0 * sigma[a, b] * pairwise_quadform(phi[a], phi[b], adj)
    rank = adj.n_sites - adj.n_components
    sign, logdet = np.linalg.slogdet(sigma)
    return -0.5 * qf + 0.5 * rank * logdet


def pcar_logdensity(u: np.ndarray, tau: float, alpha: float, adj: Adjacency) -> float:
    """Proper CAR log-density with precision tau * (D - alpha A), fully normalized."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie strictly in (0, 1)")
    u = np.asarray(u, dtype=float)
    m = adj.n_sites
    if u.shape != (m,):
        raise ValueError("u length must equal number of sites")
    # qf for D - alpha*A: sum_j d_j u_j^2 - alpha * sum_{j~k} 2 u_j u_k
    qf = float(np.sum(adj.degrees * u * u))
    edges = adj.edge_list()
    if edges.size:
        qf -= 2.0 * alpha * float(np.sum(u[edges[:, 0]] * u[edges[:, 1]]))
    prec = tau * (np.diag(adj.degrees.astype(float)) - alpha * _dense_A(adj))
    sign, logdet = np.linalg.slogdet(prec)
    if sign <= 0:
        raise ValueError("PCAR precision not positive definite")
    return 0.5 * logdet - 0.5 * m * math.log(2.0 * math.pi) - 0.5 * tau * qf


def _dense_A(adj: Adjacency) -> np.ndarray:
    m = adj.n_sites
    A = np.zeros((m, m))
    for j in range(m):
        A[j, adj.neighbors(j)] = 1.0
    return A


def build_sigma(tau: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Between-species precision Sigma = diag(sqrt(tau)) R(rho) diag(sqrt(tau)).

    rho holds the S(S-1)/2 upper-triangle entries of the correlation-structured
    matrix R (unit diagonal), row-major. Raises if the result is not SPD.
    """
    tau = np.asarray(tau, dtype=float)
    n = len(tau)
    if np.any(tau <= 0):
        raise ValueError("tau entries must be > 0")
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (n * (n - 1) // 2,):
        raise ValueError("rho must have S(S-1)/2 entries")
    if np.any(np.abs(rho) >= 1):
        raise ValueError("rho entries must lie in (-1, 1)")
    R = np.eye(n)
    idx = 0
    for a in range(n):
        for b in range(a + 1, n):
            R[a, b] = R[b, a] = rho[idx]
            idx += 1
    s = np.sqrt(tau)
    return _check_spd(R * np.outer(s, s))


def rho_is_valid(tau: np.ndarray, rho: np.ndarray) -> bool:
    try:
        build_sigma(tau, rho)
        return True
    except ValueError:
        return False


def laplacian_eigh(adj: Adjacency) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of the dense graph Laplacian (small/medium m only)."""
    evals, evecs = np.linalg.eigh(adj.dense_laplacian())
    return evals, evecs


def sample_intrinsic_field(sigma: np.ndarray, adj: Adjacency,
                           rng: np.random.Generator) -> np.ndarray:
    """Draw one (S, m) field from the intrinsic MICAR on the constrained subspace.

    The Laplacian null space (one constant per connected component) is removed
    via eigendecomposition, so each species' field sums to zero within every
    component by construction.
    """
    sigma = _check_spd(sigma)
    if adj.n_components > 1:
        log.warning("graph has %d components; fields centre per component",
                    adj.n_components)
    n_species = sigma.shape[0]
    evals, evecs = laplacian_eigh(adj)
    keep = evals > 1e-10
    if np.count_nonzero(~keep) != adj.n_components:
        raise RuntimeError("Laplacian null-space dimension does not match components")
    lam = evals[keep]
    V = evecs[:, keep]
    # cov(vec phi) = Sigma^{-1} kron L+, so phi = A W diag(lam^-1/2) V^T
    # with A A^T = Sigma^{-1}
    c, low = cho_factor(sigma, lower=True)
    A = cho_solve((c, low), np.eye(n_species))
    A = np.linalg.cholesky(A)
    W = rng.standard_normal((n_species, len(lam)))
    return (A @ W) / np.sqrt(lam) @ V.T


def sigma_to_correlation(sigma: np.ndarray) -> np.ndarray:
    """Between-species correlation implied by precision Sigma: normalize Sigma^-1."""
    sigma = _check_spd(sigma)
    cov = np.linalg.inv(sigma)
    d = np.sqrt(np.diag(cov))
    corr = cov / np.outer(d, d)
    np.fill_diagonal(corr, 1.0)
    return corr
