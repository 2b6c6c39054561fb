"""Independent reference computations used by the tests.

Nothing here calls the package's numerics: joints are assembled from
explicit matrix powers and conditioned with dense inverses.
"""

from __future__ import annotations

import numpy as np

from kfabstraction.system import LinearStochasticSystem


def random_pd(rng, n, scale=1.0, floor=0.2):
    G = rng.normal(size=(n, n))
    return scale * (G @ G.T / n + floor * np.eye(n))


def random_system(rng, n, q, m=1, p=1, stable=0.95, sigma0=None):
    """Random M with a full-row-rank C (q < n) and H = N C.

    ``A`` is rescaled to spectral radius ``stable``; Qw and Sigma0 are
    positive definite, so C Sigma0 C^T and C Qw C^T are too (Assumption 1).
    """
    A = rng.normal(size=(n, n))
    rho = max(abs(np.linalg.eigvals(A)))
    A = A * (stable * rng.uniform(0.3, 1.0) / rho) if rho > 0 else A
    B = rng.normal(size=(n, m))
    C = rng.normal(size=(q, n))
    while np.linalg.matrix_rank(C) < q:
        C = rng.normal(size=(q, n))
    N = rng.normal(size=(p, q))
    H = N @ C
    Qw = random_pd(rng, n)
    S0 = random_pd(rng, n, scale=2.0) if sigma0 is None else sigma0
    mu0 = rng.normal(size=n)
    return LinearStochasticSystem.from_arrays(A, B, H, Qw, mu0, S0), C, N


def state_joint(A, B, Qw, mu0, Sigma0, us, T):
    """Mean (T+1, n) and covariance ((T+1) n, (T+1) n) of x(0..T) under open-loop inputs."""
    n = A.shape[0]
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(A @ powers[-1])
    mean = np.zeros((T + 1, n))
    mean[0] = mu0
    for t in range(T):
        mean[t + 1] = A @ mean[t] + B @ us[t]
    cov = np.zeros(((T + 1) * n, (T + 1) * n))
    for t in range(T + 1):
        for s in range(T + 1):
            blk = powers[t] @ Sigma0 @ powers[s].T
            for k in range(min(t, s)):
                blk = blk + powers[t - 1 - k] @ Qw @ powers[s - 1 - k].T
            cov[t * n:(t + 1) * n, s * n:(s + 1) * n] = blk
    return mean, cov


def brute_force_filter(system, C, ys, us):
    """E[x(t) | y(0..t)] and Cov[x(t) | y(0..t)] by conditioning the explicit
    joint of (x(0..T), y(0..T)) with dense inverses."""
    ys = np.asarray(ys, dtype=float)
    T = ys.shape[0] - 1
    n, q = system.n, C.shape[0]
    mx, Sxx = state_joint(system.A, system.B, system.Qw, system.mu0, system.Sigma0, us, T)
    Cbig = np.kron(np.eye(T + 1), C)
    means, covs = [], []
    for t in range(T + 1):
        obs = slice(0, (t + 1) * q)
        Syy = (Cbig @ Sxx @ Cbig.T)[obs, obs]
        Sxy = (Sxx @ Cbig.T)[t * n:(t + 1) * n, obs]
        my = (Cbig @ mx.ravel())[obs]
        gain = Sxy @ np.linalg.inv(Syy)
        means.append(mx[t] + gain @ (ys[:t + 1].ravel() - my))
        covs.append(Sxx[t * n:(t + 1) * n, t * n:(t + 1) * n] - gain @ Sxy.T)
    return np.array(means), np.array(covs)


def condition_dense(mean, cov, idx_obs, value):
    """Law of the unobserved coordinates given the observed ones."""
    mean, cov = np.asarray(mean, dtype=float), np.asarray(cov, dtype=float)
    idx_obs = np.asarray(idx_obs)
    rest = np.setdiff1d(np.arange(mean.shape[0]), idx_obs)
    S_oo = cov[np.ix_(idx_obs, idx_obs)]
    S_ro = cov[np.ix_(rest, idx_obs)]
    G = S_ro @ np.linalg.inv(S_oo)
    m = mean[rest] + G @ (np.asarray(value, dtype=float) - mean[idx_obs])
    return m, cov[np.ix_(rest, rest)] - G @ S_ro.T


def explicit_woodbury_forms(X, S0):
    """R from the first identity, and the residuals of the other four
    equivalent forms, all evaluated with dense inverses."""
    inv = np.linalg.inv
    R = inv(inv(X) - inv(S0))
    S0i = inv(S0)
    return R, [
        np.max(np.abs(R - (inv(S0i - S0i @ X @ S0i) - S0))),
        np.max(np.abs(inv(R + S0) - (S0i - S0i @ X @ S0i))),
        np.max(np.abs(S0 @ inv(R + S0) @ S0 - (S0 - X))),
        np.max(np.abs(X - (S0 - S0 @ inv(R + S0) @ S0))),
    ]


def iterate_riccati(A, C, Qw, X0, steps):
    """Plain filter Riccati map with an explicit inverse."""
    X = X0
    for _ in range(steps):
        X = A @ X @ A.T - A @ X @ C.T @ np.linalg.inv(C @ X @ C.T) @ C @ X @ A.T + Qw
    return X


def ex1_arrays():
    A = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    B = np.array([[0], [0], [1]], dtype=float)
    H = np.array([[0, 0, 1]], dtype=float)
    Qw = np.diag([1, 1, 0.05])
    C1 = np.array([[0, 1, 0], [0, 0, 1]], dtype=float)
    N1 = np.array([[0, 1]], dtype=float)
    return A, B, H, Qw, C1, N1
