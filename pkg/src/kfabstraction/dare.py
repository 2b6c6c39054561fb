"""Filter-form DARE and the time-invariant abstractions built on its
stabilizing solution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    Assumption2Violated,
    DareNotPositiveDefinite,
    NoConvergence,
    NotStabilizing,
    PremiseViolated,
    SingularR,
)
from .gaussian import Gaussian, is_pd, max_abs, min_eig, pd_solve, symmetrize
from .kalman import AbstractModel, kalman_gain
from .system import ObservedSystem

__all__ = [
    "DareSolution",
    "AuxiliaryMeasurement",
    "riccati_map",
    "dare_residual",
    "solve_dare",
    "build_invariant",
    "build_invariant_star",
    "auxiliary_measurement",
    "posterior_after_auxiliary",
    "woodbury_chain_residuals",
]

STRICT_MARGIN = 1e-9
DIVERGENCE_CAP = 1e150


def riccati_map(X: np.ndarray, A: np.ndarray, C: np.ndarray, Qw: np.ndarray) -> np.ndarray:
    """X -> A X A^T - A X C^T (C X C^T)^{-1} C X A^T + Qw."""
    K, _ = kalman_gain(X, C)
    return symmetrize(A @ (X - K @ C @ X) @ A.T + Qw)


def dare_residual(X, A, C, Qw) -> float:
    return max_abs(X - riccati_map(X, A, C, Qw))


@dataclass(frozen=True, eq=False)
class DareSolution:
    X: np.ndarray
    F: np.ndarray
    K: np.ndarray
    P: np.ndarray
    residual: float
    spectral_radius: float
    iterations: int

    def to_dict(self) -> dict:
        return {
            "X": self.X.tolist(), "F": self.F.tolist(), "K": self.K.tolist(), "P": self.P.tolist(),
            "residual": self.residual, "spectral_radius": self.spectral_radius,
            "iterations": self.iterations,
        }


def solve_dare(A, C, Qw, *, tol: float = 1e-12, max_iter: int = 10_000) -> DareSolution:
    """Fixed-point iteration of the filter Riccati map from X0 = Qw.

    Stops when successive iterates differ by at most ``tol`` relative to the
    max-norm of the newer one, then checks the residual and that A - F C is
    Schur stable.
    """
    A, C, Qw = (np.asarray(a, dtype=float) for a in (A, C, Qw))
    X = symmetrize(Qw.copy())
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            X_next = riccati_map(X, A, C, Qw)
        if not np.all(np.isfinite(X_next)) or max_abs(X_next) > DIVERGENCE_CAP:
            raise NoConvergence(f"Riccati iteration diverged after {it} iterations "
                                "(an unstable mode is not seen by the observation)")
        step = max_abs(X_next - X)
        X = X_next
        if step <= tol * max(max_abs(X), np.finfo(float).tiny):
            break
    else:
        raise NoConvergence(f"Riccati iteration did not converge in {max_iter} iterations (last step {step:.3e})")

    K, S = kalman_gain(X, C)
    F = A @ K
    P = symmetrize(X - K @ C @ X)
    residual = dare_residual(X, A, C, Qw)
    if residual > 1e-10 * (1.0 + max_abs(X)):
        raise NoConvergence(f"DARE residual {residual:.3e} too large after {it} iterations")
    rho = float(np.max(np.abs(np.linalg.eigvals(A - F @ C)))) if A.size else 0.0
    if rho >= 1.0 - 1e-9:
        raise NotStabilizing(f"fixed point reached but spectral radius of A - F C is {rho:.6g} >= 1")
    if not is_pd(X, STRICT_MARGIN):
        raise DareNotPositiveDefinite(f"DARE solution is not positive definite (min eig {min_eig(X):.3e})")
    return DareSolution(X=X, F=F, K=K, P=P, residual=residual, spectral_radius=rho, iterations=it)


def build_invariant(obs: ObservedSystem, sol: DareSolution) -> AbstractModel:
    """Time-invariant abstraction when Sigma0 itself is the stabilizing solution."""
    M = obs.system
    gap = max_abs(M.Sigma0 - sol.X)
    if gap > 1e-9 * (1.0 + max_abs(sol.X)):
        raise PremiseViolated(
            f"Lemma 2 premise violated: Sigma0 differs from the DARE solution X by {gap:.6g} (max-norm)")
    if not is_pd(obs.C @ M.Sigma0 @ obs.C.T, STRICT_MARGIN):
        raise PremiseViolated("Lemma 2 premise violated: C Sigma0 C^T is not positive definite")
    S = symmetrize(obs.C @ sol.X @ obs.C.T)
    return AbstractModel(
        A=M.A, B=M.B, H=M.H, C=obs.C, N=obs.N,
        init=Gaussian(M.mu0, symmetrize(sol.X - sol.P)),
        gains=sol.K[None].copy(), innovation_cov=S[None], gain0=sol.K.copy(),
        flavor="time-invariant", constant=True,
    )


@dataclass(frozen=True, eq=False)
class AuxiliaryMeasurement:
    """Extra t = 0 observation ytilde = x(0) + wtilde, wtilde ~ N(0, R);
    ``L`` is the gain Sigma0 (Sigma0 + R)^{-1}."""

    R: np.ndarray
    L: np.ndarray

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "L": self.L.tolist()}


def auxiliary_measurement(Sigma0, X) -> AuxiliaryMeasurement:
    """R = (X^{-1} - Sigma0^{-1})^{-1}, evaluated as Sigma0 (Sigma0 - X)^{-1} X
    with a single PD solve."""
    Sigma0, X = np.asarray(Sigma0, dtype=float), np.asarray(X, dtype=float)
    D = symmetrize(Sigma0 - X)
    R = symmetrize(Sigma0 @ pd_solve(D, X, error=SingularR, what="Sigma0 - X"))
    if not is_pd(R, STRICT_MARGIN):
        raise SingularR("auxiliary covariance R is not positive definite")
    L = pd_solve(symmetrize(Sigma0 + R), Sigma0, error=SingularR, what="Sigma0 + R").T
    chain = max_abs(Sigma0 - Sigma0 @ pd_solve(symmetrize(R + Sigma0), Sigma0, error=SingularR) - X)
    if chain > 1e-9 * (1.0 + max_abs(Sigma0)):
        raise SingularR(f"Woodbury consistency check failed ({chain:.3e}); R is numerically unreliable")
    return AuxiliaryMeasurement(R=R, L=L)


def build_invariant_star(obs: ObservedSystem, sol: DareSolution) -> tuple[AbstractModel, AuxiliaryMeasurement]:
    """Time-invariant abstraction under Sigma0 - X > 0, via the auxiliary
    initial measurement."""
    M = obs.system
    D = M.Sigma0 - sol.X
    if not is_pd(D, STRICT_MARGIN):
        raise Assumption2Violated(
            f"Assumption 2 violated: min eig(Sigma0 - X) = {min_eig(D):.6g} is not strictly positive")
    S = symmetrize(obs.C @ sol.X @ obs.C.T)
    if not is_pd(S, STRICT_MARGIN):
        raise Assumption2Violated(f"Assumption 2 violated: min eig(C X C^T) = {min_eig(S):.6g}")
    aux = auxiliary_measurement(M.Sigma0, sol.X)
    model = AbstractModel(
        A=M.A, B=M.B, H=M.H, C=obs.C, N=obs.N,
        init=Gaussian(M.mu0, symmetrize(M.Sigma0 - sol.P)),
        gains=sol.K[None].copy(), innovation_cov=S[None], gain0=sol.K.copy(),
        flavor="time-invariant-star", constant=True,
    )
    return model, aux


def posterior_after_auxiliary(obs: ObservedSystem, sol: DareSolution, aux: AuxiliaryMeasurement,
                              x0_draw, w_tilde_draw) -> np.ndarray:
    """x_K(0|0) from y(0) = C x(0) and ytilde = x(0) + wtilde."""
    mu0 = obs.system.mu0
    x0 = np.asarray(x0_draw, dtype=float)
    mu_bar = mu0 + aux.L @ (x0 + np.asarray(w_tilde_draw, dtype=float) - mu0)
    return mu_bar + sol.K @ (obs.C @ x0 - obs.C @ mu_bar)


def woodbury_chain_residuals(X, Sigma0, R=None) -> dict[str, float]:
    """Max-norm residuals of the five equivalent forms linking R, X, Sigma0.

    Deliberately uses explicit inverses: it serves as an independent check of
    :func:`auxiliary_measurement`, which never forms them.
    """
    X, S0 = np.asarray(X, dtype=float), np.asarray(Sigma0, dtype=float)
    inv = np.linalg.inv
    R1 = inv(inv(X) - inv(S0))
    R = R1 if R is None else np.asarray(R, dtype=float)
    S0i = inv(S0)
    R2 = inv(S0i - S0i @ X @ S0i) - S0
    return {
        "R = (X^-1 - S0^-1)^-1": max_abs(R - R1),
        "R = (S0^-1 - S0^-1 X S0^-1)^-1 - S0": max_abs(R - R2),
        "(R + S0)^-1 = S0^-1 - S0^-1 X S0^-1": max_abs(inv(R + S0) - (S0i - S0i @ X @ S0i)),
        "S0 (R + S0)^-1 S0 = S0 - X": max_abs(S0 @ inv(R + S0) @ S0 - (S0 - X)),
        "X = S0 - S0 (R + S0)^-1 S0": max_abs(X - (S0 - S0 @ inv(R + S0) @ S0)),
    }
