"""Multivariate Gaussian primitives: validation, conditioning, sampling and
scalar interval probabilities."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as la
from scipy.special import ndtr

from .errors import (
    DimensionMismatch,
    InvalidCovariance,
    InvalidInterval,
    SingularObservationBlock,
)

PSD_TOL = 1e-9
SYM_TOL = 1e-12
COND_CAP = 1e12

__all__ = [
    "Gaussian",
    "JointGaussian",
    "condition",
    "sample",
    "interval_probability",
    "interval_violation",
    "is_psd",
    "is_pd",
    "symmetrize",
    "pd_solve",
    "max_abs",
]


def max_abs(m) -> float:
    m = np.asarray(m)
    return float(np.max(np.abs(m))) if m.size else 0.0


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _eig_scale(eigs: np.ndarray) -> float:
    return 1.0 + (float(np.max(np.abs(eigs))) if eigs.size else 0.0)


def is_psd(m, tol: float = PSD_TOL) -> bool:
    """True iff ``m`` is symmetric within ``tol`` and its smallest eigenvalue is
    at least ``-tol`` times ``1 + max |eigenvalue|``."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if m.size == 0:
        return True
    if max_abs(m - m.T) > tol * max(1.0, max_abs(m)):
        return False
    eigs = np.linalg.eigvalsh(symmetrize(m))
    return bool(eigs.min() >= -tol * _eig_scale(eigs))


def is_pd(m, margin: float = PSD_TOL) -> bool:
    """Strict version of :func:`is_psd`: min eigenvalue must exceed ``margin``
    times the spectral scale."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if m.size == 0:
        return True
    if max_abs(m - m.T) > margin * max(1.0, max_abs(m)):
        return False
    eigs = np.linalg.eigvalsh(symmetrize(m))
    return bool(eigs.min() > margin * _eig_scale(eigs))


def min_eig(m) -> float:
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return float("inf")
    return float(np.linalg.eigvalsh(symmetrize(m)).min())


def pd_solve(S: np.ndarray, rhs: np.ndarray, cond_cap: float = COND_CAP,
             error=SingularObservationBlock, what: str = "matrix") -> np.ndarray:
    """Solve ``S @ Y = rhs`` for symmetric positive definite ``S``.

    Uses a Cholesky factorization; raises ``error`` when the condition number
    of ``S`` exceeds ``cond_cap`` or the factorization fails.
    """
    S = symmetrize(np.asarray(S, dtype=float))
    if S.size == 0:
        return np.zeros_like(np.asarray(rhs, dtype=float))
    eigs = np.linalg.eigvalsh(S)
    if eigs.min() <= 0 or eigs.max() / eigs.min() > cond_cap:
        cond = np.inf if eigs.min() <= 0 else eigs.max() / eigs.min()
        raise error(f"{what} is singular or ill-conditioned (condition number {cond:.3e} > {cond_cap:.0e})")
    try:
        factor = la.cho_factor(S, lower=True, check_finite=False)
    except la.LinAlgError as exc:
        raise error(f"{what} is not positive definite") from exc
    return la.cho_solve(factor, rhs, check_finite=False)


def _validate_cov(mean: np.ndarray, cov: np.ndarray) -> None:
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise DimensionMismatch(f"covariance shape {cov.shape} does not match mean of length {d}")
    if d == 0:
        return
    scale = max_abs(cov)
    if max_abs(cov - cov.T) > SYM_TOL * scale:
        raise InvalidCovariance("covariance is not symmetric")
    eigs = np.linalg.eigvalsh(symmetrize(cov))
    if eigs.min() < -PSD_TOL * _eig_scale(eigs):
        raise InvalidCovariance(f"covariance has negative eigenvalue {eigs.min():.3e}")


@dataclass(frozen=True, eq=False)
class Gaussian:
    """A (possibly degenerate) multivariate normal law."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float).reshape(mean.shape[0], -1) if mean.size else np.zeros((0, 0))
        _validate_cov(mean, cov)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def factor(self) -> np.ndarray:
        """Square-root factor ``L`` with ``L @ L.T == cov``.

        Built from an eigendecomposition so singular covariances work; rows of
        coordinates with exactly zero variance are forced to zero so that those
        coordinates are reproduced exactly.
        """
        if self.dim == 0:
            return np.zeros((0, 0))
        eigvals, eigvecs = np.linalg.eigh(symmetrize(self.cov))
        L = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
        L[np.all(self.cov == 0.0, axis=1)] = 0.0
        L.setflags(write=False)
        return L


def sample(g: Gaussian, stream: np.random.Generator) -> np.ndarray:
    """Draw one vector from ``g``; consumes exactly ``g.dim`` standard normals."""
    xi = stream.standard_normal(g.dim)
    return g.mean + g.factor @ xi


@dataclass(frozen=True, eq=False)
class JointGaussian:
    """A Gaussian over named, contiguous blocks."""

    blocks: tuple[tuple[str, int], ...]
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        blocks = tuple((str(name), int(dim)) for name, dim in self.blocks)
        names = [b[0] for b in blocks]
        if len(set(names)) != len(names):
            raise ValueError("block names must be unique")
        g = Gaussian(self.mean, self.cov)
        if sum(d for _, d in blocks) != g.dim:
            raise DimensionMismatch("block dimensions do not sum to the total dimension")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "mean", g.mean)
        object.__setattr__(self, "cov", g.cov)

    def index(self, name: str) -> np.ndarray:
        start = 0
        for block, dim in self.blocks:
            if block == name:
                return np.arange(start, start + dim)
            start += dim
        raise KeyError(name)

    def marginal(self, names: str | Sequence[str]) -> Gaussian:
        if isinstance(names, str):
            names = [names]
        idx = np.concatenate([self.index(n) for n in names]) if names else np.array([], dtype=int)
        return Gaussian(self.mean[idx], self.cov[np.ix_(idx, idx)])


def condition(joint: JointGaussian, observed_block: str, observation) -> Gaussian:
    """Law of the unobserved blocks given ``observed_block == observation``.

    The result covers the remaining blocks in their original order.
    """
    iy = joint.index(observed_block)
    ix = np.setdiff1d(np.arange(joint.mean.shape[0]), iy)
    y = np.asarray(observation, dtype=float).reshape(-1)
    if y.shape[0] != iy.shape[0]:
        raise DimensionMismatch(
            f"observation has length {y.shape[0]}, block {observed_block!r} has dimension {iy.shape[0]}")
    S = joint.cov
    Sxx = S[np.ix_(ix, ix)]
    Sxy = S[np.ix_(ix, iy)]
    Syy = S[np.ix_(iy, iy)]
    # Syy^{-1} [Syx, y - mu_y] in one factorization
    rhs = np.column_stack([Sxy.T, y - joint.mean[iy]])
    sol = pd_solve(Syy, rhs, what=f"covariance of block {observed_block!r}")
    mean = joint.mean[ix] + Sxy @ sol[:, -1]
    cov = symmetrize(Sxx - Sxy @ sol[:, :-1])
    return Gaussian(mean, cov)


def interval_probability(mean: float, variance: float, lower: float, upper: float) -> float:
    """P(lower <= X <= upper) for scalar X ~ N(mean, variance).

    Both tails are evaluated on the side where ``ndtr`` has full relative
    accuracy, so probabilities near 0 and near 1 keep their digits.
    """
    if lower > upper:
        raise InvalidInterval(f"lower bound {lower} exceeds upper bound {upper}")
    if variance < 0:
        raise InvalidCovariance(f"negative variance {variance}")
    if variance == 0:
        return float(lower <= mean <= upper)
    sd = np.sqrt(variance)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    if a > 0:
        return float(ndtr(-a) - ndtr(-b))
    if b < 0:
        return float(ndtr(b) - ndtr(a))
    # interval straddles the mean: 1 - both tails
    return float(1.0 - (ndtr(a) + ndtr(-b)))


def interval_violation(mean: float, variance: float, lower: float, upper: float) -> float:
    """P(X outside [lower, upper]), accurate when the violation is tiny."""
    if lower > upper:
        raise InvalidInterval(f"lower bound {lower} exceeds upper bound {upper}")
    if variance < 0:
        raise InvalidCovariance(f"negative variance {variance}")
    if variance == 0:
        return float(not (lower <= mean <= upper))
    sd = np.sqrt(variance)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    if a > 0 or b < 0:
        return float(1.0 - interval_probability(mean, variance, lower, upper))
    return float(ndtr(a) + ndtr(-b))
