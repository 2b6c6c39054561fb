"""Kalman/Riccati recursions for the knowledge-filtered system and the
innovation-process realizations built from them.

Index convention: the a posteriori realization consumes v(1), v(2), ...; the
t = 0 measurement is folded into its initial law N(mu0, Sigma0 - Pbar(0)).
Gain and innovation schedules of an :class:`AbstractModel` therefore start at
t = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, IllConditionedInnovation, OutOfSchedule
from .gaussian import Gaussian, pd_solve, sample, symmetrize
from .system import History, ObservedSystem, check_policy

__all__ = [
    "RiccatiSchedule",
    "riccati_recursion",
    "riccati_schedule",
    "kalman_gain",
    "kalman_filter",
    "innovation",
    "APrioriProcess",
    "build_a_priori_process",
    "AbstractModel",
    "build_abstract_time_varying",
    "simulate_abstract",
    "IndexMap",
]

FLAVORS = ("time-varying", "time-invariant", "time-invariant-star")


def kalman_gain(P: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(K, S)`` with S = C P C^T and K = P C^T S^{-1}."""
    S = symmetrize(C @ P @ C.T)
    K = pd_solve(S, C @ P, error=IllConditionedInnovation, what="innovation covariance C P C^T").T
    return K, S


@dataclass(frozen=True, eq=False)
class RiccatiSchedule:
    """Per-step filter covariances for t = 0..T.

    ``prior[t]`` is P(t|t-1), ``posterior[t]`` is P(t|t), ``gains[t]`` is
    K(t) and ``innovation_cov[t]`` is C P(t|t-1) C^T.
    """

    prior: np.ndarray
    posterior: np.ndarray
    gains: np.ndarray
    innovation_cov: np.ndarray

    @property
    def horizon(self) -> int:
        return self.prior.shape[0] - 1


def riccati_recursion(A, C, Qw, prior0, horizon: int) -> RiccatiSchedule:
    A, C, Qw = (np.asarray(a, dtype=float) for a in (A, C, Qw))
    n, q = A.shape[0], C.shape[0]
    prior = np.empty((horizon + 1, n, n))
    post = np.empty_like(prior)
    gains = np.empty((horizon + 1, n, q))
    innov = np.empty((horizon + 1, q, q))
    P = symmetrize(np.asarray(prior0, dtype=float))
    for t in range(horizon + 1):
        K, S = kalman_gain(P, C)
        prior[t], gains[t], innov[t] = P, K, S
        post[t] = symmetrize(P - K @ C @ P)
        P = symmetrize(A @ post[t] @ A.T + Qw)
    return RiccatiSchedule(prior, post, gains, innov)


def riccati_schedule(obs: ObservedSystem, horizon: int) -> RiccatiSchedule:
    """Covariance recursion initialised with P(0|-1) = Sigma0."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    obs.require_assumption1()
    M = obs.system
    return riccati_recursion(M.A, obs.C, M.Qw, M.Sigma0, horizon)


def kalman_filter(obs: ObservedSystem, ys, us) -> tuple[np.ndarray, RiccatiSchedule]:
    """Posterior means x_K(t|t) for observations y(0..T) and inputs u(0..T-1).

    Returns ``(means, schedule)`` where ``means`` has shape (T+1, n).
    """
    ys = np.asarray(ys, dtype=float)
    T = ys.shape[0] - 1
    M = obs.system
    us = np.asarray(us, dtype=float).reshape(T, M.m)
    sched = riccati_schedule(obs, T)
    means = np.empty((T + 1, M.n))
    x_prior = M.mu0.copy()
    for t in range(T + 1):
        means[t] = x_prior + sched.gains[t] @ innovation(ys[t], obs.C @ x_prior)
        if t < T:
            x_prior = M.A @ means[t] + M.B @ us[t]
    return means, sched


def innovation(y, predicted_mean) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    pred = np.asarray(predicted_mean, dtype=float)
    if y.shape != pred.shape:
        raise DimensionMismatch(f"observation shape {y.shape} differs from prediction shape {pred.shape}")
    return y - pred


@dataclass(frozen=True, eq=False)
class APrioriProcess:
    """xhat(t+1) = A xhat + B u + A K(t) v(t),  y = C xhat + v,  zhat = N y,
    with xhat(0) = mu0 and v(t) ~ N(0, innovation_cov[t]) for t = 0..T."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    N: np.ndarray
    mu0: np.ndarray
    gains: np.ndarray
    innovation_cov: np.ndarray

    @property
    def horizon(self) -> int:
        return self.gains.shape[0] - 1


def build_a_priori_process(obs: ObservedSystem, horizon: int) -> APrioriProcess:
    sched = riccati_schedule(obs, horizon)
    M = obs.system
    return APrioriProcess(M.A, M.B, obs.C, obs.N, M.mu0.copy(), sched.gains, sched.innovation_cov)


@dataclass(frozen=True, eq=False)
class AbstractModel:
    """xbar(t+1) = A xbar + B u + K(t+1) v(t+1),  zbar = H xbar,
    v(t) ~ N(0, Sigma_v(t)), xbar(0) ~ init.

    ``gains`` / ``innovation_cov`` hold K(t), Sigma_v(t) for t = 1..T when
    ``constant`` is False, or a single entry otherwise. ``gain0`` is the t = 0
    gain used to initialise refinement sessions.
    """

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    C: np.ndarray
    N: np.ndarray
    init: Gaussian
    gains: np.ndarray
    innovation_cov: np.ndarray
    gain0: np.ndarray
    flavor: str
    constant: bool

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}")
        if self.constant and self.gains.shape[0] != 1:
            raise DimensionMismatch("a constant model stores exactly one gain")
        if self.gains.shape[0] != self.innovation_cov.shape[0]:
            raise DimensionMismatch("gain and innovation schedules differ in length")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.H.shape[0]

    @property
    def q(self) -> int:
        return self.innovation_cov.shape[1]

    @property
    def mu0(self) -> np.ndarray:
        return self.init.mean

    @property
    def horizon(self) -> int | None:
        """Last t with a scheduled gain, or None for constant models."""
        return None if self.constant else self.gains.shape[0]

    def _index(self, t: int) -> int:
        if t < 1:
            raise OutOfSchedule(f"gains are indexed from t=1, asked for t={t}")
        if self.constant:
            return 0
        if t > self.gains.shape[0]:
            raise OutOfSchedule(f"gain schedule covers t=1..{self.gains.shape[0]}, asked for t={t}")
        return t - 1

    def gain(self, t: int) -> np.ndarray:
        return self.gains[self._index(t)]

    def innovation_covariance(self, t: int) -> np.ndarray:
        return self.innovation_cov[self._index(t)]


@dataclass(frozen=True)
class IndexMap:
    """Kept state indices (0-based) of a reduced abstract model."""

    kept: tuple[int, ...]
    full_dim: int

    @property
    def removed(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.full_dim) if i not in self.kept)

    @property
    def is_identity(self) -> bool:
        return len(self.kept) == self.full_dim

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[list(self.kept)]

    def lift_gain(self, gain: np.ndarray) -> np.ndarray:
        """Full-state gain equivalent to ``gain`` acting on the kept states."""
        gain = np.atleast_2d(np.asarray(gain, dtype=float))
        full = np.zeros((gain.shape[0], self.full_dim))
        full[:, list(self.kept)] = gain
        return full

    def to_dict(self) -> dict:
        """1-based ``{full index: reduced index}`` mapping plus removed indices."""
        return {
            "full_dim": self.full_dim,
            "kept": [i + 1 for i in self.kept],
            "removed": [i + 1 for i in self.removed],
            "map": {str(i + 1): k + 1 for k, i in enumerate(self.kept)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndexMap":
        return cls(tuple(int(i) - 1 for i in d["kept"]), int(d["full_dim"]))


def build_abstract_time_varying(obs: ObservedSystem, horizon: int) -> AbstractModel:
    sched = riccati_schedule(obs, horizon)
    M = obs.system
    init = Gaussian(M.mu0, symmetrize(M.Sigma0 - sched.posterior[0]))
    return AbstractModel(
        A=M.A, B=M.B, H=M.H, C=obs.C, N=obs.N, init=init,
        gains=sched.gains[1:].copy(), innovation_cov=sched.innovation_cov[1:].copy(),
        gain0=sched.gains[0].copy(), flavor="time-varying", constant=False,
    )


def simulate_abstract(abstract: AbstractModel, policy, horizon: int, stream: np.random.Generator,
                      state_map=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Roll the abstract model under a policy on (optionally projected) abstract
    states. Returns ``(states, inputs, outputs)``.

    Draw order: xbar(0), then v(t+1) after u(t) for each step.
    """
    project = (lambda x: x) if state_map is None else state_map.project
    check_policy(policy, abstract.m, abstract.n if state_map is None else len(state_map.kept))
    x = sample(abstract.init, stream)
    hist = History(states=[project(x)])
    xs, us = [x], []
    for t in range(horizon):
        u = policy(t, project(x), hist)
        v = sample(Gaussian(np.zeros(abstract.q), abstract.innovation_covariance(t + 1)), stream)
        x = abstract.A @ x + abstract.B @ u + abstract.gain(t + 1) @ v
        hist.inputs.append(u)
        hist.states.append(project(x))
        xs.append(x)
        us.append(u)
    states = np.array(xs)
    return states, np.array(us).reshape(horizon, abstract.m), states @ abstract.H.T
