"""Satisfaction probabilities, the stacked output-moment oracle and structural
state reduction.

Closed loops are described by small frozen values (:class:`PlantLoop`,
:class:`AbstractLoop`, :class:`RefinedLoop`, :class:`APrioriLoop`). For
linear policies every closed loop is an affine map of independent Gaussian
primitives, so the joint law of (z(0), ..., z(T)) is available exactly, by
two independent constructions:

* ``method="affine"`` writes each output as c + G xi over the stacked
  primitive vector xi and returns (c, G Lambda G^T);
* ``method="recursion"`` propagates the Markov state's mean and covariance
  and builds cross-time blocks from transition products.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy import stats

from .errors import DimensionMismatch, NonBoxSpec, UnsupportedPolicy
from .gaussian import (
    Gaussian,
    interval_probability,
    interval_violation,
    max_abs,
    pd_solve,
    symmetrize,
)
from .kalman import AbstractModel, APrioriProcess, IndexMap, simulate_abstract
from .refinement import coupled_simulate
from .system import LinearStochasticSystem, Specification, satisfies, satisfies_batch, simulate

__all__ = [
    "PlantLoop",
    "AbstractLoop",
    "RefinedLoop",
    "APrioriLoop",
    "StackedGaussian",
    "ProbabilityEstimate",
    "stacked_output_moments",
    "box_probability",
    "analytic_satisfaction",
    "max_satisfaction_bound",
    "monte_carlo",
    "trial_stream",
    "trial_draws",
    "EquivalenceReport",
    "equivalence_report",
    "compare_stacked",
    "reduce_states",
]

BLOCK_DIAG_TOL = 1e-12


def _linear_terms(policy, t: int, state_map: IndexMap | None):
    if not getattr(policy, "linear", False):
        raise UnsupportedPolicy("analytic moments need a (time-varying) linear policy")
    F = policy.gain_at(t)
    if state_map is not None:
        F = state_map.lift_gain(F)
    return F, policy.offset_at(t)


class _Affine:
    """Affine expressions c + G xi over a growing primitive vector."""

    def __init__(self):
        self.covs: list[np.ndarray] = []
        self.size = 0

    def add(self, cov: np.ndarray) -> slice:
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        s = slice(self.size, self.size + cov.shape[0])
        self.covs.append(cov)
        self.size += cov.shape[0]
        return s

    def basis(self, s: slice, total: int) -> np.ndarray:
        E = np.zeros((s.stop - s.start, total))
        E[:, s] = np.eye(s.stop - s.start)
        return E

    def cov(self) -> np.ndarray:
        return la.block_diag(*self.covs) if self.covs else np.zeros((0, 0))


@dataclass(frozen=True)
class _Markov:
    mean0: np.ndarray
    cov0: np.ndarray
    Phi: list
    d: list
    W: list
    Psi: list


# -- closed loops -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PlantLoop:
    """M under a policy on its own state. ``output`` overrides H (e.g. N @ C)."""

    system: LinearStochasticSystem
    policy: object
    output: np.ndarray | None = None

    @property
    def _H(self):
        return self.system.H if self.output is None else np.atleast_2d(self.output)

    def affine(self, T: int):
        M = self.system
        aff = _Affine()
        s0 = aff.add(M.Sigma0)
        ws = [aff.add(M.Qw) for _ in range(T)]
        k = aff.size
        c, G = M.mu0.copy(), aff.basis(s0, k)
        cs, Gs = [c], [G]
        for t in range(T):
            F, g = _linear_terms(self.policy, t, None)
            c = M.A @ c + M.B @ (F @ c + g)
            G = (M.A + M.B @ F) @ G + aff.basis(ws[t], k)
            cs.append(c)
            Gs.append(G)
        return [self._H @ c for c in cs], [self._H @ G for G in Gs], aff.cov()

    def markov(self, T: int) -> _Markov:
        M = self.system
        Phi, d, W = [], [], []
        for t in range(T):
            F, g = _linear_terms(self.policy, t, None)
            Phi.append(M.A + M.B @ F)
            d.append(M.B @ g)
            W.append(M.Qw)
        return _Markov(M.mu0, M.Sigma0, Phi, d, W, [self._H] * (T + 1))

    def draw_dim(self, T: int) -> int:
        return self.system.n * (T + 1)

    def rollout_batch(self, xi: np.ndarray, T: int) -> np.ndarray:
        M = self.system
        n = M.n
        x = M.mu0 + xi[:, :n] @ M.init.factor.T
        LQ = Gaussian(np.zeros(n), M.Qw).factor
        out = [x @ self._H.T]
        for t in range(T):
            F, g = _linear_terms(self.policy, t, None)
            u = x @ F.T + g
            w = xi[:, n * (t + 1):n * (t + 2)] @ LQ.T
            x = x @ M.A.T + u @ M.B.T + w
            out.append(x @ self._H.T)
        return np.stack(out, axis=1)

    def rollout(self, stream, T: int) -> np.ndarray:
        return simulate(self.system, self.policy, T, stream).states @ self._H.T


@dataclass(frozen=True, eq=False)
class AbstractLoop:
    """Abstract model under a policy on abstract states (projected through
    ``state_map`` when the policy was designed on a reduced model)."""

    abstract: AbstractModel
    policy: object
    state_map: IndexMap | None = None

    def affine(self, T: int):
        ab = self.abstract
        aff = _Affine()
        s0 = aff.add(ab.init.cov)
        vs = [aff.add(ab.innovation_covariance(t + 1)) for t in range(T)]
        k = aff.size
        c, G = ab.mu0.copy(), aff.basis(s0, k)
        cs, Gs = [c], [G]
        for t in range(T):
            F, g = _linear_terms(self.policy, t, self.state_map)
            c = ab.A @ c + ab.B @ (F @ c + g)
            G = (ab.A + ab.B @ F) @ G + ab.gain(t + 1) @ aff.basis(vs[t], k)
            cs.append(c)
            Gs.append(G)
        return [ab.H @ c for c in cs], [ab.H @ G for G in Gs], aff.cov()

    def markov(self, T: int) -> _Markov:
        ab = self.abstract
        Phi, d, W = [], [], []
        for t in range(T):
            F, g = _linear_terms(self.policy, t, self.state_map)
            K = ab.gain(t + 1)
            Phi.append(ab.A + ab.B @ F)
            d.append(ab.B @ g)
            W.append(K @ ab.innovation_covariance(t + 1) @ K.T)
        return _Markov(ab.mu0, ab.init.cov, Phi, d, W, [ab.H] * (T + 1))

    def draw_dim(self, T: int) -> int:
        return self.abstract.n + self.abstract.q * T

    def rollout_batch(self, xi: np.ndarray, T: int) -> np.ndarray:
        ab = self.abstract
        n, q = ab.n, ab.q
        x = ab.mu0 + xi[:, :n] @ ab.init.factor.T
        out = [x @ ab.H.T]
        for t in range(T):
            F, g = _linear_terms(self.policy, t, self.state_map)
            u = x @ F.T + g
            Lv = Gaussian(np.zeros(q), ab.innovation_covariance(t + 1)).factor
            v = xi[:, n + q * t:n + q * (t + 1)] @ Lv.T
            x = x @ ab.A.T + u @ ab.B.T + v @ ab.gain(t + 1).T
            out.append(x @ ab.H.T)
        return np.stack(out, axis=1)

    def rollout(self, stream, T: int) -> np.ndarray:
        return simulate_abstract(self.abstract, self.policy, T, stream, state_map=self.state_map)[2]


@dataclass(frozen=True, eq=False)
class RefinedLoop:
    """M driven by the refined controller (Algorithm 1, or Algorithm 2 when
    ``aux`` is given) built from an abstract policy."""

    system: LinearStochasticSystem
    abstract: AbstractModel
    policy: object
    aux: object = None
    state_map: IndexMap | None = None

    @property
    def alg2(self) -> bool:
        return self.abstract.flavor == "time-invariant-star"

    def _k0(self):
        C, S0 = self.abstract.C, self.system.Sigma0
        return pd_solve(C @ S0 @ C.T, C @ S0, what="C Sigma0 C^T").T

    def affine(self, T: int):
        M, ab = self.system, self.abstract
        C = ab.C
        aff = _Affine()
        s0 = aff.add(M.Sigma0)
        swt = aff.add(self.aux.R) if self.alg2 else None
        ws = [aff.add(M.Qw) for _ in range(T)]
        k = aff.size
        cx, Gx = M.mu0.copy(), aff.basis(s0, k)
        if self.alg2:
            L, K = self.aux.L, ab.gain0
            Gmu = L @ (Gx + aff.basis(swt, k))
            cmu = M.mu0 + L @ (cx - M.mu0)
            cb = cmu + K @ (C @ cx - C @ cmu)
            Gb = Gmu + K @ C @ (Gx - Gmu)
        else:
            K0 = self._k0()
            cb = M.mu0 + K0 @ (C @ cx - C @ M.mu0)
            Gb = K0 @ C @ Gx
        cs, Gs = [cx], [Gx]
        for t in range(T):
            F, g = _linear_terms(self.policy, t, self.state_map)
            cu, Gu = F @ cb + g, F @ Gb
            cx_n = M.A @ cx + M.B @ cu
            Gx_n = M.A @ Gx + M.B @ Gu + aff.basis(ws[t], k)
            cp, Gp = ab.A @ cb + ab.B @ cu, ab.A @ Gb + ab.B @ Gu
            Kt = ab.gain(t + 1)
            cb = cp + Kt @ (C @ cx_n - C @ cp)
            Gb = Gp + Kt @ (C @ Gx_n - C @ Gp)
            cx, Gx = cx_n, Gx_n
            cs.append(cx)
            Gs.append(Gx)
        H = M.H
        return [H @ c for c in cs], [H @ G for G in Gs], aff.cov()

    def markov(self, T: int) -> _Markov:
        M, ab = self.system, self.abstract
        n, C, A, B = M.n, ab.C, M.A, M.B
        # initial joint law of (x(0), xbar(0)) from its primitives
        if self.alg2:
            L, K = self.aux.L, ab.gain0
            I = np.eye(n)
            # xbar0 - mu0 = (I - K C) L (e0 + wt) + K C e0
            Jx = (I - K @ C) @ L + K @ C
            Jw = (I - K @ C) @ L
            G0 = np.block([[I, np.zeros((n, n))], [Jx, Jw]])
            Lam0 = la.block_diag(M.Sigma0, self.aux.R)
        else:
            K0 = self._k0()
            G0 = np.vstack([np.eye(n), K0 @ C])
            Lam0 = M.Sigma0
        cov0 = symmetrize(G0 @ Lam0 @ G0.T)
        mean0 = np.concatenate([M.mu0, M.mu0])
        Phi, d, W = [], [], []
        for t in range(T):
            F, g = _linear_terms(self.policy, t, self.state_map)
            Kt = ab.gain(t + 1)
            KCA = Kt @ C @ A
            Phi.append(np.block([[A, B @ F], [KCA, A + B @ F - KCA]]))
            d.append(np.concatenate([B @ g, B @ g]))
            Gam = np.vstack([np.eye(n), Kt @ C])
            W.append(Gam @ M.Qw @ Gam.T)
        Psi = np.hstack([M.H, np.zeros((M.p, n))])
        return _Markov(mean0, cov0, Phi, d, W, [Psi] * (T + 1))

    def draw_dim(self, T: int) -> int:
        n = self.system.n
        return n * (T + 1) + (n if self.alg2 else 0)

    def rollout_batch(self, xi: np.ndarray, T: int, residuals: bool = False):
        M, ab = self.system, self.abstract
        n, C = M.n, ab.C
        x = M.mu0 + xi[:, :n] @ M.init.factor.T
        off = n
        if self.alg2:
            wt = xi[:, n:2 * n] @ Gaussian(np.zeros(n), self.aux.R).factor.T
            off = 2 * n
            mu_bar = M.mu0 + (x + wt - M.mu0) @ self.aux.L.T
            xb = mu_bar + (x @ C.T - mu_bar @ C.T) @ ab.gain0.T
        else:
            K0 = self._k0()
            xb = M.mu0 + (x @ C.T - M.mu0 @ C.T) @ K0.T
        LQ = Gaussian(np.zeros(n), M.Qw).factor
        out = [x @ M.H.T]
        res = [np.max(np.abs(x @ C.T - xb @ C.T), axis=1)]
        for t in range(T):
            F, g = _linear_terms(self.policy, t, self.state_map)
            u = xb @ F.T + g
            w = xi[:, off + n * t:off + n * (t + 1)] @ LQ.T
            x = x @ M.A.T + u @ M.B.T + w
            y = x @ C.T
            pred = xb @ ab.A.T + u @ ab.B.T
            xb = pred + (y - pred @ C.T) @ ab.gain(t + 1).T
            out.append(x @ M.H.T)
            res.append(np.max(np.abs(y - xb @ C.T), axis=1))
        outputs = np.stack(out, axis=1)
        if residuals:
            return outputs, np.stack(res, axis=1)
        return outputs

    def rollout(self, stream, T: int) -> np.ndarray:
        return coupled_simulate(self.system, self.abstract, self.policy, T, stream,
                                aux=self.aux, state_map=self.state_map).z


@dataclass(frozen=True, eq=False)
class APrioriLoop:
    """A priori innovation process; the policy acts on the a posteriori
    estimate xhat(t) + K(t) v(t)."""

    process: APrioriProcess
    policy: object

    def affine(self, T: int):
        pr = self.process
        if T > pr.horizon:
            raise DimensionMismatch(f"process was built for T <= {pr.horizon}")
        aff = _Affine()
        vs = [aff.add(pr.innovation_cov[t]) for t in range(T + 1)]
        k = aff.size
        NC = pr.N @ pr.C
        c, G = pr.mu0.copy(), np.zeros((pr.mu0.shape[0], k))
        cs, Gs = [], []
        for t in range(T + 1):
            Ev = aff.basis(vs[t], k)
            cs.append(NC @ c)
            Gs.append(NC @ G + pr.N @ Ev)
            if t == T:
                break
            F, g = _linear_terms(self.policy, t, None)
            cpost, Gpost = c, G + pr.gains[t] @ Ev
            c = pr.A @ cpost + pr.B @ (F @ cpost + g)
            G = (pr.A + pr.B @ F) @ Gpost
        return cs, Gs, aff.cov()

    def markov(self, T: int) -> _Markov:
        pr = self.process
        n, q = pr.A.shape[0], pr.C.shape[0]
        mean0 = np.concatenate([pr.mu0, np.zeros(q)])
        cov0 = la.block_diag(np.zeros((n, n)), pr.innovation_cov[0])
        Phi, d, W = [], [], []
        for t in range(T):
            F, g = _linear_terms(self.policy, t, None)
            AF = pr.A + pr.B @ F
            Phi.append(np.block([[AF, AF @ pr.gains[t]], [np.zeros((q, n)), np.zeros((q, q))]]))
            d.append(np.concatenate([pr.B @ g, np.zeros(q)]))
            W.append(la.block_diag(np.zeros((n, n)), pr.innovation_cov[t + 1]))
        Psi = np.hstack([pr.N @ pr.C, pr.N])
        return _Markov(mean0, cov0, Phi, d, W, [Psi] * (T + 1))


# -- stacked moments --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StackedGaussian:
    """Joint law of (z(0), ..., z(T)), time-major."""

    mean: np.ndarray
    cov: np.ndarray
    p: int

    @property
    def horizon(self) -> int:
        return self.mean.shape[0] // self.p - 1 if self.p else 0

    def _idx(self, t: int) -> slice:
        return slice(t * self.p, (t + 1) * self.p)

    def marginal(self, t: int) -> Gaussian:
        s = self._idx(t)
        return Gaussian(self.mean[s], symmetrize(self.cov[s, s]))

    def cross(self, t: int, s: int) -> np.ndarray:
        return self.cov[self._idx(t), self._idx(s)]


def _from_affine(cs, Gs, Lam) -> StackedGaussian:
    p = cs[0].shape[0]
    mean = np.concatenate(cs)
    G = np.vstack(Gs)
    return StackedGaussian(mean, symmetrize(G @ Lam @ G.T), p)


def _from_markov(mk: _Markov) -> StackedGaussian:
    T = len(mk.Phi)
    means, covs = [mk.mean0], [mk.cov0]
    for t in range(T):
        means.append(mk.Phi[t] @ means[-1] + mk.d[t])
        covs.append(symmetrize(mk.Phi[t] @ covs[-1] @ mk.Phi[t].T + mk.W[t]))
    p = mk.Psi[0].shape[0]
    cov = np.zeros(((T + 1) * p, (T + 1) * p))
    for s in range(T + 1):
        block = covs[s]  # Cov(state(t), state(s)) for t = s, s+1, ...
        for t in range(s, T + 1):
            if t > s:
                block = mk.Phi[t - 1] @ block
            c = mk.Psi[t] @ block @ mk.Psi[s].T
            cov[t * p:(t + 1) * p, s * p:(s + 1) * p] = c
            cov[s * p:(s + 1) * p, t * p:(t + 1) * p] = c.T
    mean = np.concatenate([mk.Psi[t] @ means[t] for t in range(T + 1)])
    return StackedGaussian(mean, symmetrize(cov), p)


def stacked_output_moments(loop, horizon: int, method: str = "affine") -> StackedGaussian:
    """Exact mean and covariance of the output trajectory z(0..T)."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if method == "affine":
        return _from_affine(*loop.affine(horizon))
    if method == "recursion":
        return _from_markov(loop.markov(horizon))
    raise ValueError(f"unknown method {method!r}")


# -- probabilities ----------------------------------------------------------

@dataclass(frozen=True)
class ProbabilityEstimate:
    point: float
    ci_low: float
    ci_high: float
    trials: int
    seed: int | None
    method: str
    violation: float
    per_step: tuple = ()
    note: str = ""

    def __post_init__(self):
        if not self.ci_low <= self.point <= self.ci_high:
            raise ValueError("estimate must lie inside its interval")

    def to_dict(self) -> dict:
        return {
            "method": self.method, "estimate": self.point, "violation": self.violation,
            "ci": [self.ci_low, self.ci_high], "trials": self.trials, "seed": self.seed,
            "per_step": [dict(row) for row in self.per_step], "note": self.note,
        }


def _is_diagonal(S: np.ndarray) -> bool:
    off = S - np.diag(np.diag(S))
    return max_abs(off) <= BLOCK_DIAG_TOL * max(max_abs(S), np.finfo(float).tiny)


def box_probability(g: Gaussian, lower, upper) -> tuple[float, float, bool]:
    """``(probability, violation, exact)`` of ``g`` landing in the box.

    Exact for diagonal covariances (product of scalar interval probabilities);
    otherwise uses scipy's numerical multivariate normal CDF.
    """
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    if g.dim == 0:
        return 1.0, 0.0, True
    if _is_diagonal(g.cov):
        probs = [interval_probability(m, v, lo, hi) for m, v, lo, hi in zip(g.mean, np.diag(g.cov), lower, upper)]
        viols = [interval_violation(m, v, lo, hi) for m, v, lo, hi in zip(g.mean, np.diag(g.cov), lower, upper)]
        viol = float(-np.expm1(np.sum(np.log1p(-np.array(viols))))) if all(v < 1 for v in viols) else 1.0
        return float(np.prod(probs)), viol, True
    mvn = stats.multivariate_normal(g.mean, g.cov, allow_singular=True)
    prob = float(np.clip(mvn.cdf(upper, lower_limit=lower), 0.0, 1.0))
    return prob, 1.0 - prob, False


def analytic_satisfaction(stacked: StackedGaussian, spec: Specification) -> ProbabilityEstimate:
    """Exact satisfaction probability when the constrained outputs are
    independent across time; otherwise certified bounds from the marginals."""
    if not spec.is_box:
        raise NonBoxSpec("analytic satisfaction needs a pure box specification (no trajectory predicate)")
    if stacked.p != spec.p:
        raise DimensionMismatch(f"outputs have dimension {stacked.p}, spec expects {spec.p}")
    if stacked.horizon < spec.interval[1]:
        raise DimensionMismatch(f"moments cover t <= {stacked.horizon}, spec needs t <= {spec.interval[1]}")
    rows, probs, viols, exact = [], [], [], True
    for t in spec.steps:
        lo, hi = spec.bounds_at(t)
        prob, viol, ex = box_probability(stacked.marginal(t), lo, hi)
        exact &= ex
        probs.append(prob)
        viols.append(viol)
        rows.append({"t": t, "probability": prob, "violation": viol})
    steps = list(spec.steps)
    independent = True
    scale = max(max_abs(stacked.cov), np.finfo(float).tiny)
    for i, t in enumerate(steps):
        for s in steps[:i]:
            if max_abs(stacked.cross(t, s)) > BLOCK_DIAG_TOL * scale:
                independent = False
                break
        if not independent:
            break
    if independent:
        viol_arr = np.array(viols)
        if np.all(viol_arr < 1):
            violation = float(-np.expm1(np.sum(np.log1p(-viol_arr))))
        else:
            violation = 1.0
        point = float(np.exp(np.sum(np.log(probs)))) if min(probs) > 0 else 0.0
        note = "" if exact else "per-step box probabilities use numerical multivariate normal integration"
        return ProbabilityEstimate(point, point, point, 0, None, "analytic-product", violation, tuple(rows), note)
    lower = max(0.0, 1.0 - float(np.sum(viols)))
    upper = float(min(probs))
    return ProbabilityEstimate(
        lower, lower, upper, 0, None, "analytic-marginal", 1.0 - lower, tuple(rows),
        "outputs are correlated across time: estimate is the union-bound lower bound, "
        "interval is [union bound, smallest marginal]; use Monte Carlo for the joint probability")


def max_satisfaction_bound(abstract: AbstractModel, spec: Specification) -> ProbabilityEstimate:
    """Upper bound on the satisfaction probability over every abstract controller.

    Given the abstract history up to t-1, zbar(t) is Gaussian with covariance
    H K(t) Sigma_v(t) K(t)^T H^T whatever the controller does; the box
    probability of such a law is largest when it is centred on the box.
    zbar(0) is not affected by control at all. Chaining conditional bounds
    gives the product below.
    """
    if not spec.is_box:
        raise NonBoxSpec("the controller-independent bound needs a pure box specification")
    rows, probs = [], []
    for t in spec.steps:
        lo, hi = spec.bounds_at(t)
        if t == 0:
            g = Gaussian(abstract.H @ abstract.mu0, symmetrize(abstract.H @ abstract.init.cov @ abstract.H.T))
        else:
            # coordinates with an infinite side can be pushed away from it at
            # will; only the fully bounded ones limit the probability
            fin = np.flatnonzero(np.isfinite(lo) & np.isfinite(hi))
            HK = abstract.H[fin] @ abstract.gain(t)
            lo, hi = lo[fin], hi[fin]
            g = Gaussian(0.5 * (lo + hi), symmetrize(HK @ abstract.innovation_covariance(t) @ HK.T))
        prob, viol, _ = box_probability(g, lo, hi)
        probs.append(prob)
        rows.append({"t": t, "max_probability": prob})
    point = float(np.exp(np.sum(np.log(probs)))) if min(probs) > 0 else 0.0
    return ProbabilityEstimate(point, point, point, 0, None, "controller-upper-bound", 1.0 - point, tuple(rows),
                               "no controller on this abstraction can exceed this probability")


def trial_stream(seed: int, trial: int) -> np.random.Generator:
    """Independent stream for one Monte Carlo trial, fixed by (seed, trial)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(trial,))))


def _linear_loop(loop) -> bool:
    return hasattr(loop, "rollout_batch") and getattr(loop.policy, "linear", False)


def trial_draws(loop, T: int, seed: int, start: int, stop: int) -> np.ndarray:
    """Standard-normal primitives of trials ``start..stop-1``, one row each.

    A row holds exactly the numbers the per-trial rollout would draw from
    :func:`trial_stream`, in the same order.
    """
    d = loop.draw_dim(T)
    xi = np.empty((stop - start, d))
    for j, i in enumerate(range(start, stop)):
        xi[j] = trial_stream(seed, i).standard_normal(d)
    return xi


def _run_chunk(loop, spec: Specification, T: int, seed: int, start: int, stop: int) -> int:
    if _linear_loop(loop):
        xi = trial_draws(loop, T, seed, start, stop)
        return int(np.count_nonzero(satisfies_batch(spec, loop.rollout_batch(xi, T))))
    return sum(satisfies(spec, loop.rollout(trial_stream(seed, i), T)) for i in range(start, stop))


def monte_carlo(loop, spec: Specification, trials: int, seed: int, *, horizon: int | None = None,
                chunk: int = 10_000, workers: int = 1) -> ProbabilityEstimate:
    """Seeded rollouts with an exact (Clopper-Pearson) 95% interval.

    Trial ``i`` always uses :func:`trial_stream` (seed, i), so the result does
    not depend on ``chunk`` or ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    T = spec.interval[1] if horizon is None else horizon
    bounds = [(a, min(a + chunk, trials)) for a in range(0, trials, chunk)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(lambda b: _run_chunk(loop, spec, T, seed, *b), bounds))
    else:
        counts = [_run_chunk(loop, spec, T, seed, *b) for b in bounds]
    k = int(sum(counts))
    ci = stats.binomtest(k, trials).proportion_ci(confidence_level=0.95, method="exact")
    point = k / trials
    return ProbabilityEstimate(point, float(min(ci.low, point)), float(max(ci.high, point)), trials, seed,
                               "monte-carlo", 1.0 - point)


# -- equivalence ------------------------------------------------------------

@dataclass(frozen=True)
class EquivalenceReport:
    passed: bool
    mean_deviation: float
    cov_deviation: float
    tol: float

    @property
    def worst(self) -> float:
        return max(self.mean_deviation, self.cov_deviation)


def compare_stacked(a: StackedGaussian, b: StackedGaussian, tol: float = 1e-8) -> EquivalenceReport:
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch("stacked laws have different layouts")
    mean_dev = max_abs(a.mean - b.mean) / (1.0 + max(max_abs(a.mean), max_abs(b.mean)))
    denom = max(np.linalg.norm(a.cov), np.linalg.norm(b.cov), np.finfo(float).tiny)
    cov_dev = float(np.linalg.norm(a.cov - b.cov) / denom)
    return EquivalenceReport(mean_dev <= tol and cov_dev <= tol, float(mean_dev), cov_dev, tol)


def equivalence_report(loop_a, loop_b, horizon: int, tol: float = 1e-8) -> EquivalenceReport:
    """Compare the output laws of two closed loops: scaled max deviation of the
    means and relative Frobenius deviation of the covariances."""
    return compare_stacked(stacked_output_moments(loop_a, horizon), stacked_output_moments(loop_b, horizon), tol)


# -- state reduction --------------------------------------------------------

def reduce_states(abstract: AbstractModel, atol: float = 0.0) -> tuple[AbstractModel, IndexMap]:
    """Remove the largest set of states that are almost surely zero forever.

    A state i can be removed when its initial mean and variance vanish, no
    input or innovation reaches it, and it is driven only by states that are
    removed too (greatest fixpoint).
    """
    ab = abstract
    n = ab.n
    zero = lambda a: bool(np.all(np.abs(a) <= atol))
    S = {
        i for i in range(n)
        if zero(ab.mu0[i]) and zero(ab.init.cov[i]) and zero(ab.init.cov[:, i])
        and zero(ab.B[i]) and zero(ab.gains[:, i, :]) and zero(ab.gain0[i])
    }
    changed = True
    while changed:
        changed = False
        for i in sorted(S):
            if any(not zero(ab.A[i, j]) for j in range(n) if j not in S):
                S.discard(i)
                changed = True
    kept = tuple(i for i in range(n) if i not in S)
    idx = list(kept)
    reduced = AbstractModel(
        A=ab.A[np.ix_(idx, idx)], B=ab.B[idx], H=ab.H[:, idx], C=ab.C[:, idx], N=ab.N,
        init=Gaussian(ab.mu0[idx], ab.init.cov[np.ix_(idx, idx)]),
        gains=ab.gains[:, idx, :], innovation_cov=ab.innovation_cov, gain0=ab.gain0[idx],
        flavor=ab.flavor, constant=ab.constant,
    )
    return reduced, IndexMap(kept, n)
