"""Controller refinement: run an abstract-model controller on the original
system by embedding the abstract state and driving it with the observations
y(t) = C x(t).

The session is split into :meth:`RefinementSession.next_input` and
:meth:`RefinementSession.advance` so the caller owns the plant.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FlavorMismatch
from .gaussian import Gaussian, max_abs, pd_solve, sample
from .kalman import AbstractModel, IndexMap
from .system import History, LinearStochasticSystem, check_policy

__all__ = [
    "RefinementSession",
    "start_alg1",
    "start_alg2",
    "start_session",
    "CoupledTrajectory",
    "coupled_simulate",
]

CONSISTENCY_TOL = 1e-9


class RefinementSession:
    """Live embedded abstract state of a refined controller.

    The abstract policy only ever sees abstract quantities: the current
    (possibly projected) abstract state and, for black-box policies, the
    abstract history.
    """

    def __init__(self, mode: str, system: LinearStochasticSystem, abstract: AbstractModel, policy,
                 xbar0: np.ndarray, y0: np.ndarray, aux=None, state_map: IndexMap | None = None):
        self.mode = mode
        self.system = system
        self.abstract = abstract
        self.policy = policy
        self.aux = aux
        self.state_map = state_map
        self.t = 0
        self.xbar = np.asarray(xbar0, dtype=float)
        self.history = History(states=[self._policy_state(self.xbar)])
        self._pending_u: np.ndarray | None = None
        self.max_residual = 0.0
        self.residuals = [self._check(y0)]

    def _policy_state(self, xbar: np.ndarray) -> np.ndarray:
        return xbar if self.state_map is None else self.state_map.project(xbar)

    def _check(self, y: np.ndarray) -> float:
        r = max_abs(self.abstract.C @ self.xbar - y)
        self.max_residual = max(self.max_residual, r)
        return r

    def next_input(self) -> np.ndarray:
        """Abstract input u(t), applied unchanged to the plant."""
        u = self.policy(self.t, self.history.states[-1], self.history)
        self._pending_u = np.asarray(u, dtype=float)
        return self._pending_u

    def advance(self, x_next) -> "RefinementSession":
        """Consume the plant's next state through y(t+1) = C x(t+1)."""
        if self._pending_u is None:
            raise RuntimeError("next_input() must be called before advance()")
        ab = self.abstract
        u = self._pending_u
        K = ab.gain(self.t + 1)
        y = ab.C @ np.asarray(x_next, dtype=float)
        pred = ab.A @ self.xbar + ab.B @ u
        v = y - ab.C @ pred
        self.xbar = pred + K @ v
        self.t += 1
        self.history.inputs.append(u)
        self.history.states.append(self._policy_state(self.xbar))
        self._pending_u = None
        self.residuals.append(self._check(y))
        return self


def _check_session_dims(system, abstract, policy, state_map):
    if abstract.n != system.n or abstract.m != system.m:
        raise FlavorMismatch("abstract model dimensions do not match the system")
    check_policy(policy, abstract.m, abstract.n if state_map is None else len(state_map.kept))


def start_alg1(system: LinearStochasticSystem, abstract: AbstractModel, policy, x0,
               state_map: IndexMap | None = None) -> RefinementSession:
    """xbar(0) = mu0 + K(0) (C x(0) - C mu0) with K(0) from Sigma0."""
    if abstract.flavor not in ("time-varying", "time-invariant"):
        raise FlavorMismatch(f"Algorithm 1 needs a time-varying or time-invariant abstraction, got {abstract.flavor}")
    _check_session_dims(system, abstract, policy, state_map)
    C = abstract.C
    S0 = system.Sigma0
    K0 = pd_solve(C @ S0 @ C.T, C @ S0, what="C Sigma0 C^T").T
    x0 = np.asarray(x0, dtype=float)
    mu0 = system.mu0
    xbar0 = mu0 + K0 @ (C @ x0 - C @ mu0)
    return RefinementSession("alg1", system, abstract, policy, xbar0, C @ x0, state_map=state_map)


def start_alg2(system: LinearStochasticSystem, abstract: AbstractModel, aux, policy, x0,
               stream: np.random.Generator | None = None, *, w_tilde=None,
               state_map: IndexMap | None = None) -> RefinementSession:
    """Initialise with the auxiliary measurement; draws wtilde ~ N(0, R) from
    ``stream`` unless ``w_tilde`` is forced."""
    if abstract.flavor != "time-invariant-star":
        raise FlavorMismatch(f"Algorithm 2 needs a time-invariant-star abstraction, got {abstract.flavor}")
    _check_session_dims(system, abstract, policy, state_map)
    if w_tilde is None:
        if stream is None:
            raise ValueError("a random stream is required to draw wtilde")
        w_tilde = sample(Gaussian(np.zeros(system.n), aux.R), stream)
    x0 = np.asarray(x0, dtype=float)
    mu0 = system.mu0
    C = abstract.C
    mu_bar = mu0 + aux.L @ (x0 + np.asarray(w_tilde, dtype=float) - mu0)
    xbar0 = mu_bar + abstract.gain0 @ (C @ x0 - C @ mu_bar)
    session = RefinementSession("alg2", system, abstract, policy, xbar0, C @ x0, aux=aux, state_map=state_map)
    session.w_tilde = np.asarray(w_tilde, dtype=float)
    return session


def start_session(system, abstract, policy, x0, stream=None, aux=None, state_map=None) -> RefinementSession:
    """Pick Algorithm 1 or 2 from the abstraction flavor."""
    if abstract.flavor == "time-invariant-star":
        if aux is None:
            raise FlavorMismatch("time-invariant-star abstraction requires its auxiliary measurement")
        return start_alg2(system, abstract, aux, policy, x0, stream, state_map=state_map)
    return start_alg1(system, abstract, policy, x0, state_map=state_map)


@dataclass(frozen=True, eq=False)
class CoupledTrajectory:
    x: np.ndarray       # (T+1, n)
    xbar: np.ndarray    # (T+1, n)
    u: np.ndarray       # (T, m)
    ubar: np.ndarray    # (T, m), abstract inputs as produced by the policy
    z: np.ndarray       # (T+1, p)
    zbar: np.ndarray    # (T+1, p)
    residuals: np.ndarray  # (T+1,) |C x(t) - C xbar(t)|_inf

    @property
    def horizon(self) -> int:
        return self.u.shape[0]

    def to_csv(self, path=None) -> str:
        """Time-major CSV; the input columns are empty on the final row."""
        n, m, p = self.x.shape[1], self.u.shape[1], self.z.shape[1]
        header = (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"xbar_{i + 1}" for i in range(n)]
                  + [f"u_{i + 1}" for i in range(m)] + [f"z_{i + 1}" for i in range(p)]
                  + [f"zbar_{i + 1}" for i in range(p)])
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for t in range(self.horizon + 1):
            u = [repr(float(v)) for v in self.u[t]] if t < self.horizon else [""] * m
            writer.writerow([t] + [repr(float(v)) for v in self.x[t]] + [repr(float(v)) for v in self.xbar[t]]
                            + u + [repr(float(v)) for v in self.z[t]] + [repr(float(v)) for v in self.zbar[t]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def coupled_simulate(system: LinearStochasticSystem, abstract: AbstractModel, policy, horizon: int,
                     stream: np.random.Generator, aux=None, state_map: IndexMap | None = None) -> CoupledTrajectory:
    """Drive M with the refined controller and record both output sequences.

    Draw order: x(0), then wtilde (Algorithm 2 only), then w(t) per step.
    """
    x = sample(system.init, stream)
    session = start_session(system, abstract, policy, x, stream, aux=aux, state_map=state_map)
    noise = Gaussian(np.zeros(system.n), system.Qw)
    xs, xbars, us, ubars = [x], [session.xbar], [], []
    for _ in range(horizon):
        ubar = session.next_input()
        u = ubar
        w = sample(noise, stream)
        x = system.A @ x + system.B @ u + w
        session.advance(x)
        xs.append(x)
        xbars.append(session.xbar)
        us.append(u)
        ubars.append(ubar)
    X, Xbar = np.array(xs), np.array(xbars)
    m = system.m
    return CoupledTrajectory(
        x=X, xbar=Xbar, u=np.array(us).reshape(horizon, m), ubar=np.array(ubars).reshape(horizon, m),
        z=X @ system.H.T, zbar=Xbar @ abstract.H.T, residuals=np.array(session.residuals),
    )
