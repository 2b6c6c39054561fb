"""Original model M, the knowledge-filtered pairing (C, N), policies,
trajectories and bounded-horizon box specifications."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    Assumption1Violated,
    DimensionMismatch,
    FactorizationMismatch,
    HorizonTooShort,
    InvalidCovariance,
    InvalidInterval,
    NotAReduction,
    OutOfSchedule,
)
from .gaussian import Gaussian, is_pd, is_psd, max_abs, min_eig, sample

__all__ = [
    "LinearStochasticSystem",
    "ObservationStructure",
    "ObservedSystem",
    "attach_observation",
    "Specification",
    "satisfies",
    "LinearPolicy",
    "TimeVaryingLinearPolicy",
    "BlackBoxPolicy",
    "History",
    "zero_policy",
    "Trajectory",
    "simulate",
]


def _matrix(m, name: str, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    a = np.array(m, dtype=float)
    if a.ndim == 1 and rows == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got shape {a.shape}")
    if rows is not None and a.shape[0] != rows:
        raise DimensionMismatch(f"{name} has {a.shape[0]} rows, expected {rows}")
    if cols is not None and a.shape[1] != cols:
        raise DimensionMismatch(f"{name} has {a.shape[1]} columns, expected {cols}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LinearStochasticSystem:
    """x(t+1) = A x(t) + B u(t) + w(t),  z(t) = H x(t),
    w ~ N(0, Qw) i.i.d., x(0) ~ init."""

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    Qw: np.ndarray
    init: Gaussian

    def __post_init__(self):
        A = _matrix(self.A, "A")
        n = A.shape[0]
        if A.shape[1] != n:
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(n, -1)
        B = _matrix(B, "B", rows=n)
        H = _matrix(self.H, "H", cols=n)
        Qw = _matrix(self.Qw, "Qw", rows=n, cols=n)
        if not is_psd(Qw):
            raise InvalidCovariance("Qw is not positive semidefinite")
        init = self.init
        if not isinstance(init, Gaussian):
            init = Gaussian(*init)
        if init.dim != n:
            raise DimensionMismatch(f"initial law has dimension {init.dim}, expected {n}")
        for name, value in (("A", A), ("B", B), ("H", H), ("Qw", Qw), ("init", init)):
            object.__setattr__(self, name, value)

    @classmethod
    def from_arrays(cls, A, B, H, Qw, mu0, Sigma0) -> "LinearStochasticSystem":
        return cls(A, B, H, Qw, Gaussian(mu0, Sigma0))

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
    def mu0(self) -> np.ndarray:
        return self.init.mean

    @property
    def Sigma0(self) -> np.ndarray:
        return self.init.cov

    def replace(self, **changes) -> "LinearStochasticSystem":
        fields = dict(A=self.A, B=self.B, H=self.H, Qw=self.Qw, init=self.init)
        if "mu0" in changes or "Sigma0" in changes:
            fields["init"] = Gaussian(changes.pop("mu0", self.mu0), changes.pop("Sigma0", self.Sigma0))
        fields.update(changes)
        return LinearStochasticSystem(**fields)


@dataclass(frozen=True, eq=False)
class ObservationStructure:
    """Knowledge filter y = C x with N C = H."""

    C: np.ndarray
    N: np.ndarray

    @property
    def q(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True, eq=False)
class ObservedSystem:
    """M paired with a validated knowledge filter (the partially observed M_Obs)."""

    system: LinearStochasticSystem
    obs: ObservationStructure
    assumption1: bool
    assumption1_detail: str

    @property
    def C(self) -> np.ndarray:
        return self.obs.C

    @property
    def N(self) -> np.ndarray:
        return self.obs.N

    @property
    def q(self) -> int:
        return self.obs.q

    def require_assumption1(self) -> None:
        if not self.assumption1:
            raise Assumption1Violated(self.assumption1_detail)


def attach_observation(system: LinearStochasticSystem, C, N, *,
                       require_reduction: bool = True) -> ObservedSystem:
    """Validate ``N C = H`` and ``q < n``; report (not enforce) Assumption 1,
    i.e. C Sigma0 C^T > 0 and C Qw C^T > 0.

    ``require_reduction=False`` admits q >= n, which is only useful for tests
    of degenerate filters.
    """
    C = _matrix(C, "C", cols=system.n)
    q = C.shape[0]
    N = np.array(N, dtype=float)
    if N.ndim == 0 or (N.ndim == 1 and system.p == 1):
        N = N.reshape(system.p, -1)
    N = _matrix(N, "N", rows=system.p, cols=q)
    if require_reduction and q >= system.n:
        raise NotAReduction(f"observation dimension q={q} is not smaller than state dimension n={system.n}")
    mismatch = max_abs(N @ C - system.H)
    if mismatch > 1e-10 * (1.0 + max_abs(system.H)):
        raise FactorizationMismatch(f"N C differs from H by {mismatch:.3e} (max-norm)")
    s0 = C @ system.Sigma0 @ C.T
    sq = C @ system.Qw @ C.T
    ok0, okq = is_pd(s0), is_pd(sq)
    detail = (f"Assumption 1 {'holds' if ok0 and okq else 'violated'}: "
              f"min eig(C Sigma0 C^T) = {min_eig(s0):.6g}, min eig(C Qw C^T) = {min_eig(sq):.6g}")
    return ObservedSystem(system, ObservationStructure(C, N), ok0 and okq, detail)


def _bounds_array(values, p: int, steps: int, name: str) -> np.ndarray:
    a = np.array(values, dtype=float)
    if a.ndim == 0:
        a = np.full(p, float(a))
    if a.ndim == 1:
        if a.shape[0] != p:
            raise DimensionMismatch(f"{name} has length {a.shape[0]}, expected output dimension {p}")
        a = np.broadcast_to(a, (steps, p))
    if a.shape != (steps, p):
        raise DimensionMismatch(f"{name} must have shape ({steps}, {p}), got {a.shape}")
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Specification:
    """Closed per-step output boxes on the inclusive window [t_lo, t_hi].

    ``lower``/``upper`` are either one bound vector reused on every step or
    one row per step of the window. An optional ``predicate`` on the whole
    output trajectory must also hold.
    """

    interval: tuple[int, int]
    lower: np.ndarray
    upper: np.ndarray
    target_probability: float = 0.0
    predicate: Callable[[np.ndarray], bool] | None = None

    def __post_init__(self):
        t_lo, t_hi = (int(t) for t in self.interval)
        if t_lo < 0 or t_lo > t_hi:
            raise InvalidInterval(f"invalid time window [{t_lo}, {t_hi}]")
        steps = t_hi - t_lo + 1
        lo = np.array(self.lower, dtype=float)
        p = lo.shape[-1] if lo.ndim else np.array(self.upper, dtype=float).reshape(-1).shape[0]
        lower = _bounds_array(self.lower, p, steps, "lower")
        upper = _bounds_array(self.upper, p, steps, "upper")
        if np.any(lower > upper):
            raise InvalidInterval("a lower bound exceeds its upper bound")
        if not 0.0 <= float(self.target_probability) <= 1.0:
            raise ValueError("target_probability must lie in [0, 1]")
        object.__setattr__(self, "interval", (t_lo, t_hi))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "target_probability", float(self.target_probability))

    @property
    def p(self) -> int:
        return self.lower.shape[1]

    @property
    def steps(self) -> range:
        return range(self.interval[0], self.interval[1] + 1)

    def bounds_at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        k = t - self.interval[0]
        return self.lower[k], self.upper[k]

    @property
    def is_box(self) -> bool:
        return self.predicate is None


def satisfies(spec: Specification, outputs) -> bool:
    z = np.asarray(outputs, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if z.shape[0] <= spec.interval[1]:
        raise HorizonTooShort(f"trajectory has {z.shape[0]} outputs, spec needs t <= {spec.interval[1]}")
    window = z[spec.interval[0]:spec.interval[1] + 1]
    if window.shape[1] != spec.p:
        raise DimensionMismatch(f"outputs have dimension {window.shape[1]}, spec expects {spec.p}")
    ok = bool(np.all((window >= spec.lower) & (window <= spec.upper)))
    if ok and spec.predicate is not None:
        ok = bool(spec.predicate(z))
    return ok


def satisfies_batch(spec: Specification, outputs: np.ndarray) -> np.ndarray:
    """Vectorised :func:`satisfies` over outputs of shape (trials, T+1, p)."""
    if outputs.shape[1] <= spec.interval[1]:
        raise HorizonTooShort(f"trajectories have {outputs.shape[1]} outputs, spec needs t <= {spec.interval[1]}")
    window = outputs[:, spec.interval[0]:spec.interval[1] + 1]
    ok = np.all((window >= spec.lower) & (window <= spec.upper), axis=(1, 2))
    if spec.predicate is not None:
        ok = np.array([bool(o) and bool(spec.predicate(z)) for o, z in zip(ok, outputs)])
    return ok


# -- policies ---------------------------------------------------------------

@dataclass
class History:
    """Past states and inputs seen by a policy; ``states`` has one more entry
    than ``inputs``."""

    states: list[np.ndarray] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.states) - 1


@dataclass(frozen=True, eq=False)
class LinearPolicy:
    """u = gain @ state + offset, constant in time."""

    gain: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        gain = np.array(self.gain, dtype=float)
        if gain.ndim == 1:
            gain = gain.reshape(1, -1)
        offset = np.zeros(gain.shape[0]) if self.offset is None else np.array(self.offset, dtype=float).reshape(-1)
        if offset.shape[0] != gain.shape[0]:
            raise DimensionMismatch("offset length must equal the number of gain rows")
        gain.setflags(write=False)
        offset.setflags(write=False)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "offset", offset)

    linear = True

    @property
    def input_dim(self) -> int:
        return self.gain.shape[0]

    @property
    def state_dim(self) -> int:
        return self.gain.shape[1]

    def gain_at(self, t: int) -> np.ndarray:
        return self.gain

    def offset_at(self, t: int) -> np.ndarray:
        return self.offset

    def __call__(self, t: int, state: np.ndarray, history: History | None = None) -> np.ndarray:
        return self.gain @ state + self.offset


@dataclass(frozen=True, eq=False)
class TimeVaryingLinearPolicy:
    """u(t) = gains[t] @ state + offsets[t] for t < len(gains)."""

    gains: tuple
    offsets: tuple | None = None

    def __post_init__(self):
        gains = tuple(np.atleast_2d(np.array(g, dtype=float)) for g in self.gains)
        if not gains:
            raise ValueError("empty gain schedule")
        if len({g.shape for g in gains}) != 1:
            raise DimensionMismatch("all scheduled gains must share one shape")
        if self.offsets is None:
            offsets = tuple(np.zeros(gains[0].shape[0]) for _ in gains)
        else:
            offsets = tuple(np.array(o, dtype=float).reshape(-1) for o in self.offsets)
        if len(offsets) != len(gains) or any(o.shape[0] != gains[0].shape[0] for o in offsets):
            raise DimensionMismatch("offset schedule does not match the gain schedule")
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "offsets", offsets)

    linear = True

    @property
    def input_dim(self) -> int:
        return self.gains[0].shape[0]

    @property
    def state_dim(self) -> int:
        return self.gains[0].shape[1]

    def gain_at(self, t: int) -> np.ndarray:
        if t >= len(self.gains):
            raise OutOfSchedule(f"policy schedule has {len(self.gains)} steps, asked for t={t}")
        return self.gains[t]

    def offset_at(self, t: int) -> np.ndarray:
        if t >= len(self.offsets):
            raise OutOfSchedule(f"policy schedule has {len(self.offsets)} steps, asked for t={t}")
        return self.offsets[t]

    def __call__(self, t: int, state: np.ndarray, history: History | None = None) -> np.ndarray:
        return self.gain_at(t) @ state + self.offset_at(t)


@dataclass(frozen=True, eq=False)
class BlackBoxPolicy:
    """Arbitrary history-dependent policy: ``fn(history) -> input``."""

    fn: Callable[[History], np.ndarray]
    input_dim: int

    linear = False
    state_dim = None

    def __call__(self, t: int, state: np.ndarray, history: History | None = None) -> np.ndarray:
        return np.asarray(self.fn(history), dtype=float).reshape(self.input_dim)


def zero_policy(m: int, state_dim: int) -> LinearPolicy:
    return LinearPolicy(np.zeros((m, state_dim)))


def check_policy(policy, m: int, state_dim: int) -> None:
    if policy.input_dim != m:
        raise DimensionMismatch(f"policy produces {policy.input_dim} inputs, system takes {m}")
    if policy.state_dim is not None and policy.state_dim != state_dim:
        raise DimensionMismatch(f"policy gain acts on {policy.state_dim} states, expected {state_dim}")


# -- trajectories -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray          # (T+1, n)
    inputs: np.ndarray          # (T, m)
    outputs: np.ndarray         # (T+1, p)
    noises: np.ndarray          # (T, n)
    observations: np.ndarray | None = None

    def __post_init__(self):
        T = self.inputs.shape[0]
        if self.states.shape[0] != T + 1 or self.outputs.shape[0] != T + 1 or self.noises.shape[0] != T:
            raise DimensionMismatch("inconsistent trajectory lengths")

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def simulate(system: LinearStochasticSystem, policy, horizon: int,
             stream: np.random.Generator, C=None) -> Trajectory:
    """Roll M forward under a policy over M's own state history.

    Draw order: x(0) first, then w(t) after u(t) for each step.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    check_policy(policy, system.m, system.n)
    noise = Gaussian(np.zeros(system.n), system.Qw)
    x = sample(system.init, stream)
    hist = History(states=[x])
    us, ws = [], []
    for t in range(horizon):
        u = policy(t, x, hist)
        w = sample(noise, stream)
        x = system.A @ x + system.B @ u + w
        hist.inputs.append(u)
        hist.states.append(x)
        us.append(u)
        ws.append(w)
    states = np.array(hist.states)
    return Trajectory(
        states=states,
        inputs=np.array(us).reshape(horizon, system.m),
        outputs=states @ system.H.T,
        noises=np.array(ws).reshape(horizon, system.n),
        observations=None if C is None else states @ np.asarray(C).T,
    )
