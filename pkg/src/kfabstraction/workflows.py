"""End-to-end pipelines behind the command-line tool: build an abstraction
from a model file, verify a controller, run refined simulations and reduce
artifacts."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dare import DareSolution, build_invariant, build_invariant_star, solve_dare
from .errors import (
    Assumption2Violated,
    DareNotPositiveDefinite,
    FlavorMismatch,
    HorizonTooShort,
    NoConvergence,
    NotStabilizing,
    UnsupportedPolicy,
)
from .gaussian import is_pd, max_abs
from .io import AbstractionBundle, ModelBundle, abstraction_to_doc
from .kalman import AbstractModel, IndexMap, build_abstract_time_varying
from .refinement import coupled_simulate
from .system import ObservedSystem, attach_observation, satisfies, satisfies_batch, zero_policy
from .verification import (
    AbstractLoop,
    ProbabilityEstimate,
    RefinedLoop,
    analytic_satisfaction,
    max_satisfaction_bound,
    monte_carlo,
    reduce_states,
    stacked_output_moments,
    trial_draws,
    trial_stream,
)

FLAVOR_NAMES = {
    "time-varying": "time-varying",
    "invariant": "time-invariant",
    "invariant-star": "time-invariant-star",
}
DEFAULT_TRIALS = 10_000
BATCH = 10_000


@dataclass(frozen=True, eq=False)
class Abstraction:
    abstract: AbstractModel
    dare: DareSolution | dict | None = None
    aux: object = None
    reduction: IndexMap | None = None


def observed(model: ModelBundle) -> ObservedSystem:
    return attach_observation(model.system, model.C, model.N)


def build_abstraction(model: ModelBundle, flavor: str = "auto", horizon: int | None = None) -> Abstraction:
    """Construct the requested abstraction.

    ``auto`` prefers a time-invariant model (Sigma0 equal to the DARE
    solution, then Sigma0 - X > 0) and falls back to the time-varying one
    over ``horizon`` (default: the end of the spec window).
    """
    obs = observed(model)
    obs.require_assumption1()
    if flavor == "auto":
        try:
            sol = solve_dare(obs.system.A, obs.C, obs.system.Qw)
        except (NoConvergence, NotStabilizing, DareNotPositiveDefinite):
            sol = None
        if sol is not None:
            S0 = obs.system.Sigma0
            if max_abs(S0 - sol.X) <= 1e-9 * (1.0 + max_abs(sol.X)):
                return Abstraction(build_invariant(obs, sol), sol)
            if is_pd(S0 - sol.X, 1e-9):
                try:
                    model_, aux = build_invariant_star(obs, sol)
                    return Abstraction(model_, sol, aux)
                except Assumption2Violated:
                    pass
        flavor = "time-varying"
        if horizon is None and model.spec is not None:
            horizon = model.spec.interval[1]
    flavor = FLAVOR_NAMES.get(flavor, flavor)
    if flavor == "time-varying":
        if horizon is None:
            raise HorizonTooShort("horizon required: a time-varying abstraction needs --horizon")
        return Abstraction(build_abstract_time_varying(obs, horizon))
    sol = solve_dare(obs.system.A, obs.C, obs.system.Qw)
    if flavor == "time-invariant":
        return Abstraction(build_invariant(obs, sol), sol)
    if flavor == "time-invariant-star":
        model_, aux = build_invariant_star(obs, sol)
        return Abstraction(model_, sol, aux)
    raise FlavorMismatch(f"unknown flavor {flavor!r}")


def abstraction_from_artifact(bundle: AbstractionBundle) -> Abstraction:
    return Abstraction(bundle.abstract, bundle.dare, bundle.aux, bundle.reduction)


def artifact_doc(source: dict, abstraction: Abstraction) -> dict:
    """Serialize an abstraction built from the model whose system and
    observation blocks are ``source``."""
    return abstraction_to_doc(abstraction.abstract, source, dare=abstraction.dare,
                              aux=abstraction.aux, reduction=abstraction.reduction)


def resolve_policy(model: ModelBundle, abstraction: Abstraction):
    """Return ``(policy, state_map)`` for running the model's policy on the
    abstraction; a reduced-state policy gets the reduction's index map."""
    ab = abstraction.abstract
    if model.policy is None:
        return zero_policy(ab.m, ab.n), None
    if model.policy_state == "full":
        if abstraction.reduction is not None:
            raise FlavorMismatch("the policy acts on the full state but the abstraction is reduced")
        return model.policy, None
    if abstraction.reduction is not None:
        return model.policy, None
    _, imap = reduce_states(ab)
    if model.policy.state_dim != len(imap.kept):
        raise FlavorMismatch(
            f"reduced-state policy expects {model.policy.state_dim} states, reduction keeps {len(imap.kept)}")
    return model.policy, imap


@dataclass(eq=False)
class VerifyResult:
    flavor: str
    target: float
    analytic: ProbabilityEstimate | None = None
    bound: ProbabilityEstimate | None = None
    monte_carlo: ProbabilityEstimate | None = None
    verdict: str = ""
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"flavor": self.flavor, "target_probability": self.target, "verdict": self.verdict,
               "warnings": list(self.warnings)}
        for name in ("analytic", "bound", "monte_carlo"):
            est = getattr(self, name)
            out["controller_bound" if name == "bound" else name] = None if est is None else est.to_dict()
        return out

    def render(self, max_rows: int = 5) -> str:
        lines = [f"abstraction: {self.flavor}"]
        if self.analytic is not None:
            a = self.analytic
            lines.append(f"analytic ({a.method}): satisfaction {a.point:.10g}, trajectory violation {a.violation:.4e}")
            if a.method != "analytic-product":
                lines.append(f"  bounds [{a.ci_low:.6g}, {a.ci_high:.6g}]")
            lines += _step_table(a.per_step, max_rows)
        if self.monte_carlo is not None:
            m = self.monte_carlo
            lines.append(f"monte carlo: satisfaction {m.point:.6g}, 95% CI [{m.ci_low:.6g}, {m.ci_high:.6g}], "
                         f"trials {m.trials}, seed {m.seed}")
        if self.bound is not None:
            lines.append(f"controller-independent upper bound: {self.bound.point:.6g}")
        lines += [f"warning: {w}" for w in self.warnings]
        lines.append(f"verdict: {self.verdict}")
        return "\n".join(lines)


def _step_table(rows, max_rows: int) -> list[str]:
    if not rows:
        return []
    viols = [r["violation"] for r in rows]
    if all(v == viols[0] for v in viols):
        return [f"  per-step violation {viols[0]:.4e} at every t in [{rows[0]['t']}, {rows[-1]['t']}]"]
    out = ["  t  probability  violation"]
    shown = rows if len(rows) <= max_rows else rows[:max_rows]
    out += [f"  {r['t']}  {r['probability']:.10g}  {r['violation']:.4e}" for r in shown]
    if len(rows) > len(shown):
        out.append(f"  ... {len(rows) - len(shown)} more rows in the report file")
    return out


def verdict_text(target: float, satisfaction: ProbabilityEstimate | None,
                 bound: ProbabilityEstimate | None) -> str:
    if bound is not None and bound.point < target:
        return (f"target {target:g} NOT achievable with this abstraction "
                f"(no abstract controller exceeds {bound.point:.4g})")
    if satisfaction is None:
        return f"target {target:g}: no satisfaction estimate computed"
    if satisfaction.ci_low >= target:
        return f"target {target:g} achieved (satisfaction {satisfaction.point:.6g})"
    if satisfaction.ci_high < target:
        return (f"target {target:g} not met by this controller (satisfaction {satisfaction.point:.6g}); "
                "the abstraction does not rule it out")
    return (f"target {target:g} inconclusive: interval [{satisfaction.ci_low:.6g}, {satisfaction.ci_high:.6g}] "
            "contains it")


def verify(model: ModelBundle, abstraction: Abstraction, *, analytic: bool = False,
           trials: int | None = None, seed: int | None = None, workers: int = 1) -> VerifyResult:
    """Satisfaction of the model's spec under its policy.

    The exact analytic path runs whenever the policy is linear; Monte Carlo on
    the refined closed loop runs when ``trials`` is given, or by default when
    the analytic path is unavailable or only gives bounds.
    """
    spec = model.spec
    if spec is None:
        raise FlavorMismatch("the model file has no spec block to verify")
    ab = abstraction.abstract
    if not ab.constant and ab.horizon < spec.interval[1]:
        raise HorizonTooShort(f"abstraction covers t <= {ab.horizon}, spec needs t <= {spec.interval[1]}")
    policy, state_map = resolve_policy(model, abstraction)
    result = VerifyResult(ab.flavor, spec.target_probability)
    linear = getattr(policy, "linear", False)
    if analytic and not linear:
        raise UnsupportedPolicy("the analytic path needs a linear policy")
    if linear and spec.is_box:
        stacked = stacked_output_moments(AbstractLoop(ab, policy, state_map), spec.interval[1])
        result.analytic = analytic_satisfaction(stacked, spec)
        if result.analytic.method != "analytic-product":
            result.warnings.append("outputs are correlated across time; the analytic result is a bound only")
    if spec.is_box:
        result.bound = max_satisfaction_bound(ab, spec)
    exact = result.analytic is not None and result.analytic.method == "analytic-product"
    if trials is None and not analytic and not exact:
        trials = DEFAULT_TRIALS
    if trials is not None:
        if abstraction.reduction is not None:
            raise FlavorMismatch("refined simulation needs the full abstraction, not a reduced artifact")
        loop = RefinedLoop(model.system, ab, policy, abstraction.aux, state_map)
        seed = (model.seed or 0) if seed is None else seed
        result.monte_carlo = monte_carlo(loop, spec, trials, seed, workers=workers)
    primary = result.monte_carlo if result.monte_carlo is not None and not exact else result.analytic
    result.verdict = verdict_text(spec.target_probability, primary, result.bound)
    return result


@dataclass(frozen=True)
class SimulationSummary:
    runs: int
    horizon: int
    seed: int
    max_residual: float
    satisfied_fraction: float | None
    csv_files: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"runs": self.runs, "horizon": self.horizon, "seed": self.seed,
                "max_observation_residual": self.max_residual,
                "satisfied_fraction": self.satisfied_fraction, "csv_files": list(self.csv_files)}


def refine_simulate(model: ModelBundle, abstraction: Abstraction, *, horizon: int, runs: int, seed: int,
                    out_dir: Path, max_csv: int | None = None) -> SimulationSummary:
    """Coupled runs of M and the embedded abstract model; run ``i`` uses the
    same random stream as Monte Carlo trial ``i``."""
    if abstraction.reduction is not None:
        raise FlavorMismatch("refined simulation needs the full abstraction, not a reduced artifact")
    ab = abstraction.abstract
    if not ab.constant and ab.horizon < horizon:
        raise HorizonTooShort(f"abstraction covers t <= {ab.horizon}, asked for horizon {horizon}")
    policy, state_map = resolve_policy(model, abstraction)
    spec = model.spec
    check = spec is not None and spec.interval[1] <= horizon
    n_csv = runs if max_csv is None else min(runs, max_csv)
    width = max(5, len(str(runs - 1)))
    if n_csv:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    files, hits, worst = [], 0, 0.0
    # runs without a CSV go through the vectorized rollout, which consumes
    # the same per-run stream and reproduces the session arithmetic exactly
    loop = RefinedLoop(model.system, ab, policy, abstraction.aux, state_map)
    batched = getattr(policy, "linear", False)
    per_run = n_csv if batched else runs
    for i in range(per_run):
        traj = coupled_simulate(model.system, ab, policy, horizon, trial_stream(seed, i),
                                aux=abstraction.aux, state_map=state_map)
        worst = max(worst, float(np.max(traj.residuals)))
        if check:
            hits += satisfies(spec, traj.z)
        if i < n_csv:
            path = Path(out_dir) / f"run_{i:0{width}d}.csv"
            traj.to_csv(path)
            files.append(str(path))
    for start in range(per_run, runs, BATCH):
        stop = min(start + BATCH, runs)
        z, res = loop.rollout_batch(trial_draws(loop, horizon, seed, start, stop), horizon, residuals=True)
        worst = max(worst, float(np.max(res)))
        if check:
            hits += int(np.count_nonzero(satisfies_batch(spec, z)))
    return SimulationSummary(runs, horizon, seed, worst, hits / runs if check else None, tuple(files))


def reduce_abstraction(abstraction: Abstraction) -> tuple[Abstraction, IndexMap]:
    if abstraction.reduction is not None:
        raise FlavorMismatch("artifact is already reduced")
    reduced, imap = reduce_states(abstraction.abstract)
    return Abstraction(reduced, abstraction.dare, abstraction.aux, None if imap.is_identity else imap), imap
