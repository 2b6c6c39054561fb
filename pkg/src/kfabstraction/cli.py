"""Command-line entry point ``kfabs``.

Every run writes ``manifest.json`` into its output directory. Failures print
one line ``ERROR[CODE]: message`` on stderr and exit with the error class's
code (2 for usage errors).
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import ArtifactMismatch, KFAError
from .io import check_artifact_matches, load_abstraction, load_example, load_model, source_diff, write_json
from .reproduce import reproduce
from .workflows import (
    FLAVOR_NAMES,
    abstraction_from_artifact,
    artifact_doc,
    build_abstraction,
    reduce_abstraction,
    refine_simulate,
    verify,
)

USAGE_EXIT = 2
REPRODUCE_FAIL_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _nonnegative(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kfabs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out-dir", type=Path, default=Path("kfabs-out"), help="output directory (created)")

    flavors = ["auto", *FLAVOR_NAMES]

    p = sub.add_parser("abstract", help="build an abstraction artifact from a model file")
    p.add_argument("model", type=Path)
    p.add_argument("--flavor", choices=flavors, default="auto")
    p.add_argument("--horizon", type=_nonnegative, help="schedule length (time-varying flavor)")
    common(p)

    p = sub.add_parser("verify", help="satisfaction probability of the model's spec under its policy")
    p.add_argument("model", type=Path)
    p.add_argument("--abstraction", type=Path, help="artifact to use instead of building one")
    p.add_argument("--flavor", choices=flavors, default="auto")
    p.add_argument("--horizon", type=_nonnegative)
    p.add_argument("--analytic", action="store_true", help="analytic path only (linear policies)")
    p.add_argument("--trials", type=_positive, help="Monte Carlo rollouts of the refined closed loop")
    p.add_argument("--seed", type=_nonnegative)
    p.add_argument("--workers", type=_positive, default=1)
    common(p)

    p = sub.add_parser("refine-simulate", help="coupled runs of the system and the embedded abstract model")
    p.add_argument("model", type=Path)
    p.add_argument("abstraction", type=Path)
    p.add_argument("--horizon", type=_nonnegative)
    p.add_argument("--runs", type=_positive, default=1)
    p.add_argument("--seed", type=_nonnegative)
    p.add_argument("--max-csv", type=_nonnegative, help="write CSV files for at most this many runs")
    common(p)

    p = sub.add_parser("reduce", help="remove abstract states that are identically zero")
    p.add_argument("abstraction", type=Path)
    common(p)

    p = sub.add_parser("reproduce", help="re-run one of the bundled examples and check its numbers")
    p.add_argument("example", type=int, choices=(1, 2, 3))
    p.add_argument("--trials", type=_positive, default=100_000)
    p.add_argument("--seed", type=_nonnegative)
    common(p)
    return parser


def _file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Run:
    """Collects outputs and writes the run manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = argv
        self.started = datetime.now(timezone.utc).isoformat()
        self.outputs: list[str] = []
        self.seed = None
        self.extra: dict = {}
        self.out_dir: Path = args.out_dir

    def write(self, name: str, doc: dict) -> Path:
        path = write_json(self.out_dir / name, doc)
        self.outputs.append(str(path))
        return path

    def manifest(self, status: str, error: KFAError | None = None) -> None:
        inputs = {}
        for key in ("model", "abstraction"):
            path = getattr(self.args, key, None)
            if path is not None and Path(path).is_file():
                inputs[str(path)] = _file_hash(path)
        doc = {
            "command": self.args.command, "argv": list(self.argv), "status": status,
            "inputs": inputs, "seed": self.seed, "tool_version": __version__,
            "started": self.started, "finished": datetime.now(timezone.utc).isoformat(),
            "outputs": self.outputs,
        }
        if error is not None:
            doc["error"] = {"code": error.code, "message": str(error)}
        doc.update(self.extra)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            write_json(self.out_dir / "manifest.json", doc)
        except OSError:
            pass


def _cmd_abstract(args, run: _Run) -> int:
    if args.flavor == "time-varying" and args.horizon is None:
        raise _UsageError("horizon required: --flavor time-varying needs --horizon")
    model = load_model(args.model)
    ab = build_abstraction(model, args.flavor, args.horizon)
    run.write("abstraction.json", artifact_doc(model.source, ab))
    a = ab.abstract
    print(f"abstraction: {a.flavor}, n = {a.n}, noise dimension q = {a.q}")
    if ab.dare is not None:
        print(f"DARE: {ab.dare.iterations} iterations, residual {ab.dare.residual:.3g}, "
              f"spectral radius {ab.dare.spectral_radius:.3g}")
    print(f"wrote {run.outputs[-1]}")
    return 0


def _load_matching(args, run: _Run, model):
    bundle = load_abstraction(args.abstraction)
    try:
        check_artifact_matches(bundle, model)
    except ArtifactMismatch:
        run.extra["source_diff"] = {"artifact_model_hash": bundle.model_hash, "model_hash": model.model_hash,
                                    "differing_fields": source_diff(bundle.source, model.source)}
        raise
    return abstraction_from_artifact(bundle)


def _cmd_verify(args, run: _Run) -> int:
    if args.flavor == "time-varying" and args.horizon is None and args.abstraction is None:
        raise _UsageError("horizon required: --flavor time-varying needs --horizon")
    model = load_model(args.model)
    if args.abstraction is not None:
        ab = _load_matching(args, run, model)
    else:
        ab = build_abstraction(model, args.flavor, args.horizon)
    result = verify(model, ab, analytic=args.analytic, trials=args.trials, seed=args.seed, workers=args.workers)
    if result.monte_carlo is not None:
        run.seed = result.monte_carlo.seed
    run.write("report.json", {"command": "verify", **result.to_dict()})
    print(result.render())
    return 0


def _cmd_refine(args, run: _Run) -> int:
    model = load_model(args.model)
    ab = _load_matching(args, run, model)
    horizon = args.horizon
    if horizon is None:
        horizon = model.spec.interval[1] if model.spec is not None else 100
    seed = (model.seed or 0) if args.seed is None else args.seed
    run.seed = seed
    summary = refine_simulate(model, ab, horizon=horizon, runs=args.runs, seed=seed,
                              out_dir=run.out_dir, max_csv=args.max_csv)
    run.outputs.extend(summary.csv_files)
    run.write("summary.json", {"command": "refine-simulate", "flavor": ab.abstract.flavor, **summary.to_dict()})
    print(f"runs {summary.runs}, horizon {summary.horizon}, seed {summary.seed}")
    print(f"max observation residual |C x - C xbar| = {summary.max_residual:.3g}")
    if summary.satisfied_fraction is not None:
        print(f"empirical satisfaction {summary.satisfied_fraction:.6g}")
    print(f"wrote {len(summary.csv_files)} CSV file(s) to {run.out_dir}")
    return 0


def _cmd_reduce(args, run: _Run) -> int:
    bundle = load_abstraction(args.abstraction)
    ab = abstraction_from_artifact(bundle)
    reduced, imap = reduce_abstraction(ab)
    if imap.is_identity:
        print("no reducible states")
    else:
        print(f"removed states {[i + 1 for i in imap.removed]} (1-based); "
              f"map {', '.join(f'{k}->{v}' for k, v in imap.to_dict()['map'].items()) or 'empty'}")
    if not imap.kept:
        print("warning: every state was removed; the reduced model has 0 states and its output is identically 0",
              file=sys.stderr)
    run.write("abstraction_reduced.json", artifact_doc(bundle.source, reduced))
    run.write("index_map.json", imap.to_dict())
    print(f"wrote {', '.join(run.outputs)}")
    return 0


def _cmd_reproduce(args, run: _Run) -> int:
    run.seed = load_example(args.example).seed if args.seed is None else args.seed
    report = reproduce(args.example, trials=args.trials, seed=args.seed, out_dir=run.out_dir)
    run.outputs.extend(report.files)
    run.write("report.json", report.to_dict())
    print(f"example {args.example}")
    for check in report.checks:
        print(check.line())
    ok = report.passed
    print(f"{'ALL PASS' if ok else 'SOME CHECKS FAILED'} ({sum(c.passed for c in report.checks)}/{len(report.checks)})")
    return 0 if ok else REPRODUCE_FAIL_EXIT


COMMANDS = {
    "abstract": _cmd_abstract,
    "verify": _cmd_verify,
    "refine-simulate": _cmd_refine,
    "reduce": _cmd_reduce,
    "reproduce": _cmd_reproduce,
}


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"ERROR[USAGE]: {_one_line(exc)}", file=sys.stderr)
        return USAGE_EXIT
    run = _Run(args, argv)
    try:
        run.out_dir.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, run)
    except _UsageError as exc:
        run.manifest("error")
        print(f"ERROR[USAGE]: {_one_line(exc)}", file=sys.stderr)
        return USAGE_EXIT
    except KFAError as exc:
        run.manifest("error", exc)
        print(f"ERROR[{exc.code}]: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ERROR[IO]: {_one_line(exc)}", file=sys.stderr)
        return 1
    run.manifest("ok" if code == 0 else "checks-failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
