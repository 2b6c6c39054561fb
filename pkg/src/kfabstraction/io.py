"""Model files and abstraction artifacts (strict-schema JSON).

Floats are written with Python's shortest round-trip repr, so parsing a
written file gives back the identical doubles.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .dare import AuxiliaryMeasurement
from .errors import ArtifactMismatch, KFAError, ModelFileError
from .gaussian import Gaussian
from .kalman import AbstractModel, IndexMap
from .system import (
    LinearPolicy,
    LinearStochasticSystem,
    Specification,
    TimeVaryingLinearPolicy,
    zero_policy,
)

FORMAT_VERSION = "1.0"

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_vector = {"type": "array", "items": {"type": "number"}}
_bound = {"oneOf": [{"type": "number"}, {"enum": ["inf", "-inf"]}]}
_bounds = {"oneOf": [
    {"type": "array", "items": _bound},
    {"type": "array", "items": {"type": "array", "items": _bound}},
]}

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format_version", "system", "observation"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["A", "B", "H", "Qw", "mu0", "Sigma0"],
            "properties": {k: _matrix for k in ("A", "B", "H", "Qw", "Sigma0")} | {"mu0": _vector},
        },
        "observation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["C", "N"],
            "properties": {"C": _matrix, "N": _matrix},
        },
        "spec": {
            "type": "object",
            "additionalProperties": False,
            "required": ["interval", "lower", "upper"],
            "properties": {
                "interval": {"type": "array", "items": {"type": "integer", "minimum": 0},
                             "minItems": 2, "maxItems": 2},
                "lower": _bounds,
                "upper": _bounds,
                "target_probability": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "policy": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["zero", "linear", "time_varying"]},
                "state": {"enum": ["full", "reduced"]},
                "gain": _matrix,
                "offset": _vector,
                "gains": {"type": "array", "items": _matrix},
                "offsets": {"type": "array", "items": _vector},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
    },
}

ARTIFACT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format_version", "kind", "flavor", "model_hash", "source", "A", "B", "H", "C", "N",
                 "mu0", "init_cov", "gain0", "gains", "innovation_cov", "constant"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "kind": {"const": "abstraction"},
        "flavor": {"enum": ["time-varying", "time-invariant", "time-invariant-star"]},
        "model_hash": {"type": "string"},
        "source": {"type": "object"},
        "A": _matrix, "B": _matrix, "H": _matrix, "C": _matrix, "N": _matrix,
        "mu0": _vector, "init_cov": _matrix, "gain0": _matrix,
        "gains": {"type": "array", "items": _matrix},
        "innovation_cov": {"type": "array", "items": _matrix},
        "constant": {"type": "boolean"},
        "dare": {"type": ["object", "null"]},
        "aux": {"type": ["object", "null"]},
        "reduction": {"type": ["object", "null"]},
    },
}


def _num(x):
    if isinstance(x, str):
        return float(x)
    return x


def _bound_doc(a: np.ndarray):
    rows = [[("inf" if v > 0 else "-inf") if np.isinf(v) else float(v) for v in row] for row in a]
    return rows[0] if all(r == rows[0] for r in rows) else rows


def _arr(rows, n: int | None = None) -> np.ndarray:
    a = np.array(rows, dtype=float)
    if a.size == 0 and n is not None:
        return a.reshape(n, 0) if a.ndim < 2 else a
    return a


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"cannot read {path}: {exc}") from exc


_FLAT_LIST = re.compile(r"\[\s*([^\[\]{}]*?)\s*\]")


def dumps(doc: dict) -> str:
    """Indented JSON with innermost numeric lists kept on one line."""
    text = json.dumps(doc, indent=2, allow_nan=False)
    return _FLAT_LIST.sub(lambda m: "[" + re.sub(r",\s+", ", ", m.group(1)) + "]", text) + "\n"


def write_json(path, doc: dict) -> Path:
    path = Path(path)
    path.write_text(dumps(doc))
    return path


def canonical_hash(doc: Any) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return hashlib.sha256(blob).hexdigest()


def _validate(doc: dict, schema: dict, what: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ModelFileError(f"invalid {what} at {where}: {exc.message}") from None


# -- model files ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelBundle:
    system: LinearStochasticSystem
    C: np.ndarray
    N: np.ndarray
    spec: Specification | None
    policy: object | None
    policy_state: str
    seed: int | None
    doc: dict

    @property
    def source(self) -> dict:
        return {"system": self.doc["system"], "observation": self.doc["observation"]}

    @property
    def model_hash(self) -> str:
        return canonical_hash(_normalized_source(self.source))


def _normalized_source(source: dict) -> dict:
    # 1 and 1.0 must hash identically
    return {block: {k: np.array(v, dtype=float).tolist() for k, v in source[block].items()}
            for block in ("system", "observation")}


def policy_from_doc(doc: dict | None, m: int, state_dim: int):
    if doc is None:
        return None
    kind = doc["kind"]
    if kind == "zero":
        return zero_policy(m, state_dim)
    if kind == "linear":
        if "gain" not in doc:
            raise ModelFileError("linear policy needs 'gain'")
        return LinearPolicy(_arr(doc["gain"]), doc.get("offset"))
    if "gains" not in doc:
        raise ModelFileError("time_varying policy needs 'gains'")
    return TimeVaryingLinearPolicy(tuple(_arr(g) for g in doc["gains"]),
                                   None if "offsets" not in doc else tuple(doc["offsets"]))


def parse_model(doc: dict) -> ModelBundle:
    _validate(doc, MODEL_SCHEMA, "model file")
    s = doc["system"]
    try:
        system = LinearStochasticSystem.from_arrays(
            _arr(s["A"]), _arr(s["B"]), _arr(s["H"]), _arr(s["Qw"]), _arr(s["mu0"]), _arr(s["Sigma0"]))
        spec = None
        if "spec" in doc:
            sp = doc["spec"]
            conv = lambda b: np.array([[_num(v) for v in row] if isinstance(row, list) else _num(row)
                                       for row in b], dtype=float)
            spec = Specification(tuple(sp["interval"]), conv(sp["lower"]), conv(sp["upper"]),
                                 sp.get("target_probability", 0.0))
        pdoc = doc.get("policy")
        policy_state = (pdoc or {}).get("state", "full")
        policy = None
        if pdoc is not None and policy_state == "full":
            policy = policy_from_doc(pdoc, system.m, system.n)
        elif pdoc is not None:
            gain_cols = len((pdoc.get("gain") or (pdoc.get("gains") or [[[]]])[0])[0])
            policy = policy_from_doc(pdoc, system.m, gain_cols)
    except KFAError as exc:
        raise ModelFileError(f"model file is inconsistent: {exc}") from exc
    return ModelBundle(system, _arr(doc["observation"]["C"]), _arr(doc["observation"]["N"]),
                       spec, policy, policy_state, doc.get("seed"), doc)


def load_model(path) -> ModelBundle:
    return parse_model(read_json(path))


def policy_to_doc(policy, state: str = "full") -> dict:
    if isinstance(policy, TimeVaryingLinearPolicy):
        doc = {"kind": "time_varying", "gains": [g.tolist() for g in policy.gains],
               "offsets": [o.tolist() for o in policy.offsets]}
    else:
        doc = {"kind": "linear", "gain": policy.gain.tolist(), "offset": policy.offset.tolist()}
    if state != "full":
        doc["state"] = state
    return doc


def model_to_doc(system: LinearStochasticSystem, C, N, spec: Specification | None = None,
                 policy=None, seed: int | None = None, policy_state: str = "full") -> dict:
    doc: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "system": {
            "A": system.A.tolist(), "B": system.B.tolist(), "H": system.H.tolist(),
            "Qw": system.Qw.tolist(), "mu0": system.mu0.tolist(), "Sigma0": system.Sigma0.tolist(),
        },
        "observation": {"C": np.asarray(C, dtype=float).tolist(), "N": np.atleast_2d(N).astype(float).tolist()},
    }
    if spec is not None:
        doc["spec"] = {"interval": list(spec.interval), "lower": _bound_doc(spec.lower),
                       "upper": _bound_doc(spec.upper), "target_probability": spec.target_probability}
    if policy is not None:
        doc["policy"] = policy_to_doc(policy, policy_state)
    if seed is not None:
        doc["seed"] = int(seed)
    return doc


# -- abstraction artifacts --------------------------------------------------

@dataclass(frozen=True, eq=False)
class AbstractionBundle:
    abstract: AbstractModel
    aux: AuxiliaryMeasurement | None
    dare: dict | None
    model_hash: str
    source: dict
    reduction: IndexMap | None
    doc: dict


def abstraction_to_doc(abstract: AbstractModel, source: dict, *, dare=None, aux=None,
                       reduction: IndexMap | None = None) -> dict:
    """``dare`` may be a :class:`DareSolution` or its already serialized dict."""
    return {
        "format_version": FORMAT_VERSION,
        "kind": "abstraction",
        "flavor": abstract.flavor,
        "model_hash": canonical_hash(_normalized_source(source)),
        "source": source,
        "A": abstract.A.tolist(), "B": abstract.B.tolist(), "H": abstract.H.tolist(),
        "C": abstract.C.tolist(), "N": abstract.N.tolist(),
        "mu0": abstract.mu0.tolist(), "init_cov": abstract.init.cov.tolist(),
        "gain0": abstract.gain0.tolist(),
        "gains": abstract.gains.tolist(),
        "innovation_cov": abstract.innovation_cov.tolist(),
        "constant": bool(abstract.constant),
        "dare": None if dare is None else dare if isinstance(dare, dict) else dare.to_dict(),
        "aux": None if aux is None else aux.to_dict(),
        "reduction": None if reduction is None else reduction.to_dict(),
    }


def parse_abstraction(doc: dict) -> AbstractionBundle:
    _validate(doc, ARTIFACT_SCHEMA, "abstraction artifact")
    n = len(doc["mu0"])
    q = len(doc["innovation_cov"][0]) if doc["innovation_cov"] else len(doc["gain0"][0]) if n else 0
    gains = np.array(doc["gains"], dtype=float).reshape(len(doc["gains"]), n, q)
    try:
        abstract = AbstractModel(
            A=_arr(doc["A"]).reshape(n, n), B=_arr(doc["B"]).reshape(n, -1) if n else _arr(doc["B"]),
            H=_arr(doc["H"]), C=_arr(doc["C"]), N=_arr(doc["N"]),
            init=Gaussian(_arr(doc["mu0"]), _arr(doc["init_cov"]).reshape(n, n)),
            gains=gains, innovation_cov=np.array(doc["innovation_cov"], dtype=float).reshape(-1, q, q),
            gain0=_arr(doc["gain0"]).reshape(n, q), flavor=doc["flavor"], constant=doc["constant"],
        )
    except (KFAError, ValueError) as exc:
        raise ModelFileError(f"abstraction artifact is inconsistent: {exc}") from exc
    aux = None
    if doc.get("aux"):
        aux = AuxiliaryMeasurement(R=_arr(doc["aux"]["R"]), L=_arr(doc["aux"]["L"]))
    reduction = IndexMap.from_dict(doc["reduction"]) if doc.get("reduction") else None
    return AbstractionBundle(abstract, aux, doc.get("dare"), doc["model_hash"], doc["source"], reduction, doc)


def load_abstraction(path) -> AbstractionBundle:
    return parse_abstraction(read_json(path))


def source_diff(a: dict, b: dict) -> list[str]:
    """Dotted names of the system/observation fields that differ."""
    try:
        a, b = _normalized_source(a), _normalized_source(b)
    except (KeyError, AttributeError, ValueError):
        return ["source"]
    return [f"{blk}.{k}" for blk in ("system", "observation")
            for k in sorted(set(a[blk]) | set(b[blk])) if a[blk].get(k) != b[blk].get(k)]


def check_artifact_matches(bundle: AbstractionBundle, model: ModelBundle) -> None:
    """Refuse an artifact built from a different model, listing what differs."""
    if bundle.model_hash == model.model_hash:
        return
    diffs = source_diff(bundle.source, model.source)
    raise ArtifactMismatch(
        f"abstraction was built from a different model (artifact hash {bundle.model_hash[:12]}, "
        f"model hash {model.model_hash[:12]}); differing fields: {', '.join(diffs) or 'none recorded'}")


# -- bundled example models -------------------------------------------------

def example_model_path(k: int):
    return resources.files("kfabstraction") / "fixtures" / f"example{k}.json"


def load_example(k: int) -> ModelBundle:
    if k not in (1, 2, 3):
        raise ValueError("examples are numbered 1, 2 and 3")
    return parse_model(json.loads(example_model_path(k).read_text()))
