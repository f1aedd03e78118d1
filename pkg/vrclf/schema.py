"""
JSON documents read and written by the command line and the service.

Every document written here carries "schema_version". Readers accept
documents without it and reject newer versions.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple
import json
import logging

import numpy as np

from vrclf.errors import DomainError, SchemaError
from vrclf.feasibility import AffineConstraint, ControlSet
from vrclf.fields import ScalarField, Univariate
from vrclf.gain_calculus import GainMatrix, MonotoneFn
from vrclf.reaction_network import ConservationData, ReactionNetwork
from vrclf.vclf_core import BoxSampler, ControlAffineSystem, DisturbanceBox, VRCLFSpec

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

GAINS_FIELDS = ("k", "entries")
CONSTRAINT_FIELDS = ("constraints", "control_set")
PROBLEM_FIELDS = ("state_vars", "f", "g", "V", "eta", "W", "delta", "K", "rho", "epsilon", "gains",
                  "local_feedback", "r")
NETWORK_FIELDS = ("S", "rates", "c_f", "D_max")


def loads(text: str) -> Dict:
    """Parse a document, turning decoder errors into SchemaError with line and column"""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"malformed JSON: {e.msg}", e.lineno, e.colno)
    if not isinstance(data, dict):
        raise SchemaError("document must be a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if not isinstance(version, int) or version > SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}, this build reads up to {SCHEMA_VERSION}")
    return data


def load(path: str) -> Dict:
    with open(path) as f:
        return loads(f.read())


def dumps(data: Dict) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, **data}, indent=2, default=_default)


def dump(data: Dict, path: str) -> str:
    with open(path, "w") as f:
        f.write(dumps(data))
    return path


def _default(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _require(data: Dict, fields: Sequence[str], what: str) -> None:
    missing = [name for name in fields if name not in data]
    if missing:
        raise SchemaError(f"{what} document is missing {', '.join(missing)}")


def _wrap(what: str):
    """Re-raise domain errors from document contents as SchemaError"""
    def decorator(fn):
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except SchemaError:
                raise
            except (DomainError, KeyError, TypeError, ValueError) as e:
                raise SchemaError(f"invalid {what} document: {e}")
        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper
    return decorator


# ----------------------------------------------------------------------
# gain matrices and constraint lists
# ----------------------------------------------------------------------

@_wrap("gain matrix")
def read_gains(data: Dict) -> GainMatrix:
    _require(data, GAINS_FIELDS, "gain matrix")
    return GainMatrix.from_dict(data)


def write_gains(G: GainMatrix) -> Dict:
    return G.to_dict()


@_wrap("constraint")
def read_constraints(data: Dict) -> Tuple[List[AffineConstraint], ControlSet]:
    """{"constraints": [{"f": .., "g": .., "label": ..}], "control_set": {"case": "P3", "a": .., "b": ..}}"""
    _require(data, ("constraints",), "constraint")
    constraints = [AffineConstraint(float(c["f"]), float(c["g"]), str(c.get("label", "")))
                   for c in data["constraints"]]
    return constraints, ControlSet.from_dict(data.get("control_set"))


def write_constraints(constraints: Sequence[AffineConstraint], control_set: ControlSet) -> Dict:
    return {
        "constraints": [{"f": c.f, "g": c.g, "label": c.label} for c in constraints],
        "control_set": control_set.to_dict(),
    }


# ----------------------------------------------------------------------
# problem files: system + VRCLF data + sampling box
# ----------------------------------------------------------------------

class Problem:
    """Parsed problem file"""

    def __init__(self, system: ControlAffineSystem, spec: VRCLFSpec, box: Optional[Tuple[List[float], List[float]]],
                 initial_states: List[List[float]], horizon: float, raw: Dict):
        self.system = system
        self.spec = spec
        self.box = box
        self.initial_states = initial_states
        self.horizon = horizon
        self.raw = raw

    def sampler(self, seed: int) -> BoxSampler:
        if self.box is None:
            n = self.system.n
            return BoxSampler([-1.0] * n, [1.0] * n, seed)
        return BoxSampler(self.box[0], self.box[1], seed)


def _field(tree, state_vars, disturbance_vars=(), name=""):
    return ScalarField.parse(tree, state_vars, disturbance_vars, name=name)


@_wrap("problem")
def read_problem(data: Dict) -> Problem:
    _require(data, PROBLEM_FIELDS, "problem")
    xs = list(data["state_vars"])
    ds = list(data.get("disturbance_vars", []))
    if len(data["f"]) != len(xs) or len(data["g"]) != len(xs):
        raise SchemaError(f"f and g must have {len(xs)} components")
    box = DisturbanceBox(tuple(data["D"]["lower"]), tuple(data["D"]["upper"])) if "D" in data else None
    system = ControlAffineSystem(
        [_field(t, xs, ds, f"f{i + 1}") for i, t in enumerate(data["f"])],
        [_field(t, xs, ds, f"g{i + 1}") for i, t in enumerate(data["g"])],
        box, ControlSet.from_dict(data.get("U")), data.get("name", ""),
    )
    local = data["local_feedback"]
    if isinstance(local, list) and local and not isinstance(local[0], str):
        local_feedback = [float(v) for v in local]
    else:
        local_feedback = _field(local, xs, name="k")
    spec = VRCLFSpec(
        V=[_field(t, xs, name=f"V{i + 1}") for i, t in enumerate(data["V"])],
        eta=_field(data["eta"], xs, name="eta"),
        W=_field(data["W"], xs, name="W"),
        delta=Univariate(data["delta"], "delta"),
        Kfun=Univariate(data["K"], "K"),
        rho=Univariate(data["rho"], "rho"),
        epsilon=float(data["epsilon"]),
        gains=read_gains(data["gains"]),
        local_feedback=local_feedback,
        r=float(data["r"]),
        a1=MonotoneFn.from_dict(data["a1"]) if "a1" in data else None,
        a2=MonotoneFn.from_dict(data["a2"]) if "a2" in data else None,
        name=data.get("name", ""),
    )
    sampling = data.get("sampler")
    bounds = (list(sampling["lower"]), list(sampling["upper"])) if sampling else None
    return Problem(system, spec, bounds, [list(map(float, x)) for x in data.get("initial_states", [])],
                   float(data.get("horizon", 20.0)), data)


# ----------------------------------------------------------------------
# reaction networks
# ----------------------------------------------------------------------

@_wrap("network")
def read_network(data: Dict) -> Tuple[ReactionNetwork, ConservationData]:
    """
    {"S": [[..]], "rates": [tree, ..], "c_f": [..], "D_max": x,
     "conservation": [{"p": [..], "q": [..]}], "b": x, "R": x, "g": gain}
    """
    _require(data, NETWORK_FIELDS, "network")
    net = ReactionNetwork.from_dict(data)
    return net, ConservationData.from_dict(net, data)


def write_network(net: ReactionNetwork, cons: Optional[ConservationData] = None) -> Dict:
    data = net.to_dict()
    if cons is not None:
        data.update(cons.to_dict())
    return data


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------

REPORT_KINDS = ("smallgain", "feascheck", "verify", "synth", "simulate", "example43", "example44", "cstr")


def write_report(kind: str, body: Dict, manifest: Optional[Dict] = None) -> Dict:
    if kind not in REPORT_KINDS:
        raise SchemaError(f"unknown report kind {kind!r}")
    report = {"kind": kind, "report": body}
    if manifest is not None:
        report["manifest"] = manifest
    return report


def read_report(data: Dict) -> Dict:
    _require(data, ("kind", "report"), "report")
    if data["kind"] not in REPORT_KINDS:
        raise SchemaError(f"unknown report kind {data['kind']!r}")
    return data
