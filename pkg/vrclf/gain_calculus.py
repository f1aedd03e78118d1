from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging
import math

import networkx as nx
import numpy as np
import sympy as sp
from scipy.optimize import brentq

from config import Config
from vrclf.errors import ConvergenceError, CycleCapError, DomainError, NonFiniteError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

DEFAULT_GRID_POINTS = 400
DEFAULT_GRID_MIN = 1e-8
DEFAULT_GRID_MAX = 1e8
DEFAULT_MAX_K = 12
MAX_DOUBLINGS = 200
MAX_HALVINGS = 1100
MARGINAL_RTOL = 1e-9
SLOPE_STEP = 1e-12


class GainClass(str, Enum):
    N1 = "N1"
    K = "K"
    KINF = "Kinf"

    @property
    def rank(self) -> int:
        return {"N1": 0, "K": 1, "Kinf": 2}[self.value]


class Kind(str, Enum):
    ZERO = "zero"
    IDENTITY = "identity"
    LINEAR = "linear"
    POWER = "power"
    COMPOSE = "compose"
    MAX = "max"
    SUM = "sum"
    SCALED_INVERSE = "scaled_inverse"
    TABULATED = "tabulated"


def _weakest(*tags: GainClass) -> GainClass:
    return min(tags, key=lambda tag: tag.rank)


def _strongest(*tags: GainClass) -> GainClass:
    return max(tags, key=lambda tag: tag.rank)


@dataclass(frozen=True)
class MonotoneFn:
    """
    Nondecreasing continuous function on [0, inf) vanishing at 0.

    Instances are immutable trees; build them with the module-level
    constructors (`zero`, `linear`, `compose`, ...) so that the class tag is
    propagated soundly. Calls accept floats or numpy arrays.
    """
    kind: Kind
    class_tag: GainClass
    params: Tuple[float, ...] = ()
    children: Tuple["MonotoneFn", ...] = ()
    table: Tuple[Tuple[float, float], ...] = field(default=(), repr=False)
    closed: Optional["MonotoneFn"] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == Kind.SCALED_INVERSE:
            object.__setattr__(self, "closed", closed_inverse(self.children[0]))

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def __call__(self, s: ArrayLike) -> ArrayLike:
        values = np.asarray(s, dtype=float)
        if not np.all(np.isfinite(values)):
            raise DomainError(f"{self.kind.value} gain evaluated at non-finite argument")
        if np.any(values < 0):
            raise DomainError(f"{self.kind.value} gain evaluated at negative argument")
        result = self._eval(values)
        if not np.all(np.isfinite(result)):
            raise NonFiniteError(f"{self.kind.value} gain produced a non-finite value")
        if np.ndim(s) == 0:
            return float(result)
        return result

    def _eval(self, s: np.ndarray) -> np.ndarray:
        if self.kind == Kind.ZERO:
            return np.zeros_like(s)
        if self.kind == Kind.IDENTITY:
            return s.copy()
        if self.kind == Kind.LINEAR:
            return self.params[0] * s
        if self.kind == Kind.POWER:
            coeff, exponent = self.params
            return coeff * np.power(s, exponent)
        if self.kind == Kind.COMPOSE:
            outer, inner = self.children
            return outer._eval(inner._eval(s))
        if self.kind == Kind.MAX:
            return np.maximum(self.children[0]._eval(s), self.children[1]._eval(s))
        if self.kind == Kind.SUM:
            return self.children[0]._eval(s) + self.children[1]._eval(s)
        if self.kind == Kind.SCALED_INVERSE:
            pre, post = self.params
            if self.closed is not None:
                return post * self.closed._eval(pre * s)
            return post * _invert(self.children[0], pre * s)
        if self.kind == Kind.TABULATED:
            return _interpolate(self.table, s)
        raise DomainError(f"unknown gain kind {self.kind}")

    # ------------------------------------------------------------------
    # structure
    # ------------------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        """True when the function is identically zero"""
        if self.kind == Kind.ZERO:
            return True
        if self.kind == Kind.LINEAR:
            return self.params[0] == 0.0
        if self.kind == Kind.POWER:
            return self.params[0] == 0.0
        if self.kind == Kind.COMPOSE:
            return self.children[0].is_zero or self.children[1].is_zero
        if self.kind in (Kind.MAX, Kind.SUM):
            return all(child.is_zero for child in self.children)
        if self.kind == Kind.SCALED_INVERSE:
            return self.params[0] == 0.0 or self.params[1] == 0.0
        if self.kind == Kind.TABULATED:
            return all(value == 0.0 for _, value in self.table)
        return False

    def to_sympy(self, arg: sp.Expr) -> sp.Expr:
        """Closed-form expression of the function applied to `arg`"""
        if self.kind == Kind.ZERO:
            return sp.Integer(0)
        if self.kind == Kind.IDENTITY:
            return arg
        if self.kind == Kind.LINEAR:
            return sp.Float(self.params[0]) * arg
        if self.kind == Kind.POWER:
            coeff, exponent = self.params
            return sp.Float(coeff) * arg ** _sympy_number(exponent)
        if self.kind == Kind.COMPOSE:
            outer, inner = self.children
            return outer.to_sympy(inner.to_sympy(arg))
        if self.kind == Kind.MAX:
            return sp.Max(self.children[0].to_sympy(arg), self.children[1].to_sympy(arg))
        if self.kind == Kind.SUM:
            return self.children[0].to_sympy(arg) + self.children[1].to_sympy(arg)
        if self.kind == Kind.SCALED_INVERSE:
            pre, post = self.params
            inner = self.children[0]
            scaled = sp.Float(pre) * arg
            if inner.kind == Kind.IDENTITY:
                return sp.Float(post) * scaled
            if inner.kind == Kind.LINEAR:
                return sp.Float(post) * scaled / sp.Float(inner.params[0])
            if inner.kind == Kind.POWER:
                coeff, exponent = inner.params
                return sp.Float(post) * (scaled / sp.Float(coeff)) ** _sympy_number(1.0 / exponent)
        raise DomainError(f"{self.kind.value} gain has no closed form")

    def to_dict(self) -> Dict:
        if self.kind in (Kind.ZERO, Kind.IDENTITY):
            return {"kind": self.kind.value}
        if self.kind == Kind.LINEAR:
            return {"kind": "linear", "slope": self.params[0]}
        if self.kind == Kind.POWER:
            return {"kind": "power", "coeff": self.params[0], "exponent": self.params[1]}
        if self.kind == Kind.COMPOSE:
            return {
                "kind": "compose",
                "outer": self.children[0].to_dict(),
                "inner": self.children[1].to_dict(),
            }
        if self.kind in (Kind.MAX, Kind.SUM):
            return {"kind": self.kind.value, "args": [child.to_dict() for child in self.children]}
        if self.kind == Kind.SCALED_INVERSE:
            return {
                "kind": "scaled_inverse",
                "inner": self.children[0].to_dict(),
                "pre": self.params[0],
                "post": self.params[1],
            }
        return {
            "kind": "tabulated",
            "class": self.class_tag.value,
            "points": [[s, v] for s, v in self.table],
        }

    @staticmethod
    def from_dict(data: Dict) -> "MonotoneFn":
        """Inverse of `to_dict`; raises DomainError on malformed specs"""
        if not isinstance(data, dict) or "kind" not in data:
            raise DomainError(f"gain entry must be an object with a 'kind' field, got {data!r}")
        kind = data["kind"]
        try:
            if kind == "zero":
                return zero()
            if kind == "identity":
                return identity()
            if kind == "linear":
                return linear(float(data["slope"]))
            if kind == "power":
                return power(float(data["coeff"]), float(data["exponent"]))
            if kind == "compose":
                return compose(MonotoneFn.from_dict(data["outer"]), MonotoneFn.from_dict(data["inner"]))
            if kind == "max":
                return maximum(*[MonotoneFn.from_dict(arg) for arg in data["args"]])
            if kind == "sum":
                return add(*[MonotoneFn.from_dict(arg) for arg in data["args"]])
            if kind == "scaled_inverse":
                return scaled_inverse(
                    MonotoneFn.from_dict(data["inner"]),
                    float(data.get("pre", 1.0)),
                    float(data.get("post", 1.0)),
                )
            if kind == "tabulated":
                points = data["points"]
                return tabulated(
                    [p[0] for p in points],
                    [p[1] for p in points],
                    GainClass(data.get("class", "N1")),
                )
        except KeyError as e:
            raise DomainError(f"gain entry of kind '{kind}' is missing field {e}")
        raise DomainError(f"unknown gain kind '{kind}'")


def _sympy_number(value: float) -> sp.Expr:
    rational = sp.Rational(value).limit_denominator(1000)
    if abs(float(rational) - value) < 1e-15:
        return rational
    return sp.Float(value)


# ----------------------------------------------------------------------
# constructors
# ----------------------------------------------------------------------

def zero() -> MonotoneFn:
    return MonotoneFn(Kind.ZERO, GainClass.N1)


def identity() -> MonotoneFn:
    return MonotoneFn(Kind.IDENTITY, GainClass.KINF)


def linear(slope: float) -> MonotoneFn:
    if not math.isfinite(slope) or slope < 0:
        raise DomainError(f"linear gain needs a finite slope >= 0, got {slope}")
    tag = GainClass.KINF if slope > 0 else GainClass.N1
    return MonotoneFn(Kind.LINEAR, tag, (float(slope),))


def power(coeff: float, exponent: float) -> MonotoneFn:
    if not math.isfinite(coeff) or coeff < 0:
        raise DomainError(f"power gain needs a finite coefficient >= 0, got {coeff}")
    if not math.isfinite(exponent) or exponent <= 0:
        raise DomainError(f"power gain needs a finite exponent > 0, got {exponent}")
    tag = GainClass.KINF if coeff > 0 else GainClass.N1
    return MonotoneFn(Kind.POWER, tag, (float(coeff), float(exponent)))


def compose(outer: MonotoneFn, inner: MonotoneFn) -> MonotoneFn:
    """s -> outer(inner(s))"""
    tag = _weakest(outer.class_tag, inner.class_tag)
    return MonotoneFn(Kind.COMPOSE, tag, children=(outer, inner))


def compose_all(functions: Sequence[MonotoneFn]) -> MonotoneFn:
    """f1 o f2 o ... o fn, innermost last"""
    if not functions:
        return identity()
    result = functions[-1]
    for fn in reversed(functions[:-1]):
        result = compose(fn, result)
    return result


def maximum(*functions: MonotoneFn) -> MonotoneFn:
    if not functions:
        return zero()
    result = functions[0]
    for fn in functions[1:]:
        tags = (result.class_tag, fn.class_tag)
        if min(tag.rank for tag in tags) >= GainClass.K.rank:
            tag = _strongest(*tags)
        else:
            # a flat stretch of the weaker function can dominate
            tag = GainClass.N1
        result = MonotoneFn(Kind.MAX, tag, children=(result, fn))
    return result


def add(*functions: MonotoneFn) -> MonotoneFn:
    if not functions:
        return zero()
    result = functions[0]
    for fn in functions[1:]:
        tag = _strongest(result.class_tag, fn.class_tag)
        result = MonotoneFn(Kind.SUM, tag, children=(result, fn))
    return result


def scaled_inverse(inner: MonotoneFn, pre: float = 1.0, post: float = 1.0) -> MonotoneFn:
    """s -> post * inner^{-1}(pre * s); inner must be class Kinf"""
    if inner.class_tag != GainClass.KINF:
        raise DomainError(f"inverse needs a Kinf function, got {inner.class_tag.value}")
    if pre < 0 or post < 0 or not (math.isfinite(pre) and math.isfinite(post)):
        raise DomainError(f"inverse scalings must be finite and >= 0, got pre={pre}, post={post}")
    tag = GainClass.KINF if pre > 0 and post > 0 else GainClass.N1
    return MonotoneFn(Kind.SCALED_INVERSE, tag, (float(pre), float(post)), children=(inner,))


def tabulated(breakpoints: Sequence[float], values: Sequence[float],
              class_tag: GainClass = GainClass.N1) -> MonotoneFn:
    """
    Piecewise-linear gain through user-supplied points.

    The first breakpoint must be (0, 0). Beyond the last breakpoint the last
    segment is extended. The class tag is asserted by the caller and spot
    verified on the breakpoints.
    """
    xs = [float(v) for v in breakpoints]
    ys = [float(v) for v in values]
    if len(xs) != len(ys) or len(xs) < 2:
        raise DomainError("tabulated gain needs at least two (s, value) pairs")
    if xs[0] != 0.0 or ys[0] != 0.0:
        raise DomainError("tabulated gain must start at (0, 0)")
    for (x0, y0), (x1, y1) in zip(zip(xs, ys), zip(xs[1:], ys[1:])):
        if x1 <= x0:
            raise DomainError("tabulated breakpoints must be strictly increasing")
        if y1 < y0:
            raise DomainError("tabulated values must be nondecreasing")
        if class_tag != GainClass.N1 and y1 <= y0:
            raise DomainError(f"tabulated values must increase strictly for class {class_tag.value}")
    if class_tag == GainClass.KINF and ys[-1] <= ys[-2]:
        raise DomainError("a Kinf table needs a positive final slope")
    return MonotoneFn(Kind.TABULATED, class_tag, table=tuple(zip(xs, ys)))


def _interpolate(table: Tuple[Tuple[float, float], ...], s: np.ndarray) -> np.ndarray:
    xs = np.array([p[0] for p in table])
    ys = np.array([p[1] for p in table])
    result = np.interp(s, xs, ys)
    slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
    beyond = s > xs[-1]
    return np.where(beyond, ys[-1] + slope * (s - xs[-1]), result)


def closed_inverse(fn: MonotoneFn) -> Optional[MonotoneFn]:
    """Inverse of a Kinf function as another gain tree, or None when it has no closed form"""
    if fn.kind == Kind.IDENTITY:
        return identity()
    if fn.kind == Kind.LINEAR and fn.params[0] > 0:
        return linear(1.0 / fn.params[0])
    if fn.kind == Kind.POWER and fn.params[0] > 0:
        coeff, exponent = fn.params
        return power(coeff ** (-1.0 / exponent), 1.0 / exponent)
    if fn.kind == Kind.COMPOSE:
        outer, inner = (closed_inverse(child) for child in fn.children)
        if outer is not None and inner is not None:
            return compose(inner, outer)
        return None
    if fn.kind == Kind.SCALED_INVERSE:
        pre, post = fn.params
        if pre > 0 and post > 0:
            # s = post g^-1(pre t)  <=>  t = g(s / post) / pre
            return compose_all([linear(1.0 / pre), fn.children[0], linear(1.0 / post)])
        return None
    if fn.kind == Kind.TABULATED and fn.class_tag == GainClass.KINF:
        xs, ys = zip(*fn.table)
        return tabulated(ys, xs, GainClass.KINF)
    return None


def _bracket(inner: MonotoneFn, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """lo = hi / 2 with inner(lo) < target <= inner(hi), by doubling then halving"""
    hi = np.ones_like(target)
    low_side = inner._eval(hi) < target
    doublings = 0
    while np.any(low_side):
        if doublings >= MAX_DOUBLINGS:
            raise ConvergenceError(f"no inverse bracket within {MAX_DOUBLINGS} doublings")
        hi[low_side] *= 2.0
        low_side = inner._eval(hi) < target
        doublings += 1
    shrink = inner._eval(hi / 2.0) >= target
    halvings = 0
    while np.any(shrink) and halvings < MAX_HALVINGS:
        hi[shrink] /= 2.0
        shrink = (inner._eval(hi / 2.0) >= target) & (hi > 0)
        halvings += 1
    return hi / 2.0, hi


def _invert(inner: MonotoneFn, y: np.ndarray, rtol: Optional[float] = None) -> np.ndarray:
    """Brent's method on every distinct positive target of inner(t) = y"""
    rtol = Config.INVERSION_RTOL if rtol is None else rtol
    y = np.asarray(y, dtype=float)
    flat = y.reshape(-1)
    result = np.zeros_like(flat)
    todo = flat > 0
    if not np.any(todo):
        return result.reshape(y.shape)
    targets, where = np.unique(flat[todo], return_inverse=True)
    lows, highs = _bracket(inner, targets)

    roots = np.empty_like(targets)
    for n, (target, lo, hi) in enumerate(zip(targets, lows, highs)):
        def residual(t: float, target: float = target) -> float:
            return float(inner._eval(np.asarray(t, dtype=float))) - target
        try:
            roots[n] = brentq(residual, lo, hi, xtol=np.finfo(float).tiny, rtol=rtol)
        except (RuntimeError, ValueError) as e:
            raise ConvergenceError(f"inverse at {target:.6g} failed on [{lo:.6g}, {hi:.6g}]: {e}")
    result[todo] = roots[where]
    return result.reshape(y.shape)


def translate_gain(gain: MonotoneFn) -> MonotoneFn:
    """Gain on |x| scale -> gain on V = x^2/2 scale: s -> (gain(sqrt(2 s)))^2 / 2"""
    if gain.is_zero:
        return zero()
    return compose_all([power(0.5, 2.0), gain, power(math.sqrt(2.0), 0.5)])


# ----------------------------------------------------------------------
# gain matrices
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GainMatrix:
    """
    k x k matrix of gains with zero diagonal. Entry (i, j) is gamma_{i,j}.
    """
    k: int
    entries: Tuple[Tuple[MonotoneFn, ...], ...]

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("gain matrix needs k >= 1")
        if len(self.entries) != self.k or any(len(row) != self.k for row in self.entries):
            raise DomainError(f"gain matrix must be {self.k}x{self.k}")
        for i in range(self.k):
            if not self.entries[i][i].is_zero:
                raise DomainError(f"diagonal gain ({i + 1},{i + 1}) must be zero")

    @staticmethod
    def from_rows(rows: Sequence[Sequence[MonotoneFn]]) -> "GainMatrix":
        return GainMatrix(len(rows), tuple(tuple(row) for row in rows))

    @staticmethod
    def from_entries(k: int, entries: Dict[Tuple[int, int], MonotoneFn]) -> "GainMatrix":
        """Build from a sparse {(i, j): gain} map with 1-based indices"""
        rows = [[zero() for _ in range(k)] for _ in range(k)]
        for (i, j), gain in entries.items():
            rows[i - 1][j - 1] = gain
        return GainMatrix.from_rows(rows)

    def __getitem__(self, index: Tuple[int, int]) -> MonotoneFn:
        i, j = index
        return self.entries[i][j]

    def digraph(self) -> nx.DiGraph:
        """Edge i -> j whenever gamma_{i,j} is not identically zero"""
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.k))
        for i in range(self.k):
            for j in range(self.k):
                if i != j and not self.entries[i][j].is_zero:
                    graph.add_edge(i, j)
        return graph

    def dominant(self, i: int, values: Sequence[float], slack: float = 1e-9) -> bool:
        """max_s gamma_{i,s}(v_s) <= v_i, up to `slack`"""
        vi = float(values[i])
        bound = vi + slack * max(1.0, abs(vi))
        for s in range(self.k):
            if s == i or self.entries[i][s].is_zero:
                continue
            if self.entries[i][s](float(values[s])) > bound:
                return False
        return True

    def map(self, fn) -> "GainMatrix":
        return GainMatrix.from_rows([[fn(entry) for entry in row] for row in self.entries])

    def to_dict(self) -> Dict:
        return {"k": self.k, "entries": [[entry.to_dict() for entry in row] for row in self.entries]}

    @staticmethod
    def from_dict(data: Dict) -> "GainMatrix":
        if not isinstance(data, dict) or "k" not in data or "entries" not in data:
            raise DomainError("gain matrix document needs 'k' and 'entries'")
        rows = [[MonotoneFn.from_dict(spec) for spec in row] for row in data["entries"]]
        matrix = GainMatrix.from_rows(rows)
        if matrix.k != int(data["k"]):
            raise DomainError(f"declared k={data['k']} does not match {matrix.k} rows")
        return matrix


class Verdict(str, Enum):
    SATISFIED = "Satisfied"
    VIOLATED = "Violated"
    MARGINAL = "Marginal"


@dataclass
class CycleResult:
    indices: Tuple[int, ...]
    worst_margin: float
    witness: float
    relative_margin: float
    slope_at_zero: float

    def to_dict(self) -> Dict:
        return {
            "cycle": [i + 1 for i in self.indices],
            "worst_margin": self.worst_margin,
            "witness_s": self.witness,
            "relative_margin": self.relative_margin,
            "slope_at_zero": self.slope_at_zero,
        }


@dataclass
class CycleReport:
    cycles: List[CycleResult]
    verdict: Verdict
    witness_cycle: Optional[Tuple[int, ...]] = None
    witness_s: Optional[float] = None

    @property
    def satisfied(self) -> bool:
        return self.verdict == Verdict.SATISFIED

    def to_dict(self) -> Dict:
        return {
            "verdict": self.verdict.value,
            "witness_cycle": None if self.witness_cycle is None else [i + 1 for i in self.witness_cycle],
            "witness_s": self.witness_s,
            "cycles": [cycle.to_dict() for cycle in self.cycles],
        }


def default_grid(points: int = DEFAULT_GRID_POINTS, lo: float = DEFAULT_GRID_MIN,
                 hi: float = DEFAULT_GRID_MAX) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), points)


def simple_cycles(G: GainMatrix, max_k: int = DEFAULT_MAX_K) -> List[Tuple[int, ...]]:
    """Simple cycles of length >= 2, rotated to start at their smallest index"""
    if G.k > max_k:
        raise CycleCapError(f"k={G.k} exceeds the cycle enumeration cap {max_k}")
    cycles = []
    for cycle in nx.simple_cycles(G.digraph()):
        if len(cycle) < 2:
            continue
        start = cycle.index(min(cycle))
        cycles.append(tuple(cycle[start:] + cycle[:start]))
    return sorted(cycles, key=lambda c: (len(c), c))


def cycle_gain(G: GainMatrix, cycle: Sequence[int]) -> MonotoneFn:
    """gamma_{i1,i2} o gamma_{i2,i3} o ... o gamma_{ir,i1}"""
    pairs = list(zip(cycle, list(cycle[1:]) + [cycle[0]]))
    return compose_all([G[i, j] for i, j in pairs])


def check_small_gain(G: GainMatrix, sample_grid: Optional[np.ndarray] = None,
                     max_k: int = DEFAULT_MAX_K) -> CycleReport:
    """
    Sampled check that every cyclic composition stays strictly below the
    identity. Margins are s - composed(s); the witness of a cycle is the
    sample with the smallest relative margin.
    """
    grid = default_grid() if sample_grid is None else np.asarray(sample_grid, dtype=float)
    near_zero = np.array([SLOPE_STEP, 2.0 * SLOPE_STEP])
    samples = np.concatenate([near_zero, grid])

    results = []
    verdict = Verdict.SATISFIED
    witness_cycle, witness_s = None, None
    worst_relative = math.inf

    for cycle in simple_cycles(G, max_k):
        composed = cycle_gain(G, cycle)(samples)
        margins = samples - composed
        relative = margins / samples
        idx = int(np.argmin(relative))
        slope = float((composed[1] - composed[0]) / SLOPE_STEP)
        result = CycleResult(cycle, float(margins[idx]), float(samples[idx]),
                             float(relative[idx]), slope)
        results.append(result)

        if margins[idx] <= 0:
            if verdict != Verdict.VIOLATED or relative[idx] < worst_relative:
                witness_cycle, witness_s = cycle, float(samples[idx])
                worst_relative = float(relative[idx])
            verdict = Verdict.VIOLATED
        elif verdict != Verdict.VIOLATED and relative[idx] < MARGINAL_RTOL:
            verdict = Verdict.MARGINAL
            witness_cycle, witness_s = cycle, float(samples[idx])
        elif verdict != Verdict.VIOLATED and slope >= 1.0 - MARGINAL_RTOL:
            # tangent to the identity at 0+, the grid cannot separate them
            verdict = Verdict.MARGINAL
            witness_cycle, witness_s = cycle, SLOPE_STEP

    logger.info(f"Small-gain check over {len(results)} cycles: {verdict.value}")
    return CycleReport(results, verdict, witness_cycle, witness_s)


def path_maximum(G: GainMatrix, i: int, j: int) -> MonotoneFn:
    """
    a(s): max of gamma_{j,i}(s) and every simple-path composition
    gamma_{i,z1} o ... o gamma_{zl,j}(s) through nodes other than i and j.
    """
    terms = []
    if not G[j, i].is_zero:
        terms.append(G[j, i])
    for path in nx.all_simple_paths(G.digraph(), i, j):
        if len(path) < 3:
            continue
        terms.append(compose_all([G[a, b] for a, b in zip(path, path[1:])]))
    return maximum(*terms) if terms else zero()


def regularize_gains(G: GainMatrix, max_k: int = DEFAULT_MAX_K) -> GainMatrix:
    """
    Enlarge every off-diagonal gain to a positive definite, unbounded one
    while keeping the small-gain conditions:
    gamma~_{i,j}(s) = max(gamma_{i,j}(s), a~^{-1}(s) / 2) with a~(s) = a(s) + s.
    """
    report = check_small_gain(G, max_k=max_k)
    if report.verdict == Verdict.VIOLATED:
        raise DomainError(f"small-gain conditions fail on cycle {report.to_dict()['witness_cycle']}")
    if report.verdict == Verdict.MARGINAL:
        logger.warning("Regularizing a gain matrix whose small-gain margin is marginal")

    rows = [[zero() for _ in range(G.k)] for _ in range(G.k)]
    for i in range(G.k):
        for j in range(G.k):
            if i == j:
                continue
            a_tilde = add(path_maximum(G, i, j), identity())
            floor = scaled_inverse(a_tilde, 1.0, 0.5)
            rows[i][j] = floor if G[i, j].is_zero else maximum(G[i, j], floor)
    return GainMatrix.from_rows(rows)
