from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging
import math

from vrclf.errors import DomainError, InfeasibleError, NonFiniteError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

ZERO_GAIN_RTOL = 1e-12
SHRINK = 1e-6


@dataclass(frozen=True)
class AffineConstraint:
    """f + g*u < 0"""
    f: float
    g: float
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.f) and math.isfinite(self.g)):
            raise NonFiniteError(f"constraint {self.label or '?'} has non-finite data f={self.f}, g={self.g}")

    @property
    def is_flat(self) -> bool:
        return abs(self.g) <= ZERO_GAIN_RTOL * max(1.0, abs(self.f))

    def holds(self, u: float) -> bool:
        return self.f + self.g * u < 0


class ControlCase(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"


@dataclass(frozen=True)
class ControlSet:
    """
    Admissible inputs: P1 is the real line, P2 is [-a, +inf),
    P3 is [-a, b] with a + b > 0.
    """
    case: ControlCase = ControlCase.P1
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.case != ControlCase.P1 and self.a < 0:
            raise DomainError(f"control set needs a >= 0, got {self.a}")
        if self.case == ControlCase.P3:
            if self.b < 0:
                raise DomainError(f"control set needs b >= 0, got {self.b}")
            if self.a + self.b <= 0:
                raise DomainError("control set P3 needs a + b > 0")

    @staticmethod
    def p1() -> "ControlSet":
        return ControlSet(ControlCase.P1)

    @staticmethod
    def p2(a: float) -> "ControlSet":
        return ControlSet(ControlCase.P2, a)

    @staticmethod
    def p3(a: float, b: float) -> "ControlSet":
        return ControlSet(ControlCase.P3, a, b)

    @property
    def lower(self) -> float:
        return -math.inf if self.case == ControlCase.P1 else -self.a

    @property
    def upper(self) -> float:
        return self.b if self.case == ControlCase.P3 else math.inf

    def contains(self, u: float) -> bool:
        return self.lower <= u <= self.upper

    def clamp(self, u: float) -> float:
        return min(max(u, self.lower), self.upper)

    def to_dict(self) -> Dict:
        return {"case": self.case.value, "a": self.a, "b": self.b}

    @staticmethod
    def from_dict(data: Optional[Dict]) -> "ControlSet":
        if not data:
            return ControlSet.p1()
        try:
            case = ControlCase(data.get("case", "P1"))
        except ValueError:
            raise DomainError(f"unknown control set case {data.get('case')!r}")
        return ControlSet(case, float(data.get("a", 0.0)), float(data.get("b", 0.0)))


@dataclass(frozen=True)
class FeasibleInterval:
    """Open interval (lower, upper) of admissible control values"""
    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def __contains__(self, u: float) -> bool:
        return self.lower < u < self.upper

    def to_dict(self) -> Dict:
        return {"feasible": True, "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class Infeasible:
    """Names the first implication of the case analysis that fails"""
    implication: str
    witness: Tuple[int, ...]
    detail: str = ""

    def to_error(self) -> InfeasibleError:
        return InfeasibleError(self.implication, self.witness, self.detail)

    def to_dict(self) -> Dict:
        return {
            "feasible": False,
            "implication": self.implication,
            "witness": list(self.witness),
            "detail": self.detail,
        }


def partition(constraints: Sequence[AffineConstraint]) -> Tuple[List[int], List[int], List[int]]:
    """Index sets B0, B+, B- by the sign of g"""
    flat, positive, negative = [], [], []
    for i, c in enumerate(constraints):
        if c.is_flat:
            flat.append(i)
        elif c.g > 0:
            positive.append(i)
        else:
            negative.append(i)
    return flat, positive, negative


def feasible_interval(constraints: Sequence[AffineConstraint],
                      control_set: Optional[ControlSet] = None) -> Union[FeasibleInterval, Infeasible]:
    """
    Decide whether some u in the interior of the control set satisfies every
    f_i + g_i*u < 0 and return the open set of such u.
    """
    if not constraints:
        raise DomainError("constraint list is empty")
    control_set = control_set or ControlSet.p1()
    flat, positive, negative = partition(constraints)

    # (I) flat constraints must already hold
    for i in flat:
        if constraints[i].f >= 0:
            return Infeasible("I", (i,), f"g = 0 and f = {constraints[i].f:.6g} >= 0")

    # upper end comes from B+, lower end from B-
    upper, upper_idx = math.inf, None
    for i in positive:
        bound = -constraints[i].f / constraints[i].g
        if bound < upper:
            upper, upper_idx = bound, i
    lower, lower_idx = -math.inf, None
    for i in negative:
        bound = -constraints[i].f / constraints[i].g
        if bound > lower:
            lower, lower_idx = bound, i

    # (II) opposite-sign pairs
    if upper_idx is not None and lower_idx is not None and lower >= upper:
        return Infeasible(
            "II", (upper_idx, lower_idx),
            f"f/g = {-upper:.6g} on B+ is not below f/g = {-lower:.6g} on B-",
        )

    # (III) B+ against the lower end of U
    if control_set.case != ControlCase.P1 and upper_idx is not None:
        c = constraints[upper_idx]
        if c.f - control_set.a * c.g >= 0:
            return Infeasible("III", (upper_idx,), f"f - a*g = {c.f - control_set.a * c.g:.6g} >= 0")

    # (IV) B- against the upper end of U
    if control_set.case == ControlCase.P3 and lower_idx is not None:
        c = constraints[lower_idx]
        if c.f + control_set.b * c.g >= 0:
            return Infeasible("IV", (lower_idx,), f"f + b*g = {c.f + control_set.b * c.g:.6g} >= 0")

    interval = FeasibleInterval(max(lower, control_set.lower), min(upper, control_set.upper))
    if not interval.lower < interval.upper:
        # only reachable through rounding at a shared endpoint
        return Infeasible("II", tuple(i for i in (upper_idx, lower_idx) if i is not None),
                          "interval collapsed under rounding")
    return interval


def select_u(interval: FeasibleInterval, control_set: Optional[ControlSet] = None) -> float:
    """
    Min-norm point of the interval after shrinking both ends by
    min(1e-6, width/4).
    """
    if isinstance(interval, Infeasible) or not interval.lower < interval.upper:
        raise DomainError("cannot select a control value from an empty interval")
    shrink = min(SHRINK, 0.25 * interval.width)
    lo = interval.lower + shrink
    hi = interval.upper - shrink
    # large endpoints swallow the shrink in floating point
    if lo <= interval.lower:
        lo = math.nextafter(interval.lower, math.inf)
    if hi >= interval.upper:
        hi = math.nextafter(interval.upper, -math.inf)
    u = min(max(0.0, lo), hi)
    if control_set is not None:
        u = control_set.clamp(u)
    return u


def solve(constraints: Sequence[AffineConstraint], control_set: Optional[ControlSet] = None) -> float:
    """Feasible interval plus selection; raises InfeasibleError when there is none"""
    result = feasible_interval(constraints, control_set)
    if isinstance(result, Infeasible):
        logger.debug(f"Infeasible constraint system: implication {result.implication}")
        raise result.to_error()
    u = select_u(result, control_set)
    broken = [i for i, c in enumerate(constraints) if not c.holds(u)]
    if broken:
        raise InfeasibleError("II", broken, f"selected u={u:.6g} lost strictness under rounding")
    return u
