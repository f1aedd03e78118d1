from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np

from vrclf.errors import DomainError, InfeasibleError, SamplerExhaustedError
from vrclf.feasibility import AffineConstraint, ControlSet, ZERO_GAIN_RTOL, solve
from vrclf.fields import ScalarField, as_univariate
from vrclf.gain_calculus import GainClass, GainMatrix, MonotoneFn, regularize_gains

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

ANTECEDENT_SLACK = 1e-9
CERTIFICATE_TOL = 1e-6
DISTURBANCE_GRID = 11
MIN_HITS = 10
MAX_WITNESSES = 10
BATCH_SIZE = 10000

P1_IMPLICATIONS = ("v-flat", "v-pair", "eta-flat", "w-flat", "eta-w-pair", "eta-v-pair", "w-v-pair")
P2_IMPLICATIONS = ("v-lower-input", "eta-lower-input", "w-lower-input")
P3_IMPLICATIONS = ("v-upper-input", "eta-upper-input", "w-upper-input")


# ----------------------------------------------------------------------
# systems
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class DisturbanceBox:
    """Product of closed intervals [lower_i, upper_i]"""
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise DomainError("disturbance bounds differ in length")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise DomainError("disturbance box has lower > upper")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def vertices(self) -> np.ndarray:
        corners = [sorted({lo, hi}) for lo, hi in zip(self.lower, self.upper)]
        return np.array(list(product(*corners)), dtype=float).reshape(-1, self.dim)

    def grid(self, points: int = DISTURBANCE_GRID) -> np.ndarray:
        axes = [np.linspace(lo, hi, points) if hi > lo else np.array([lo])
                for lo, hi in zip(self.lower, self.upper)]
        return np.array(list(product(*axes)), dtype=float).reshape(-1, self.dim)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)

    def contains(self, d: Sequence[float]) -> bool:
        return all(lo <= v <= hi for v, lo, hi in zip(d, self.lower, self.upper))

    def to_dict(self) -> Dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


class ControlAffineSystem:
    """
    x' = f(d, x) + g(x) u with d in a box D and u in a control set U.
    """

    def __init__(self, f: Sequence[ScalarField], g: Sequence[ScalarField],
                 D: Optional[DisturbanceBox] = None, U: Optional[ControlSet] = None,
                 name: str = "", grid_points: int = DISTURBANCE_GRID):
        if not f or len(f) != len(g):
            raise DomainError(f"system needs matching nonempty f and g, got {len(f)} and {len(g)}")
        self.f = list(f)
        self.g = list(g)
        self.name = name
        self.state_vars = self.f[0].state_vars
        self.disturbance_vars = self.f[0].disturbance_vars
        self.U = U or ControlSet.p1()
        if self.disturbance_vars and D is None:
            raise DomainError(f"system references disturbances {self.disturbance_vars} but has no box")
        if D is not None and D.dim != len(self.disturbance_vars):
            raise DomainError(f"disturbance box has dim {D.dim}, system declares {len(self.disturbance_vars)}")
        self.D = D
        if any(set(gi.d_symbols) & gi.expr.free_symbols for gi in self.g):
            raise DomainError("input vector field may not depend on the disturbance")
        self._d0 = np.zeros(len(self.disturbance_vars)) if self.disturbance_vars else None

        if not self.disturbance_vars:
            self.candidates: List[Optional[np.ndarray]] = [None]
            self.exact_max = True
        elif all(fi.is_affine_in(fi.d_symbols) for fi in self.f):
            self.candidates = list(self.D.vertices())
            self.exact_max = True
        else:
            self.candidates = list(self.D.grid(grid_points))
            self.exact_max = False
            logger.warning(f"System {name or '?'} is not affine in d; disturbance maxima use a "
                           f"{grid_points}-point grid and are conservative")

    @property
    def n(self) -> int:
        return len(self.f)

    def drift(self, x, d=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([np.asarray(fi.value(x, d), dtype=float) for fi in self.f], axis=-1)

    def input_vector(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([np.asarray(gi.value(x, self._d0), dtype=float) for gi in self.g], axis=-1)

    def rhs(self, x, u: float, d=None) -> np.ndarray:
        return self.drift(x, d) + self.input_vector(x) * u

    def origin_residual(self, rng: Optional[np.random.Generator] = None, samples: int = 16) -> float:
        """max |f(d, 0)| over the candidate disturbances and a few random ones"""
        zero = np.zeros(self.n)
        points = [d for d in self.candidates]
        if self.D is not None and rng is not None:
            points += [self.D.sample(rng) for _ in range(samples)]
        return max(float(np.max(np.abs(self.drift(zero, d)))) for d in points)


class _Batch:
    """Drift and input fields of a batch of states, reused across all Lie derivatives"""

    def __init__(self, system: ControlAffineSystem, X: np.ndarray):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.system = system
        self.drifts = np.stack([system.drift(self.X, d) for d in system.candidates])
        self.G = system.input_vector(self.X)
        self._cache: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def lie(self, phi: ScalarField) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(max_D L_f phi, L_g phi, index of the maximizing disturbance)"""
        key = id(phi)
        if key not in self._cache:
            grad = phi.gradient(self.X)
            lf = np.einsum("cnk,nk->cn", self.drifts, grad)
            arg = np.argmax(lf, axis=0)
            lg = np.einsum("nk,nk->n", self.G, grad)
            self._cache[key] = (lf.max(axis=0), lg, arg)
        return self._cache[key]

    def disturbance(self, index: int) -> Optional[List[float]]:
        d = self.system.candidates[index]
        return None if d is None else [float(v) for v in d]


def lie_derivatives(system: ControlAffineSystem, phi: ScalarField, x, d=None) -> Tuple[float, float]:
    """(L_f phi, L_g phi) at one state and disturbance"""
    x = np.asarray(x, dtype=float)
    grad = phi.gradient(x)
    return float(grad @ system.drift(x, d)), float(grad @ system.input_vector(x))


def max_over_D(system: ControlAffineSystem, phi: ScalarField, x) -> float:
    """max over the disturbance box of L_f phi; exact for d-affine f"""
    lf, _, _ = _Batch(system, x).lie(phi)
    return float(lf[0])


# ----------------------------------------------------------------------
# VRCLF data
# ----------------------------------------------------------------------

@dataclass
class VRCLFSpec:
    """
    Vector control Lyapunov data: V_1..V_k with the auxiliary functions
    eta and W, the margins delta, K, rho, the constant epsilon, the gain
    matrix on the V scale and a local feedback law on the ball of radius 2r.

    epsilon <= 0 together with a negative constant eta switches off the
    eta/W machinery; only the k2 and local regions are used.
    """
    V: List[ScalarField]
    eta: ScalarField
    W: ScalarField
    delta: Callable
    Kfun: Callable
    rho: Callable
    epsilon: float
    gains: GainMatrix
    local_feedback: Union[Sequence[float], ScalarField]
    r: float
    a1: Optional[MonotoneFn] = None
    a2: Optional[MonotoneFn] = None
    name: str = ""

    def __post_init__(self):
        if len(self.V) != self.gains.k:
            raise DomainError(f"{len(self.V)} Lyapunov components but a {self.gains.k}x{self.gains.k} gain matrix")
        if self.r <= 0:
            raise DomainError(f"locality radius must be positive, got {self.r}")
        self.delta = as_univariate(self.delta, "delta")
        self.Kfun = as_univariate(self.Kfun, "K")
        self.rho = as_univariate(self.rho, "rho")
        if not isinstance(self.local_feedback, ScalarField):
            self.local_feedback = np.asarray(self.local_feedback, dtype=float)
            if self.local_feedback.shape != (self.n,):
                raise DomainError(f"local gain vector must have {self.n} entries")

    @property
    def k(self) -> int:
        return len(self.V)

    @property
    def n(self) -> int:
        return self.V[0].n

    @property
    def degenerate(self) -> bool:
        return self.epsilon <= 0

    def values(self, X: np.ndarray) -> np.ndarray:
        """(k, N) matrix of V_i over a batch"""
        X = np.atleast_2d(X)
        return np.stack([np.asarray(v.value(X), dtype=float) for v in self.V])

    def local_law(self, x):
        x = np.asarray(x, dtype=float)
        if isinstance(self.local_feedback, ScalarField):
            return self.local_feedback.value(x)
        return x @ self.local_feedback


def needs_regularization(gains: GainMatrix) -> bool:
    """True when some off-diagonal gain is not known to be positive definite"""
    return any(
        gains[i, j].class_tag == GainClass.N1
        for i in range(gains.k) for j in range(gains.k) if i != j
    )


def dominance_mask(gains: GainMatrix, values: np.ndarray, slack: float = ANTECEDENT_SLACK) -> np.ndarray:
    """(k, N) booleans: max_s gamma_{i,s}(V_s) <= V_i"""
    values = np.atleast_2d(values)
    k, count = values.shape
    mask = np.ones((k, count), dtype=bool)
    for i in range(k):
        bound = values[i] + slack * np.maximum(1.0, np.abs(values[i]))
        for s in range(k):
            if s == i or gains[i, s].is_zero:
                continue
            mask[i] &= gains[i, s](np.maximum(values[s], 0.0)) <= bound
    return mask


def active_set(spec: VRCLFSpec, x, slack: float = ANTECEDENT_SLACK) -> List[int]:
    """J+(x) as zero-based indices"""
    values = spec.values(np.asarray(x, dtype=float))
    mask = dominance_mask(spec.gains, values, slack)[:, 0]
    return [i for i in range(spec.k) if mask[i]]


def _is_flat(lg: np.ndarray, lf: np.ndarray) -> np.ndarray:
    return np.abs(lg) <= ZERO_GAIN_RTOL * np.maximum(1.0, np.abs(lf))


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------

class BoxSampler:
    """Seeded uniform sampler over a box, with rejection into subregions"""

    def __init__(self, lower: Sequence[float], upper: Sequence[float], seed: int = 0,
                 max_rounds: int = 50):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise DomainError("sampler box bounds are inconsistent")
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.max_rounds = max_rounds

    @property
    def dim(self) -> int:
        return len(self.lower)

    def draw(self, count: int) -> np.ndarray:
        return self.rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def draw_where(self, predicate: Callable[[np.ndarray], np.ndarray], count: int,
                   batch: int = BATCH_SIZE) -> np.ndarray:
        """`count` points satisfying `predicate`; raises when rejection runs dry"""
        kept = []
        total = 0
        for _ in range(self.max_rounds):
            X = self.draw(batch)
            X = X[np.asarray(predicate(X), dtype=bool)]
            kept.append(X)
            total += len(X)
            if total >= count:
                return np.concatenate(kept)[:count]
        raise SamplerExhaustedError(f"rejection sampling found {total} of {count} points "
                                    f"after {self.max_rounds * batch} draws")


class BallSampler:
    """Uniform samples in the ball of a given radius around the origin"""

    def __init__(self, dim: int, radius: float, seed: int = 0):
        self.dim = dim
        self.radius = radius
        self.rng = np.random.default_rng(seed)

    def draw(self, count: int) -> np.ndarray:
        directions = self.rng.normal(size=(count, self.dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = self.radius * self.rng.uniform(size=(count, 1)) ** (1.0 / self.dim)
        return directions * radii


# ----------------------------------------------------------------------
# implication reports
# ----------------------------------------------------------------------

@dataclass
class Witness:
    x: List[float]
    residual: float
    indices: Tuple[int, ...] = ()
    d: Optional[List[float]] = None

    def to_dict(self) -> Dict:
        return {
            "x": self.x,
            "d": self.d,
            "indices": [i + 1 for i in self.indices],
            "residual": self.residual,
        }


@dataclass
class ImplicationResult:
    id: str
    samples: int = 0
    hits: int = 0
    violation_count: int = 0
    violations: List[Witness] = field(default_factory=list)
    min_hits: int = MIN_HITS

    @property
    def status(self) -> str:
        if self.violation_count:
            return "fail"
        if self.hits == 0:
            return "vacuous"
        if self.hits < self.min_hits:
            return "sparse"
        return "pass"

    def merge(self, other: "ImplicationResult") -> None:
        self.samples += other.samples
        self.hits += other.hits
        self.violation_count += other.violation_count
        room = MAX_WITNESSES - len(self.violations)
        if room > 0:
            self.violations.extend(other.violations[:room])

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "status": self.status,
            "samples": self.samples,
            "antecedent_hits": self.hits,
            "violations": self.violation_count,
            "witnesses": [w.to_dict() for w in self.violations],
        }


@dataclass
class ImplicationReport:
    results: Dict[str, ImplicationResult]
    samples: int = 0
    conservative: bool = False
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(not r.violation_count for r in self.results.values())

    def __getitem__(self, key: str) -> ImplicationResult:
        return self.results[key]

    def merge(self, other: "ImplicationReport") -> "ImplicationReport":
        for key, result in other.results.items():
            if key in self.results:
                self.results[key].merge(result)
            else:
                self.results[key] = result
        self.samples += other.samples
        self.conservative = self.conservative or other.conservative
        self.notes.extend(other.notes)
        return self

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "samples": self.samples,
            "conservative": self.conservative,
            "notes": self.notes,
            "implications": [r.to_dict() for r in self.results.values()],
        }

    def table(self) -> str:
        lines = [f"{'implication':<14}{'status':<9}{'hits':>10}{'violations':>12}"]
        for r in self.results.values():
            lines.append(f"{r.id:<14}{r.status:<9}{r.hits:>10}{r.violation_count:>12}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} on {self.samples} samples")
        return "\n".join(lines)


class Recorder:
    """Collects hits and violations of one batch"""

    def __init__(self, X: np.ndarray, batch: Optional[_Batch], slack: float, min_hits: int):
        self.X = X
        self.batch = batch
        self.slack = slack
        self.min_hits = min_hits
        self.results: Dict[str, ImplicationResult] = {}

    def record(self, key: str, mask: np.ndarray, lhs: np.ndarray, rhs: np.ndarray,
               indices: Tuple[int, ...] = (), d_index: Optional[np.ndarray] = None, strict: bool = False) -> None:
        """Consequent is lhs <= rhs wherever the antecedent mask holds, or lhs < rhs by the slack when strict"""
        result = self.results.setdefault(key, ImplicationResult(key, min_hits=self.min_hits))
        result.samples = len(self.X)
        mask = np.asarray(mask, dtype=bool)
        lhs = np.broadcast_to(lhs, mask.shape)
        rhs = np.broadcast_to(rhs, mask.shape)
        scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
        with np.errstate(invalid="ignore"):
            if strict:
                bad = mask & ~(lhs + self.slack * scale < rhs)
            else:
                bad = mask & ~(lhs - rhs <= self.slack * scale)
        result.hits += int(mask.sum())
        result.violation_count += int(bad.sum())
        for idx in np.flatnonzero(bad):
            if len(result.violations) >= MAX_WITNESSES:
                break
            d = None
            if d_index is not None and self.batch is not None:
                d = self.batch.disturbance(int(d_index[idx]))
            result.violations.append(Witness(
                [float(v) for v in self.X[idx]], float(lhs[idx] - rhs[idx]), indices, d))

    def ensure(self, key: str) -> None:
        self.results.setdefault(key, ImplicationResult(key, samples=len(self.X), min_hits=self.min_hits))


def _implication_ids(control_set: ControlSet) -> Tuple[str, ...]:
    ids = P1_IMPLICATIONS
    if control_set.case.value in ("P2", "P3"):
        ids += P2_IMPLICATIONS
    if control_set.case.value == "P3":
        ids += P3_IMPLICATIONS
    return ids


def _check_batch(system: ControlAffineSystem, spec: VRCLFSpec, X: np.ndarray,
                 slack: float, min_hits: int) -> ImplicationReport:
    batch = _Batch(system, X)
    rec = Recorder(batch.X, batch, slack, min_hits)
    U = system.U
    eps = spec.epsilon

    V = spec.values(batch.X)
    dom = dominance_mask(spec.gains, V, slack)
    rho = np.stack([np.asarray(spec.rho(np.maximum(v, 0.0)), dtype=float) for v in V])
    lie_v = [batch.lie(v) for v in spec.V]
    eta = np.asarray(spec.eta.value(batch.X), dtype=float)
    lf_eta, lg_eta, arg_eta = batch.lie(spec.eta)
    W = np.asarray(spec.W.value(batch.X), dtype=float)
    lf_w, lg_w, arg_w = batch.lie(spec.W)
    with np.errstate(all="ignore"):
        delta = np.asarray(spec.delta(np.maximum(eta, 0.0)), dtype=float)
        K = np.asarray(spec.Kfun(np.maximum(eta, 0.0)), dtype=float)
    eta_part = lf_eta + delta
    w_part = lf_w - K * W

    low = eta <= eps
    high = eta >= 0
    shell = high & low

    for key in _implication_ids(U):
        rec.ensure(key)

    for i, (lf, lg, arg) in enumerate(lie_v):
        v_part = lf + rho[i]
        rec.record("v-flat", low & dom[i] & _is_flat(lg, lf), v_part, 0.0, (i,), arg)
        for j in range(i + 1, spec.k):
            lf_j, lg_j, _ = lie_v[j]
            pair = low & dom[i] & dom[j] & (lg * lg_j < 0)
            with np.errstate(all="ignore"):
                ratio = np.where(pair, lg / np.where(pair, lg_j, 1.0), 0.0)
            rec.record("v-pair", pair, v_part, ratio * (lf_j + rho[j]), (i, j), arg)

        cross_eta = shell & dom[i] & (lg_eta * lg < 0)
        cross_w = shell & dom[i] & (lg_w * lg < 0)
        with np.errstate(all="ignore"):
            r_eta = np.where(cross_eta, lg_eta / np.where(cross_eta, lg, 1.0), 0.0)
            r_w = np.where(cross_w, lg_w / np.where(cross_w, lg, 1.0), 0.0)
        rec.record("eta-v-pair", cross_eta, eta_part, r_eta * v_part, (i,), arg_eta)
        rec.record("w-v-pair", cross_w, w_part, r_w * v_part, (i,), arg_w)

        if U.case.value in ("P2", "P3"):
            rec.record("v-lower-input", dom[i] & low & (lg > 0), v_part - U.a * lg, 0.0, (i,), arg)
        if U.case.value == "P3":
            rec.record("v-upper-input", dom[i] & low & (lg < 0), v_part + U.b * lg, 0.0, (i,), arg)

    rec.record("eta-flat", high & _is_flat(lg_eta, lf_eta), eta_part, 0.0, (), arg_eta)
    rec.record("w-flat", high & _is_flat(lg_w, lf_w), w_part, 0.0, (), arg_w)
    mixed = high & (lg_eta * lg_w < 0)
    with np.errstate(all="ignore"):
        ratio = np.where(mixed, lg_eta / np.where(mixed, lg_w, 1.0), 0.0)
    rec.record("eta-w-pair", mixed, eta_part, ratio * w_part, (), arg_eta)

    if U.case.value in ("P2", "P3"):
        rec.record("eta-lower-input", high & (lg_eta > 0), eta_part - U.a * lg_eta, 0.0, (), arg_eta)
        rec.record("w-lower-input", high & (lg_w > 0), w_part - U.a * lg_w, 0.0, (), arg_w)
    if U.case.value == "P3":
        rec.record("eta-upper-input", high & (lg_eta < 0), eta_part + U.b * lg_eta, 0.0, (), arg_eta)
        rec.record("w-upper-input", high & (lg_w < 0), w_part + U.b * lg_w, 0.0, (), arg_w)

    return ImplicationReport(rec.results, len(batch.X), not system.exact_max)


def check_implications(system: ControlAffineSystem, spec: VRCLFSpec, sampler: BoxSampler,
                       samples: int = 100000, slack: float = ANTECEDENT_SLACK,
                       min_hits: int = MIN_HITS, batch_size: int = BATCH_SIZE,
                       workers: int = 1) -> ImplicationReport:
    """
    Sampled check of every implication that applies to the control set.

    The box draw is topped up by rejection sampling when the shell
    {0 <= eta <= epsilon} is thinly covered; exhaustion is recorded in the
    report notes and shows up as sparse or vacuous statuses.
    """
    sizes = [min(batch_size, samples - start) for start in range(0, samples, batch_size)]
    draws = [sampler.draw(size) for size in sizes]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda X: _check_batch(system, spec, X, slack, min_hits), draws))
    else:
        parts = [_check_batch(system, spec, X, slack, min_hits) for X in draws]

    report = ImplicationReport({}, 0)
    for part in parts:
        report.merge(part)

    if not spec.degenerate and spec.eta.is_constant is False:
        wanted = max(min_hits * 100, samples // 100)

        def in_shell(X):
            values = np.asarray(spec.eta.value(X), dtype=float)
            return (values >= 0) & (values <= spec.epsilon)

        covered = sum(int(in_shell(X).sum()) for X in draws)
        if covered < wanted:
            try:
                extra = sampler.draw_where(in_shell, wanted - covered, batch=batch_size)
                report.merge(_check_batch(system, spec, extra, slack, min_hits))
                report.notes.append(f"shell topped up with {len(extra)} rejection samples")
            except SamplerExhaustedError as e:
                logger.warning(f"Shell coverage is thin: {e}")
                report.notes.append(f"shell sampler exhausted: {e}")

    for result in report.results.values():
        if result.status == "sparse":
            logger.warning(f"Implication {result.id} has only {result.hits} antecedent hits")
    logger.info(f"Checked {len(report.results)} implications on {report.samples} samples: "
                f"{'pass' if report.passed else 'fail'}")
    return report


def check_sandwich(spec: VRCLFSpec, sampler: BoxSampler, samples: int = 10000,
                   slack: float = ANTECEDENT_SLACK) -> ImplicationReport:
    """Sandwich bounds on max V, W >= 1, eta(0) < 0 and the 2r-ball inside {eta < 0}"""
    X = sampler.draw(samples)
    rec = Recorder(X, None, slack, 1)
    V = spec.values(X).max(axis=0)
    norms = np.linalg.norm(X, axis=1)
    if spec.a1 is not None:
        rec.record("sandwich-lower", np.ones(len(X), dtype=bool), spec.a1(norms), V)
    if spec.a2 is not None:
        rec.record("sandwich-upper", np.ones(len(X), dtype=bool), V, spec.a2(norms))
    rec.record("W>=1", np.ones(len(X), dtype=bool), 1.0, np.asarray(spec.W.value(X), dtype=float))

    origin = np.zeros((1, spec.n))
    rec_origin = Recorder(origin, None, 0.0, 1)
    rec_origin.record("eta(0)<0", np.ones(1, dtype=bool),
                      np.asarray(spec.eta.value(origin), dtype=float), -np.finfo(float).tiny)

    ball = BallSampler(spec.n, 2.0 * spec.r, seed=sampler.seed + 1).draw(samples)
    rec_ball = Recorder(ball, None, 0.0, 1)
    rec_ball.record("ball-2r", np.ones(len(ball), dtype=bool),
                    np.asarray(spec.eta.value(ball), dtype=float), -np.finfo(float).tiny)

    report = ImplicationReport(rec.results, len(X))
    report.merge(ImplicationReport(rec_origin.results, 0))
    report.merge(ImplicationReport(rec_ball.results, 0))
    return report


def check_local_law(system: ControlAffineSystem, spec: VRCLFSpec, samples: int = 10000,
                    seed: int = 0, slack: float = ANTECEDENT_SLACK) -> ImplicationReport:
    """Local decrease of every dominant V_i under the local law on the ball of radius 2r"""
    X = BallSampler(spec.n, 2.0 * spec.r, seed).draw(samples)
    X = X[np.linalg.norm(X, axis=1) > 0]
    batch = _Batch(system, X)
    rec = Recorder(batch.X, batch, slack, MIN_HITS)
    u = np.asarray(spec.local_law(batch.X), dtype=float)
    inside = (u >= system.U.lower) & (u <= system.U.upper)
    rec.record("local-law-admissible", np.ones(len(u), dtype=bool), (~inside).astype(float), 0.0)
    V = spec.values(batch.X)
    dom = dominance_mask(spec.gains, V, slack)
    for i, phi in enumerate(spec.V):
        lf, lg, arg = batch.lie(phi)
        rho = np.asarray(spec.rho(np.maximum(V[i], 0.0)), dtype=float)
        rec.record("local-law", dom[i], lf + lg * u, -rho, (i,), arg)
    return ImplicationReport(rec.results, len(batch.X), not system.exact_max)


# ----------------------------------------------------------------------
# feedback synthesis
# ----------------------------------------------------------------------

def bump(s: float) -> float:
    """Smooth step: 0 for s <= 0, 1 for s >= 1"""
    if s <= 0:
        return 0.0
    if s >= 1:
        return 1.0
    a = math.exp(-1.0 / s)
    b = math.exp(-1.0 / (1.0 - s))
    return a / (a + b)


class _Point:
    """Lazily computed quantities at one state"""

    def __init__(self, system: ControlAffineSystem, spec: VRCLFSpec, x: np.ndarray):
        self.system = system
        self.spec = spec
        self.x = np.asarray(x, dtype=float)
        self._batch: Optional[_Batch] = None
        self._values: Optional[np.ndarray] = None

    @property
    def batch(self) -> _Batch:
        if self._batch is None:
            self._batch = _Batch(self.system, self.x)
        return self._batch

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = self.spec.values(self.x[None, :])[:, 0]
        return self._values

    def lie(self, phi: ScalarField) -> Tuple[float, float]:
        lf, lg, _ = self.batch.lie(phi)
        return float(lf[0]), float(lg[0])

    @property
    def eta(self) -> float:
        return float(self.spec.eta.value(self.x))


def _eta_w_constraints(point: _Point) -> List[AffineConstraint]:
    spec = point.spec
    eta = point.eta
    lf_eta, lg_eta = point.lie(spec.eta)
    lf_w, lg_w = point.lie(spec.W)
    W = float(spec.W.value(point.x))
    delta = float(spec.delta(max(eta, 0.0)))
    K = float(spec.Kfun(max(eta, 0.0)))
    return [
        AffineConstraint(lf_eta + 0.75 * delta, lg_eta, "eta"),
        AffineConstraint(lf_w - 1.5 * K * W, lg_w, "W"),
    ]


def _v_constraints(point: _Point, slack: float = ANTECEDENT_SLACK) -> List[AffineConstraint]:
    spec = point.spec
    mask = dominance_mask(spec.gains, point.values[:, None], slack)[:, 0]
    constraints = []
    for j in range(spec.k):
        if not mask[j]:
            continue
        lf, lg = point.lie(spec.V[j])
        rho = float(spec.rho(max(point.values[j], 0.0)))
        constraints.append(AffineConstraint(lf + 0.75 * rho, lg, f"V{j + 1}"))
    return constraints


def _solve_at(constraints: List[AffineConstraint], point: _Point, region: str) -> float:
    if not constraints:
        return point.system.U.clamp(0.0)
    try:
        return solve(constraints, point.system.U)
    except InfeasibleError as e:
        raise e.at(region, point.x)


def sub_controller_k1(system: ControlAffineSystem, spec: VRCLFSpec, x, _point: Optional[_Point] = None) -> float:
    """eta decrease and W growth bound on {eta > 0}"""
    point = _point or _Point(system, spec, x)
    return _solve_at(_eta_w_constraints(point), point, "k1")


def sub_controller_k2(system: ControlAffineSystem, spec: VRCLFSpec, x, _point: Optional[_Point] = None) -> float:
    """Decrease of every active V_j on {eta < epsilon, x != 0}"""
    point = _point or _Point(system, spec, x)
    return _solve_at(_v_constraints(point), point, "k2")


def sub_controller_k3(system: ControlAffineSystem, spec: VRCLFSpec, x, _point: Optional[_Point] = None) -> float:
    """Both constraint families on the shell 0 < eta < epsilon"""
    point = _point or _Point(system, spec, x)
    return _solve_at(_eta_w_constraints(point) + _v_constraints(point), point, "k3")


REGIONS = ("origin", "local", "local-k2", "k2", "k2-k3", "k3", "k3-k1", "k1")


class FeedbackLaw:
    """
    Region-blended state feedback. Sub-controllers are evaluated pointwise
    with a min-norm selection, so the law is piecewise and not certified
    smooth; the Lyapunov decrease inequalities are what `certificates`
    checks.
    """

    def __init__(self, system: ControlAffineSystem, spec: VRCLFSpec):
        self.system = system
        self.spec = spec

    def region(self, x) -> str:
        x = np.asarray(x, dtype=float)
        norm = float(np.linalg.norm(x))
        r = self.spec.r
        if norm == 0.0:
            return "origin"
        if norm < r:
            return "local"
        if norm <= 2.0 * r:
            return "local-k2"
        if self.spec.degenerate:
            return "k2"
        eta = float(self.spec.eta.value(x))
        eps = self.spec.epsilon
        if eta > 0.8 * eps:
            return "k1"
        if eta >= 0.6 * eps:
            return "k3-k1"
        if eta > 0.4 * eps:
            return "k3"
        if eta >= 0.2 * eps:
            return "k2-k3"
        return "k2"

    def weight(self, name: str, x) -> float:
        """Bump weight of the second controller of a blended region"""
        x = np.asarray(x, dtype=float)
        if name == "local-k2":
            r2 = self.spec.r ** 2
            return bump((float(x @ x) - r2) / (3.0 * r2))
        eta = float(self.spec.eta.value(x))
        if name == "k3-k1":
            return bump(5.0 * eta / self.spec.epsilon - 3.0)
        if name == "k2-k3":
            return bump(5.0 * eta / self.spec.epsilon - 1.0)
        raise DomainError(f"region {name} is not a blend")

    def branch(self, name: str, x) -> float:
        """Evaluate one region rule at x regardless of where x lies"""
        x = np.asarray(x, dtype=float)
        point = _Point(self.system, self.spec, x)
        U = self.system.U
        if name == "origin":
            return 0.0
        if name == "local":
            return U.clamp(float(self.spec.local_law(x)))
        if name == "k1":
            return sub_controller_k1(self.system, self.spec, x, point)
        if name == "k2":
            return sub_controller_k2(self.system, self.spec, x, point)
        if name == "k3":
            return sub_controller_k3(self.system, self.spec, x, point)

        first, second = {"local-k2": ("local", "k2"), "k2-k3": ("k2", "k3"), "k3-k1": ("k3", "k1")}[name]
        p = self.weight(name, x)
        u_first = self.branch(first, x) if p < 1.0 else 0.0
        u_second = self.branch(second, x) if p > 0.0 else 0.0
        return U.clamp((1.0 - p) * u_first + p * u_second)

    def __call__(self, x) -> float:
        return self.branch(self.region(x), x)

    eval = __call__


def synthesize(system: ControlAffineSystem, spec: VRCLFSpec, regularize: bool = True) -> FeedbackLaw:
    """
    Feedback law for a VRCLF. Gains that are not positive definite are
    regularized first so every active index has V_j > 0 away from the origin.
    """
    if system.n != spec.n:
        raise DomainError(f"system has {system.n} states, spec has {spec.n}")
    if regularize and needs_regularization(spec.gains):
        logger.info("Regularizing gains before synthesis")
        spec = VRCLFSpec(
            spec.V, spec.eta, spec.W, spec.delta, spec.Kfun, spec.rho, spec.epsilon,
            regularize_gains(spec.gains), spec.local_feedback, spec.r, spec.a1, spec.a2, spec.name,
        )
    return FeedbackLaw(system, spec)


@dataclass
class Certificate:
    eta_residual: Optional[float] = None
    w_residual: Optional[float] = None
    v_residuals: Dict[int, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        values = [v for v in (self.eta_residual, self.w_residual) if v is not None]
        values += list(self.v_residuals.values())
        return max(values) if values else -math.inf

    def ok(self, tol: float = CERTIFICATE_TOL) -> bool:
        return self.worst <= tol


def certificates(system: ControlAffineSystem, spec: VRCLFSpec, law: FeedbackLaw, x,
                 u: Optional[float] = None, slack: float = ANTECEDENT_SLACK) -> Certificate:
    """
    Residuals of the closed-loop decrease inequalities at x (<= 0 is good):
    half delta and twice K where eta > 0, half rho for active V_i where
    eta < epsilon and x != 0.
    """
    x = np.asarray(x, dtype=float)
    u = law(x) if u is None else u
    point = _Point(system, law.spec, x)
    cert = Certificate()
    eta = point.eta
    if not law.spec.degenerate and eta > 0:
        lf, lg = point.lie(law.spec.eta)
        cert.eta_residual = lf + u * lg + 0.5 * float(law.spec.delta(eta))
        lf, lg = point.lie(law.spec.W)
        W = float(law.spec.W.value(x))
        cert.w_residual = lf + u * lg - 2.0 * float(law.spec.Kfun(eta)) * W
    if (law.spec.degenerate or eta < law.spec.epsilon) and np.any(x != 0):
        mask = dominance_mask(law.spec.gains, point.values[:, None], slack)[:, 0]
        for i in range(law.spec.k):
            if mask[i]:
                lf, lg = point.lie(law.spec.V[i])
                cert.v_residuals[i] = lf + u * lg + 0.5 * float(law.spec.rho(max(point.values[i], 0.0)))
    return cert
