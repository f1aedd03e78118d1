"""
Continuous stirred tank reactors c' = D (c_f - c) + S v(c) with the
dilution rate D in [0, D_max] as the only input.

The pipeline follows the usual route: conservation pairs and the rate
hypotheses, equilibria, normalization of a chosen equilibrium to 1_n, the
logarithmic coordinates x = ln c with u = D - 1, the coordinate-wise VRCLF
data on top of them, the sampled condition checks in concentration space and
finally a bounded feedback D(c).

The cubic autocatalytic step 1 -> 2 with rate k c1 c2^2 is built in, both in
original units and in the normalized (theta, mu) form.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import sympy as sp
from scipy.linalg import null_space

from vrclf.corollary_lab import CorollaryConfig, build_spec, check_local_decay
from vrclf.errors import ConvergenceError, DomainError, HypothesisError, NonFiniteError, SamplerExhaustedError
from vrclf.feasibility import ControlSet
from vrclf.fields import ScalarField, Univariate, make_symbols
from vrclf.gain_calculus import GainMatrix, MonotoneFn, identity, power, scaled_inverse
from vrclf.vclf_core import (
    ANTECEDENT_SLACK, MIN_HITS, BoxSampler, ControlAffineSystem, FeedbackLaw,
    ImplicationReport, ImplicationResult, Recorder, VRCLFSpec, dominance_mask, synthesize,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CONSERVATION_TOL = 1e-10
ROOT_RTOL = 1e-8
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 100
BISECTION_MAX_ITER = 200
DEFAULT_EPSILON = 0.1
DEFAULT_LAMBDA = 0.9
DEFAULT_LOCAL_RADIUS = 0.1
CONCENTRATION_FLOOR = 1e-3
# Newton iterates stay below upper * e^LOG_HEADROOM
LOG_HEADROOM = math.log(1e3)


def species_names(n: int) -> List[str]:
    return [f"c{i + 1}" for i in range(n)]


def log_names(n: int) -> List[str]:
    return [f"x{i + 1}" for i in range(n)]


# ----------------------------------------------------------------------
# networks
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReactionNetwork:
    """Stoichiometry, rate laws over c1..cn, feed and the dilution-rate ceiling"""
    S: np.ndarray
    rates: Tuple[ScalarField, ...]
    c_f: np.ndarray
    D_max: float
    name: str = ""

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "c_f", np.asarray(self.c_f, dtype=float))
        object.__setattr__(self, "rates", tuple(self.rates))
        n, m = S.shape
        if len(self.rates) != m:
            raise DomainError(f"stoichiometric matrix has {m} columns but {len(self.rates)} rate laws were given")
        if self.c_f.shape != (n,):
            raise DomainError(f"feed vector must have {n} entries")
        if np.any(self.c_f < 0):
            raise DomainError("feed concentrations must be nonnegative")
        if self.D_max <= 0:
            raise DomainError(f"D_max must be positive, got {self.D_max}")
        for rate in self.rates:
            if rate.n != n:
                raise DomainError(f"rate {rate.name or '?'} is not a function of {n} concentrations")

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]

    @property
    def species(self) -> List[str]:
        return species_names(self.n)

    def rate_values(self, C) -> np.ndarray:
        """(N, m) reaction rates, or (m,) for one state"""
        C = np.asarray(C, dtype=float)
        values = [np.asarray(r.value(np.atleast_2d(C)), dtype=float) for r in self.rates]
        V = np.stack(values, axis=-1) if values else np.zeros((len(np.atleast_2d(C)), 0))
        return V[0] if C.ndim == 1 else V

    def production(self, C) -> np.ndarray:
        """S v(c)"""
        return self.rate_values(C) @ self.S.T

    def rhs(self, c, D: float) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        return D * (self.c_f - c) + self.production(c)

    def jacobian(self, c, D: float) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        grads = np.stack([r.gradient(c) for r in self.rates]) if self.rates else np.zeros((0, self.n))
        return -D * np.eye(self.n) + self.S @ grads

    def reactants(self) -> List[Tuple[int, int]]:
        """(species i, reaction j) with S_ij < 0"""
        return [(i, j) for i in range(self.n) for j in range(self.m) if self.S[i, j] < 0]

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "S": self.S.tolist(),
            "rates": [r.to_tree() for r in self.rates],
            "c_f": self.c_f.tolist(),
            "D_max": self.D_max,
        }

    @staticmethod
    def from_dict(data: Dict) -> "ReactionNetwork":
        try:
            S = np.atleast_2d(np.asarray(data["S"], dtype=float))
            names = species_names(S.shape[0])
            rates = [ScalarField.parse(tree, names, name=f"v{j + 1}") for j, tree in enumerate(data["rates"])]
            return ReactionNetwork(S, tuple(rates), np.asarray(data["c_f"], dtype=float),
                                   float(data["D_max"]), data.get("name", ""))
        except KeyError as e:
            raise DomainError(f"network definition is missing field {e}")


@dataclass(frozen=True)
class ConservationPair:
    """S'p = q with q >= 0"""
    p: np.ndarray
    q: np.ndarray

    def to_dict(self) -> Dict:
        return {"p": [float(v) for v in self.p], "q": [float(v) for v in self.q]}


@dataclass
class ConservationData:
    """Pairs for the linear bounds plus the constants b, R and the rate-growth gain"""
    pairs: List[ConservationPair]
    b: float
    R: float
    gfun: MonotoneFn

    @property
    def N(self) -> int:
        return len(self.pairs)

    def defects(self, net: ReactionNetwork, C) -> np.ndarray:
        """(N_samples, N) values max(p'c_f - p'c, 0)"""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        P = np.stack([pair.p for pair in self.pairs], axis=1)
        return np.maximum(net.c_f @ P - C @ P, 0.0)

    def to_dict(self) -> Dict:
        return {"conservation": [pair.to_dict() for pair in self.pairs], "b": self.b, "R": self.R,
                "g": self.gfun.to_dict()}

    @staticmethod
    def from_dict(net: ReactionNetwork, data: Dict) -> "ConservationData":
        supplied = [(row["p"], row.get("q")) for row in data.get("conservation", [])]
        pairs = find_conservation(net.S, supplied, include_null_space=not supplied)
        gfun = MonotoneFn.from_dict(data["g"]) if "g" in data else identity()
        return ConservationData(pairs, float(data.get("b", 1.0)), float(data.get("R", 1.0)), gfun)


def find_conservation(S, supplied: Sequence[Tuple[Sequence[float], Optional[Sequence[float]]]] = (),
                      include_null_space: bool = True) -> List[ConservationPair]:
    """
    Left null space of S (pairs with q = 0) plus supplied pairs whose S'p is
    nonnegative and matches q. Supplied pairs that fail are logged and dropped.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    pairs: List[ConservationPair] = []
    if include_null_space:
        basis = null_space(S.T)
        for col in basis.T:
            pairs.append(ConservationPair(col, np.zeros(S.shape[1])))
    for p, q in supplied:
        p = np.asarray(p, dtype=float)
        image = S.T @ p
        if q is not None and np.max(np.abs(image - np.asarray(q, dtype=float))) > CONSERVATION_TOL:
            logger.warning(f"Rejected conservation pair p={p.tolist()}: S'p = {image.tolist()} differs from q")
            continue
        if np.any(image < -CONSERVATION_TOL):
            logger.warning(f"Rejected conservation pair p={p.tolist()}: S'p has a negative component")
            continue
        pairs.append(ConservationPair(p, np.where(np.abs(image) <= CONSERVATION_TOL, 0.0, image)))
    return pairs


def stoichiometric_sigma(S) -> float:
    """max_i of sum |S_ij| over the reactions consuming species i"""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    return float(np.max(np.sum(np.where(S < 0, -S, 0.0), axis=1)))


# ----------------------------------------------------------------------
# hypotheses
# ----------------------------------------------------------------------

def _result_from_counts(key: str, samples: int, hits: int, bad: int) -> ImplicationResult:
    return ImplicationResult(key, samples=samples, hits=hits, violation_count=bad, min_hits=1)


def check_hypotheses(net: ReactionNetwork, cons: ConservationData, sampler: Optional[BoxSampler] = None,
                     samples: int = 20000, slack: float = ANTECEDENT_SLACK) -> ImplicationReport:
    """
    Conservation pairs, the linear bound on max c, the rate growth bound for
    every reactant and zero rates when a reactant is absent.
    """
    results: Dict[str, ImplicationResult] = {}
    bad = sum(
        int(np.max(np.abs(net.S.T @ pair.p - pair.q)) > CONSERVATION_TOL or np.any(pair.q < 0))
        for pair in cons.pairs
    )
    results["conservation"] = _result_from_counts("conservation", cons.N, cons.N, bad)
    if not cons.pairs:
        results["conservation"].violation_count = 1

    if sampler is None:
        hi = 3.0 * (cons.b + 1.0 + float(np.max(net.c_f)))
        sampler = BoxSampler(np.zeros(net.n), np.full(net.n, hi))
    C = sampler.draw(samples)
    rec = Recorder(C, None, slack, 1)
    everywhere = np.ones(len(C), dtype=bool)
    if cons.pairs:
        bound = cons.b + cons.R * cons.defects(net, C).sum(axis=1)
        rec.record("max-bound", everywhere, C.max(axis=1), bound)
    V = net.rate_values(C)
    rec.record("rates-nonneg", everywhere, -V.min(axis=1) if net.m else np.zeros(len(C)), 0.0)
    growth = np.asarray(cons.gfun(C.max(axis=1)), dtype=float)
    rec.ensure("rate-bound")
    rec.ensure("reactant-zero")
    for i, j in net.reactants():
        rec.record("rate-bound", everywhere, V[:, j], growth * C[:, i], (i, j))
        starved = C.copy()
        starved[:, i] = 0.0
        rec.record("reactant-zero", everywhere, np.abs(net.rate_values(starved)[:, j]), 0.0, (i, j))
    results.update(rec.results)
    report = ImplicationReport(results, len(C))
    logger.info(f"Network hypotheses for {net.name or 'network'}: {'pass' if report.passed else 'fail'}")
    return report


def require_hypotheses(net: ReactionNetwork, cons: ConservationData, **kwargs) -> ImplicationReport:
    report = check_hypotheses(net, cons, **kwargs)
    if not report.passed:
        failed = next(r for r in report.results.values() if r.violation_count)
        witness = failed.violations[0].to_dict() if failed.violations else None
        raise HypothesisError(f"network hypothesis '{failed.id}' fails", witness)
    return report


# ----------------------------------------------------------------------
# equilibria
# ----------------------------------------------------------------------

@dataclass
class EquilibriumReport:
    roots: List[np.ndarray]
    residuals: List[float]
    method: str
    notes: List[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.roots)

    def to_dict(self) -> Dict:
        return {
            "method": self.method,
            "count": self.count,
            "roots": [r.tolist() for r in self.roots],
            "residuals": self.residuals,
            "notes": self.notes,
        }


def _dedupe(roots: List[np.ndarray], rtol: float = ROOT_RTOL) -> List[np.ndarray]:
    unique: List[np.ndarray] = []
    for root in roots:
        if not any(np.max(np.abs(root - u)) <= rtol * max(1.0, float(np.max(np.abs(u)))) for u in unique):
            unique.append(root)
    return sorted(unique, key=lambda r: tuple(r))


def _residual(net: ReactionNetwork, D_star: float, x: np.ndarray, log_cap: float) -> float:
    """max |c'| at c = e^x, inf when x leaves the search box or the rates overflow"""
    if not np.all(np.isfinite(x)) or np.max(x) > log_cap:
        return math.inf
    try:
        return float(np.max(np.abs(net.rhs(np.exp(x), D_star))))
    except NonFiniteError:
        return math.inf


def _newton(net: ReactionNetwork, D_star: float, c0: np.ndarray, log_cap: float) -> Optional[np.ndarray]:
    """Damped Newton in log coordinates so iterates stay positive"""
    x = np.log(c0)
    for _ in range(NEWTON_MAX_ITER):
        c = np.exp(x)
        norm = _residual(net, D_star, x, log_cap)
        if not math.isfinite(norm):
            return None
        if norm <= NEWTON_TOL * max(1.0, float(np.max(c))):
            return c
        try:
            J = net.jacobian(c, D_star) * c[None, :]
            step = np.linalg.solve(J, -net.rhs(c, D_star))
        except (np.linalg.LinAlgError, NonFiniteError):
            return None
        t = 1.0
        while t > 1e-10:
            trial = x + t * step
            if _residual(net, D_star, trial, log_cap) < norm:
                break
            t *= 0.5
        else:
            return None
        x = trial
    return None


def equilibria(net: ReactionNetwork, D_star: float = 1.0, grid: int = 10,
               upper: Optional[float] = None) -> EquilibriumReport:
    """Positive equilibria of c' = D*(c_f - c) + S v(c) by damped Newton from a log grid of starts"""
    if not 0 < D_star < net.D_max:
        raise DomainError(f"D* must lie in (0, D_max) = (0, {net.D_max}), got {D_star}")
    upper = upper or 2.0 * max(1.0, float(net.c_f.sum()))
    axis = np.logspace(math.log10(CONCENTRATION_FLOOR), math.log10(upper), grid)
    starts = np.array(np.meshgrid(*[axis] * net.n, indexing="ij")).reshape(net.n, -1).T
    log_cap = math.log(upper) + LOG_HEADROOM
    found = []
    for c0 in starts:
        root = _newton(net, D_star, c0, log_cap)
        if root is not None:
            found.append(root)
    if not found:
        raise ConvergenceError(f"Newton did not converge from any of {len(starts)} starts")
    roots = _dedupe(found)
    residuals = [float(np.max(np.abs(net.rhs(r, D_star)))) for r in roots]
    logger.info(f"Found {len(roots)} equilibria of {net.name or 'network'} at D*={D_star}")
    return EquilibriumReport(roots, residuals, "newton")


def _bisect(h: Callable[[float], float], lo: float, hi: float) -> float:
    f_lo = h(lo)
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        f_mid = h(mid)
        if (f_mid <= 0) == (f_lo <= 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def autocatalytic_equilibria(k: float, c_f: Sequence[float]) -> EquilibriumReport:
    """
    Equilibria of 1 -> 2 with rate k c1 c2^2 at D = 1. Conservation of
    c1 + c2 = M reduces them to the roots of h(y) = y - k (M - y) y^2 - c2f on
    [c2f, M], split into monotone pieces at the critical points of h.
    """
    c1f, c2f = (float(v) for v in c_f)
    if k <= 0 or c1f <= 0 or c2f < 0:
        raise DomainError(f"need k > 0, c1f > 0 and c2f >= 0, got k={k}, c_f={list(c_f)}")
    M = c1f + c2f

    def h(y: float) -> float:
        return y - k * (M - y) * y * y - c2f

    cuts = [c2f, M]
    disc = k * k * M * M - 3.0 * k
    if disc > 0:
        for y in ((k * M - math.sqrt(disc)) / (3.0 * k), (k * M + math.sqrt(disc)) / (3.0 * k)):
            if c2f < y < M:
                cuts.append(y)
    cuts = sorted(cuts)

    ys = []
    for lo, hi in zip(cuts, cuts[1:]):
        f_lo, f_hi = h(lo), h(hi)
        if f_lo == 0.0:
            ys.append(lo)
        if f_lo * f_hi < 0:
            ys.append(_bisect(h, lo, hi))
    if h(M) == 0.0:
        ys.append(M)
    # a root sitting on a critical point is a tangency
    for y in cuts[1:-1]:
        if abs(h(y)) <= 1e-14 * max(1.0, M):
            ys.append(y)

    roots = _dedupe([np.array([M - y, y]) for y in ys])
    residuals = []
    for c1, c2 in roots:
        rate = k * c1 * c2 * c2
        residuals.append(max(abs(c1f - c1 - rate), abs(c2f - c2 + rate)))

    report = EquilibriumReport(roots, residuals, "bisection")
    expected = 1 if k * M < 3 else 3
    if k * M != 3 and expected != len(roots):
        note = f"root count {len(roots)} differs from the k*M vs 3 rule ({expected}) at k*M={k * M:.6g}"
        logger.warning(note)
        report.notes.append(note)
    return report


def normalize(net: ReactionNetwork, c_star: Sequence[float], cons: Optional[ConservationData] = None
              ) -> Tuple[ReactionNetwork, Optional[ConservationData]]:
    """Rescale c -> c / c* so that c* becomes 1_n"""
    c_star = np.asarray(c_star, dtype=float)
    if np.any(c_star <= 0):
        raise DomainError("the equilibrium to normalize must be interior")
    names = species_names(net.n)
    symbols = make_symbols(names)
    rates = tuple(
        ScalarField(r.expr.subs({s: float(cs) * s for s, cs in zip(symbols, c_star)}, simultaneous=True),
                    names, name=r.name)
        for r in net.rates
    )
    scaled = ReactionNetwork(net.S / c_star[:, None], rates, net.c_f / c_star, net.D_max,
                             f"{net.name or 'network'} (normalized)")
    if cons is None:
        return scaled, None
    pairs = [ConservationPair(pair.p * c_star, pair.q) for pair in cons.pairs]
    return scaled, ConservationData(pairs, cons.b, cons.R, cons.gfun)


# ----------------------------------------------------------------------
# logarithmic coordinates
# ----------------------------------------------------------------------

def log_transform(net: ReactionNetwork, check_target: bool = True) -> ControlAffineSystem:
    """
    x = ln c, u = D - 1 in [-1, D_max - 1]:
    x_i' = (1 + u)(c_if e^-x_i - 1) + e^-x_i sum_j S_ij v_j(e^x)
    """
    if net.D_max < 1:
        raise DomainError(f"D_max={net.D_max} leaves no room for D = 1 at the target")
    if net.D_max == 1:
        logger.warning("D_max = 1 puts the target dilution on the edge of the input set")
    names = log_names(net.n)
    xs = make_symbols(names)
    cs = make_symbols(net.species)
    to_log = {c: sp.exp(x) for c, x in zip(cs, xs)}
    rates = [r.expr.subs(to_log, simultaneous=True) for r in net.rates]
    f, g = [], []
    for i in range(net.n):
        feed = float(net.c_f[i]) * sp.exp(-xs[i]) - 1
        production = sum((float(net.S[i, j]) * rates[j] for j in range(net.m)), sp.Integer(0))
        f.append(ScalarField(feed + sp.exp(-xs[i]) * production, names, name=f"f{i + 1}"))
        g.append(ScalarField(feed, names, name=f"g{i + 1}"))
    system = ControlAffineSystem(f, g, U=ControlSet.p3(1.0, net.D_max - 1.0), name=f"{net.name or 'network'} (log)")
    if check_target:
        residual = float(np.max(np.abs(system.drift(np.zeros(net.n)))))
        if residual > 1e-9:
            raise DomainError(f"1_n is not an equilibrium at D = 1 (residual {residual:.3g}); normalize first")
    return system


# ----------------------------------------------------------------------
# VRCLF data in logarithmic coordinates
# ----------------------------------------------------------------------

@dataclass
class CstrConfig:
    """
    Gains on |ln c|, the decay profile q_tilde over concentrations, the
    margins epsilon and omega, the local law gains in log coordinates and the
    radius of the ball where that law is certified.
    """
    gains_tilde: GainMatrix
    q_tilde: Callable
    epsilon: float = DEFAULT_EPSILON
    omega: float = 0.0
    kvec: Sequence[float] = ()
    r: float = DEFAULT_LOCAL_RADIUS
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.epsilon <= 0 or self.omega <= 0:
            raise DomainError(f"epsilon and omega must be positive, got {self.epsilon} and {self.omega}")
        self.kvec = np.asarray(self.kvec if len(self.kvec) else np.zeros(self.gains_tilde.k), dtype=float)


@dataclass
class CstrInstance:
    net: ReactionNetwork
    cons: ConservationData
    cfg: CstrConfig

    @property
    def sigma(self) -> float:
        return stoichiometric_sigma(self.net.S)

    @cached_property
    def system(self) -> ControlAffineSystem:
        return log_transform(self.net)

    def eta_field(self) -> ScalarField:
        """sum_l max(p_l'c_f - p_l'e^x, 0)^2 - epsilon"""
        names = log_names(self.net.n)
        xs = make_symbols(names)
        total = sp.Integer(0)
        for pair in self.cons.pairs:
            level = float(pair.p @ self.net.c_f) - sum(float(pi) * sp.exp(x) for pi, x in zip(pair.p, xs))
            total += sp.Max(level, 0) ** 2
        return ScalarField(total - self.cfg.epsilon, names, name="eta")

    def w_field(self, eta: ScalarField) -> ScalarField:
        """1 + epsilon + eta + sum_i e^-x_i"""
        xs = make_symbols(eta.state_vars)
        return ScalarField(1 + self.cfg.epsilon + eta.expr + sum(sp.exp(-x) for x in xs),
                           eta.state_vars, name="W")

    def k_function(self) -> Univariate:
        """K(eta) = D_max + sigma g(b + (N + epsilon) R/2 + (R/2) eta)"""
        net, cons, eps = self.net, self.cons, self.cfg.epsilon
        base = cons.b + (cons.N + eps) * cons.R / 2.0
        sigma, gfun = self.sigma, cons.gfun

        def K(s):
            s = np.asarray(s, dtype=float)
            return net.D_max + sigma * np.asarray(gfun(np.maximum(base + cons.R / 2.0 * s, 0.0)))
        return Univariate(K, "K")

    def log_q(self) -> Univariate:
        q_tilde = self.cfg.q_tilde

        def Q(s):
            with np.errstate(over="ignore"):
                return q_tilde(np.exp(np.asarray(s, dtype=float)))
        return Univariate(Q, "Q")

    @cached_property
    def corollary(self) -> CorollaryConfig:
        eta = self.eta_field()
        origin = float(eta.value(np.zeros(self.net.n)))
        if origin >= 0:
            raise HypothesisError(f"eta(0) = {origin:.6g} is not negative; the target breaks a conservation bound")
        return CorollaryConfig(
            system=self.system,
            gains_tilde=self.cfg.gains_tilde,
            Q=self.log_q(),
            eta=eta,
            W=self.w_field(eta),
            delta=min(self.cfg.epsilon, self.cfg.omega),
            Kfun=self.k_function(),
            epsilon=self.cfg.epsilon,
            kvec=self.cfg.kvec,
            r=self.cfg.r,
            name=self.net.name or "cstr",
            params=dict(self.cfg.params),
        )

    @cached_property
    def spec(self) -> VRCLFSpec:
        return build_spec(self.corollary)


def build_cstr_spec(net: ReactionNetwork, cons: ConservationData, cfg: CstrConfig,
                    verify: bool = True) -> VRCLFSpec:
    """VRCLF over the log coordinates; the network hypotheses are checked first"""
    if verify:
        require_hypotheses(net, cons)
    return CstrInstance(net, cons, cfg).spec


def check_w_bounds(inst: CstrInstance, sampler: Optional[BoxSampler] = None, samples: int = 10000,
                   slack: float = ANTECEDENT_SLACK) -> ImplicationReport:
    """max(-x_i) <= ln W and max(x_i) <= ln(b + N R/2 + (R/2) W)"""
    n = inst.net.n
    sampler = sampler or BoxSampler(np.full(n, -6.0), np.full(n, 3.0))
    X = sampler.draw(samples)
    W = np.asarray(inst.corollary.W.value(X), dtype=float)
    cons = inst.cons
    rec = Recorder(X, None, slack, 1)
    everywhere = np.ones(len(X), dtype=bool)
    rec.record("w-lower", everywhere, (-X).max(axis=1), np.log(W))
    rec.record("w-upper", everywhere, X.max(axis=1), np.log(cons.b + cons.N * cons.R / 2.0 + cons.R / 2.0 * W))
    return ImplicationReport(rec.results, len(X))


# ----------------------------------------------------------------------
# condition checks in concentration space
# ----------------------------------------------------------------------

def _slab_sampler(inst: CstrInstance, seed: int) -> BoxSampler:
    cons = inst.cons
    hi = cons.b + cons.R * cons.N * math.sqrt(2.0 * inst.cfg.epsilon)
    n = inst.net.n
    return BoxSampler(np.full(n, math.log(CONCENTRATION_FLOOR)), np.full(n, math.log(hi)), seed)


class _Concentrations:
    """Per-sample quantities shared by the condition checks"""

    def __init__(self, inst: CstrInstance, C: np.ndarray, slack: float):
        net, cfg = inst.net, inst.cfg
        self.C = C
        self.L = np.log(C)
        self.dom = dominance_mask(cfg.gains_tilde, np.abs(self.L).T, slack)
        defect = (inst.cons.defects(net, C) ** 2).sum(axis=1)
        self.slab = defect <= 2.0 * cfg.epsilon
        self.shell = self.slab & (defect >= cfg.epsilon)
        self.Sv = net.production(C)
        self.Qt = np.asarray(cfg.q_tilde(C), dtype=float)
        lo_f = np.minimum(net.c_f, 1.0)
        hi_f = np.maximum(net.c_f, 1.0)
        self.between = (C > lo_f) & (C < hi_f)
        self.outside = (C > hi_f) | (C < lo_f)


def check_cstr_conditions(inst: CstrInstance, samples: int = 100000, seed: int = 0,
                          slack: float = ANTECEDENT_SLACK, local_samples: int = 10000) -> ImplicationReport:
    """
    Sampled concentration-space conditions on the slab
    sum_l max(p_l'c_f - p_l'c, 0)^2 <= 2 epsilon, plus the local law near 1_n.
    """
    net, cfg = inst.net, inst.cfg
    sampler = _slab_sampler(inst, seed)

    def in_slab(X):
        return (inst.cons.defects(net, np.exp(X)) ** 2).sum(axis=1) <= 2.0 * cfg.epsilon

    notes = []
    try:
        C = np.exp(sampler.draw_where(in_slab, samples))
    except SamplerExhaustedError as e:
        logger.warning(f"Slab sampling ran dry: {e}")
        notes.append(str(e))
        C = np.exp(sampler.draw(samples))

    data = _Concentrations(inst, C, slack)
    rec = Recorder(C, None, slack, MIN_HITS)
    c_f = net.c_f
    L, Qt, Sv = data.L, data.Qt, data.Sv
    for key in ("pair-ratio", "feed-point", "shell-rate", "between-decay", "outside-decay"):
        rec.ensure(key)

    for i in range(net.n):
        for j in range(net.n):
            if i == j:
                continue
            cases = (data.between[:, i] & data.outside[:, j]) | (data.outside[:, i] & data.between[:, j])
            mask = data.dom[i] & data.dom[j] & data.slab & cases
            num = (c_f[j] - C[:, j]) * Sv[:, i] - (c_f[i] - C[:, i]) * Sv[:, j]
            den = C[:, i] * L[:, i] * Qt[:, i] * (c_f[j] - C[:, j]) - C[:, j] * L[:, j] * Qt[:, j] * (c_f[i] - C[:, i])
            with np.errstate(all="ignore"):
                ratio = np.where(mask, num / np.where(mask, den, 1.0), 0.0)
            rec.record("pair-ratio", mask, ratio, -1.0, (i, j))

        base = L[:, i] * Sv[:, i] + C[:, i] * L[:, i] ** 2 * Qt[:, i]
        rec.record("between-decay", data.dom[i] & data.slab & data.between[:, i], base, 0.0, (i,), strict=True)
        rec.record("outside-decay", data.dom[i] & data.slab & data.outside[:, i],
                   base + net.D_max * (c_f[i] - C[:, i]) * L[:, i], 0.0, (i,), strict=True)
        shell = data.dom[i] & data.shell & data.between[:, i]
        with np.errstate(all="ignore"):
            bound = np.where(shell, -(2.0 * cfg.epsilon / np.where(shell, c_f[i] - C[:, i], 1.0))
                             * (C[:, i] * L[:, i] * Qt[:, i] + Sv[:, i]), 0.0)
        rec.record("shell-rate", shell, cfg.omega, bound, (i,))

    # feed point: pin c_i = c_if on the same samples
    for i in range(net.n):
        if c_f[i] <= 0:
            continue
        pinned = C.copy()
        pinned[:, i] = c_f[i]
        at = _Concentrations(inst, pinned, slack)
        lf = math.log(c_f[i])
        q_f = float(np.asarray(cfg.q_tilde(np.array([c_f[i]])))[0])
        rec_pin = Recorder(pinned, None, slack, MIN_HITS)
        rec_pin.record("feed-point", at.dom[i] & at.slab, lf * at.Sv[:, i] + c_f[i] * lf * lf * q_f, 0.0, (i,))
        rec.results["feed-point"].merge(rec_pin.results["feed-point"])

    report = ImplicationReport(rec.results, len(C), notes=notes)
    report.merge(check_local_decay(inst.corollary, local_samples, seed + 1, slack))
    logger.info(f"Reactor conditions for {net.name or 'network'}: {'pass' if report.passed else 'fail'} "
                f"on {len(C)} slab samples")
    return report


# ----------------------------------------------------------------------
# bounded feedback
# ----------------------------------------------------------------------

class DilutionLaw:
    """D(c) = min(max(1 + u(ln c), 0), D_max) on top of a log-coordinate law"""

    def __init__(self, inst: CstrInstance, law: FeedbackLaw):
        self.inst = inst
        self.law = law

    @property
    def D_max(self) -> float:
        return self.inst.net.D_max

    def control(self, x) -> float:
        """u in log coordinates"""
        return self.law(x)

    def __call__(self, c) -> float:
        c = np.asarray(c, dtype=float)
        if np.any(c <= 0):
            raise DomainError("concentrations must be positive")
        return min(max(1.0 + self.law(np.log(c)), 0.0), self.D_max)


def stabilize(inst: CstrInstance, verify: bool = True) -> DilutionLaw:
    """Synthesized dilution law with D(1_n) = 1 and values in [0, D_max]"""
    if verify:
        require_hypotheses(inst.net, inst.cons)
    law = synthesize(inst.system, inst.spec)
    logger.info(f"Synthesized dilution law for {inst.net.name or 'network'} with D_max={inst.net.D_max}")
    return DilutionLaw(inst, law)


def dilution_law_bounds(law: DilutionLaw, points: int = 1000, seed: int = 0) -> Dict[str, float]:
    """D at the target and its range over concentrations drawn from the slab box"""
    X = _slab_sampler(law.inst, seed).draw(points)
    values = np.array([law(np.exp(x)) for x in X])
    return {
        "at_target": law(np.ones(law.inst.net.n)),
        "min": float(values.min()),
        "max": float(values.max()),
        "points": int(points),
    }


# ----------------------------------------------------------------------
# cubic autocatalysis 1 -> 2, rate k c1 c2^2
# ----------------------------------------------------------------------

def autocatalytic_network(k: float, c_f: Sequence[float], D_max: float) -> Tuple[ReactionNetwork, ConservationData]:
    """Original units; total mass c1 + c2 is conserved by the reaction"""
    c1, c2 = make_symbols(species_names(2))
    net = ReactionNetwork(np.array([[-1.0], [1.0]]), (ScalarField(k * c1 * c2 ** 2, species_names(2), name="v1"),),
                          np.asarray(c_f, dtype=float), D_max, "autocatalytic")
    pairs = find_conservation(net.S, [((-1.0, -1.0), (0.0,))], include_null_space=False)
    return net, ConservationData(pairs, float(np.sum(c_f)), 1.0, power(k, 2.0))


def _check_theta_mu(theta: float, mu: float) -> None:
    if theta <= 0 or mu <= 0:
        raise DomainError(f"theta and mu must be positive, got {theta} and {mu}")
    if mu * theta >= 1:
        raise DomainError(f"need mu < 1/theta so the product feed stays positive, got mu*theta={mu * theta}")


def autocatalytic_scaled(theta: float, mu: float, D_max: float) -> Tuple[ReactionNetwork, ConservationData]:
    """
    Normalized form with equilibrium 1_2 at D = 1: feed (1 + theta, 1 - mu theta),
    S = (-1, mu)', v = theta c1 c2^2, conservation pair p = (-mu, -1), q = 0.
    """
    _check_theta_mu(theta, mu)
    c1, c2 = make_symbols(species_names(2))
    net = ReactionNetwork(np.array([[-1.0], [mu]]), (ScalarField(theta * c1 * c2 ** 2, species_names(2), name="v1"),),
                          np.array([1.0 + theta, 1.0 - mu * theta]), D_max, "autocatalytic")
    pairs = find_conservation(net.S, [((-mu, -1.0), (0.0,))], include_null_space=False)
    scale = max(1.0, 1.0 / mu)
    return net, ConservationData(pairs, (1.0 + mu) * scale, scale, power(theta, 2.0))


def scaled_parameters(k: float, c_star: Sequence[float]) -> Tuple[float, float]:
    """(theta, mu) = (k c2*^2, c1*/c2*)"""
    c1, c2 = (float(v) for v in c_star)
    return k * c2 * c2, c1 / c2


def dmax_bound(theta: float, mu: float) -> Tuple[float, float]:
    """Lower bounds D_max must exceed: (1 + mu)^2 and (1 + mu)(theta (1 + mu)^2 + 1) / (mu theta)"""
    _check_theta_mu(theta, mu)
    return (1.0 + mu) ** 2, (1.0 + mu) * (theta * (1.0 + mu) ** 2 + 1.0) / (mu * theta)


def autocatalytic_constants(theta: float, mu: float, lam: float = DEFAULT_LAMBDA,
                            gamma: Optional[MonotoneFn] = None, epsilon: float = DEFAULT_EPSILON
                            ) -> Tuple[float, float]:
    """Largest admissible (A, omega) for the decay profile of `autocatalytic_q_tilde`"""
    _check_theta_mu(theta, mu)
    gamma = gamma or identity()
    inverse = scaled_inverse(gamma)
    up = math.exp(-2.0 * float(inverse(math.log(1.0 + theta))))
    down = math.exp(-float(gamma(abs(math.log(1.0 - mu * theta)))) / lam)
    A = min(1.0, up / (2.0 * (1.0 + theta)), down)
    omega = min(epsilon * theta / (1.0 + theta) * up, epsilon * (1.0 - mu * theta) ** 2 * down)
    return A, omega


def autocatalytic_q_tilde(theta: float, mu: float, lam: float = DEFAULT_LAMBDA,
                          gamma: Optional[MonotoneFn] = None, A: Optional[float] = None) -> Callable:
    """
    q(c) = A min(1, |1 - c|) / (2 |ln c|) min(c, (1 - mu theta)^2)
           exp(-max(gamma(|ln c|) / lam, 2 gamma^-1(|ln c|)))
    with the continuous value A (1 - mu theta)^2 / 2 at c = 1.
    """
    _check_theta_mu(theta, mu)
    gamma = gamma or identity()
    inverse = scaled_inverse(gamma)
    A = autocatalytic_constants(theta, mu, lam, gamma)[0] if A is None else A
    if not 0 < A <= 1:
        raise DomainError(f"A must lie in (0, 1], got {A}")
    floor = (1.0 - mu * theta) ** 2

    def q_tilde(c):
        c = np.asarray(c, dtype=float)
        with np.errstate(all="ignore"):
            L = np.abs(np.log(c))
            tiny = L <= 1e-12
            ratio = np.where(tiny, 0.5, np.minimum(1.0, np.abs(1.0 - c)) / (2.0 * np.where(tiny, 1.0, L)))
            L = np.where(np.isfinite(L), L, 0.0)
            decay = np.exp(-np.maximum(np.asarray(gamma(L)) / lam, 2.0 * np.asarray(inverse(L))))
            return A * ratio * np.minimum(c, floor) * decay
    return q_tilde


def autocatalytic_instance(theta: float = 1.0, mu: float = 0.5, D_max: float = 10.0,
                           lam: float = DEFAULT_LAMBDA, gamma: Optional[MonotoneFn] = None,
                           epsilon: float = DEFAULT_EPSILON, r: float = DEFAULT_LOCAL_RADIUS) -> CstrInstance:
    """
    Normalized autocatalytic reactor with gains gamma~12 = gamma,
    gamma~21 = gamma^-1(lam s) and the local law D ~ c2^2, i.e. k = (0, 2).
    """
    if not 0 < lam < 1:
        raise DomainError(f"lambda must lie in (0, 1), got {lam}")
    bounds = dmax_bound(theta, mu)
    if D_max <= max(bounds):
        logger.warning(f"D_max={D_max} does not exceed the sufficient bounds {bounds}")
    gamma = gamma or identity()
    net, cons = autocatalytic_scaled(theta, mu, D_max)
    A, omega = autocatalytic_constants(theta, mu, lam, gamma, epsilon)
    gains = GainMatrix.from_entries(2, {(1, 2): gamma, (2, 1): scaled_inverse(gamma, lam, 1.0)})
    cfg = CstrConfig(
        gains_tilde=gains,
        q_tilde=autocatalytic_q_tilde(theta, mu, lam, gamma, A),
        epsilon=epsilon,
        omega=omega,
        kvec=(0.0, 2.0),
        r=r,
        params={"theta": theta, "mu": mu, "lam": lam, "A": A, "omega": omega, "dmax_bound": list(bounds)},
    )
    return CstrInstance(net, cons, cfg)


def autocatalytic_target(k: float, c_f: Sequence[float], root: int, D_max: Optional[float] = None,
                         **kwargs) -> CstrInstance:
    """
    Normalized instance around one equilibrium of the reactor in original units,
    picked by its index in the roots of `autocatalytic_equilibria` (sorted by c1).
    With k (c1f + c2f) > 3 the middle root sits between two stable ones, so
    open-loop runs can settle away from the target. D_max defaults to 5% above
    the sufficient bound.
    """
    report = autocatalytic_equilibria(k, c_f)
    if not -report.count <= root < report.count:
        raise DomainError(f"root index {root} out of range for {report.count} equilibria")
    c_star = report.roots[root]
    theta, mu = scaled_parameters(k, c_star)
    if D_max is None:
        D_max = 1.05 * max(dmax_bound(theta, mu))
    inst = autocatalytic_instance(theta, mu, D_max, **kwargs)
    others = [list(np.log(r / c_star)) for i, r in enumerate(report.roots) if i != root % report.count]
    inst.cfg.params.update({"k": k, "c_f": list(c_f), "c_star": list(c_star), "other_roots": others})
    logger.info(f"Targeting equilibrium {list(np.round(c_star, 6))} of {report.count} with theta={theta:.6g}, "
                f"mu={mu:.6g}")
    return inst
