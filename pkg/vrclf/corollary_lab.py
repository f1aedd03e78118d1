"""
Coordinate-wise quadratic VRCLFs.

A system x_i' = f_i(x) + g_i(x) u is certified with V_i = x_i^2 / 2, gains
given on the |x| scale and a decay profile Q. The module translates that
data into a VRCLFSpec, checks the coordinate form of the implications by
sampling and builds the two third-order cascade instances used throughout
the test-suite: the global pair condition (`cascade_instance`) and the
slab-restricted one with a nontrivial eta/W pair (`slab_instance`).
"""
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import sympy as sp

from vrclf.errors import DomainError, SamplerExhaustedError
from vrclf.feasibility import ControlSet
from vrclf.fields import ScalarField, Univariate, as_univariate, make_symbols
from vrclf.gain_calculus import (
    GainMatrix, MonotoneFn, Verdict, check_small_gain, identity, linear,
    power, scaled_inverse, translate_gain, zero,
)
from vrclf.vclf_core import (
    ANTECEDENT_SLACK, BATCH_SIZE, MIN_HITS, BallSampler, BoxSampler,
    ControlAffineSystem, ImplicationReport, ImplicationResult, Recorder,
    VRCLFSpec, dominance_mask,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

STATE_VARS = ("x1", "x2", "x3")
COROLLARY_IMPLICATIONS = ("pair-ratio", "flat-decay", "eta-shell", "w-shell", "outer-w", "outer-eta")
BOUNDED_INPUT_IMPLICATIONS = ("lower-input-decay", "upper-input-decay")

LIPSCHITZ_SAFETY = 1.2
MAX_HALVINGS = 40
RATIO_POINTS = 200
WITNESS_RTOL = 1e-8


@dataclass
class CorollaryConfig:
    """
    Coordinate form of a VRCLF: gains act on |x_s|, Q is the per-coordinate
    decay profile, kvec the local linear law on the ball of radius r and
    kbar the outer law used where eta >= 0 (zero when omitted).
    """
    system: ControlAffineSystem
    gains_tilde: GainMatrix
    Q: Callable
    eta: ScalarField
    W: ScalarField
    delta: Callable
    Kfun: Callable
    epsilon: float
    kvec: Sequence[float]
    r: float
    kbar: Optional[ScalarField] = None
    name: str = ""
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.system.disturbance_vars:
            raise DomainError("coordinate-wise certificates take undisturbed systems")
        if self.gains_tilde.k != self.system.n:
            raise DomainError(f"{self.system.n} states but a {self.gains_tilde.k}x{self.gains_tilde.k} gain matrix")
        if hasattr(self.Q, "class_tag"):
            gain = self.Q
            self.Q = Univariate(lambda s: gain(np.abs(s)), "Q")
        else:
            self.Q = as_univariate(self.Q, "Q")
        self.delta = as_univariate(self.delta, "delta")
        self.Kfun = as_univariate(self.Kfun, "K")
        self.kvec = np.asarray(self.kvec, dtype=float)
        if self.kvec.shape != (self.n,):
            raise DomainError(f"local gain vector must have {self.n} entries")
        if self.r <= 0:
            raise DomainError(f"local radius must be positive, got {self.r}")
        points = np.array([-1.0, -1e-3, 1e-3, 1.0])
        if np.any(np.asarray(self.Q(points)) <= 0):
            raise DomainError("Q must be positive away from zero")

    @property
    def n(self) -> int:
        return self.system.n

    def outer_law(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.kbar is None:
            return np.zeros(len(X))
        return np.asarray(self.kbar.value(X), dtype=float).reshape(len(X))


def rho_from_q(Q: Callable) -> Callable:
    """rho(s) = 2s min(Q(sqrt(2s)), Q(-sqrt(2s)))"""
    def rho(s):
        s = np.maximum(np.asarray(s, dtype=float), 0.0)
        root = np.sqrt(2.0 * s)
        return 2.0 * s * np.minimum(Q(root), Q(-root))
    return rho


def build_spec(cfg: CorollaryConfig) -> VRCLFSpec:
    """VRCLFSpec with V_i = x_i^2/2 and the gains and rho moved to the V scale"""
    report = check_small_gain(cfg.gains_tilde)
    if report.verdict == Verdict.VIOLATED:
        raise DomainError(f"coordinate gains fail the small-gain check on cycle "
                          f"{[i + 1 for i in report.witness_cycle or ()]}")
    gains = cfg.gains_tilde.map(translate_gain)
    translated = check_small_gain(gains)
    if translated.verdict == Verdict.VIOLATED:
        raise DomainError("translated gains fail the small-gain check")

    state_vars = cfg.system.state_vars
    n = cfg.n
    return VRCLFSpec(
        V=[ScalarField.quadratic(i, state_vars) for i in range(n)],
        eta=cfg.eta,
        W=cfg.W,
        delta=cfg.delta,
        Kfun=cfg.Kfun,
        rho=Univariate(rho_from_q(cfg.Q), "rho"),
        epsilon=cfg.epsilon,
        gains=gains,
        local_feedback=cfg.kvec,
        r=cfg.r / 2.0,
        a1=power(1.0 / (2.0 * n), 2.0),
        a2=power(0.5, 2.0),
        name=cfg.name,
    )


def abs_dominance(gains_tilde: GainMatrix, X: np.ndarray, slack: float = ANTECEDENT_SLACK) -> np.ndarray:
    """(n, N) booleans: max_s gamma~_{i,s}(|x_s|) <= |x_i|"""
    return dominance_mask(gains_tilde, np.abs(np.atleast_2d(X)).T, slack)


def _flat(g: np.ndarray, f: np.ndarray) -> np.ndarray:
    return np.abs(g) <= 1e-12 * np.maximum(1.0, np.abs(f))


def _safe_div(num: np.ndarray, den: np.ndarray, mask: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        return np.where(mask, num / np.where(mask, den, 1.0), 0.0)


def _check_batch(cfg: CorollaryConfig, X: np.ndarray, slack: float, min_hits: int) -> ImplicationReport:
    system = cfg.system
    rec = Recorder(X, None, slack, min_hits)
    n = cfg.n

    F = system.drift(X)
    G = system.input_vector(X)
    Qx = np.asarray(cfg.Q(X), dtype=float)
    dom = abs_dominance(cfg.gains_tilde, X, slack)
    eta = np.asarray(cfg.eta.value(X), dtype=float)
    W = np.asarray(cfg.W.value(X), dtype=float)
    grad_eta = cfg.eta.gradient(X)
    grad_w = cfg.W.gradient(X)
    with np.errstate(all="ignore"):
        delta = np.asarray(cfg.delta(np.maximum(eta, 0.0)), dtype=float)
        K = np.asarray(cfg.Kfun(np.maximum(eta, 0.0)), dtype=float)

    low = eta <= cfg.epsilon
    high = eta >= 0
    shell = low & high
    xg = X * G
    decay = X * F + X ** 2 * Qx
    eta_g = np.einsum("nk,nk->n", grad_eta, G)
    w_g = np.einsum("nk,nk->n", grad_w, G)

    ids = COROLLARY_IMPLICATIONS
    if system.U.case.value == "P3":
        ids += BOUNDED_INPUT_IMPLICATIONS
    for key in ids:
        rec.ensure(key)

    for i in range(n):
        rec.record("flat-decay", low & dom[i] & _flat(G[:, i], F[:, i]), decay[:, i], 0.0, (i,))
        for j in range(i + 1, n):
            pair = dom[i] & dom[j] & low & (xg[:, i] * xg[:, j] < 0)
            num = F[:, i] * G[:, j] - F[:, j] * G[:, i]
            den = X[:, i] * Qx[:, i] * G[:, j] - X[:, j] * Qx[:, j] * G[:, i]
            rec.record("pair-ratio", pair, _safe_div(num, den, pair), -1.0, (i, j))

        # drift after cancelling coordinate i with the input that sets its decay to -x_i Q(x_i)
        active = dom[i] & shell & (G[:, i] != 0)
        comp = _safe_div(F[:, i] + X[:, i] * Qx[:, i], G[:, i], active)
        closed = F - G * comp[:, None]
        cross_eta = active & (xg[:, i] * eta_g < 0)
        rec.record("eta-shell", cross_eta, np.einsum("nk,nk->n", grad_eta, closed), -delta, (i,))
        cross_w = active & (xg[:, i] * w_g < 0)
        rec.record("w-shell", cross_w, np.einsum("nk,nk->n", grad_w, closed), K * W, (i,))

        if system.U.case.value == "P3":
            rec.record("lower-input-decay", dom[i] & low & (xg[:, i] > 0),
                       decay[:, i] - system.U.a * xg[:, i], 0.0, (i,))
            rec.record("upper-input-decay", dom[i] & low & (xg[:, i] < 0),
                       decay[:, i] + system.U.b * xg[:, i], 0.0, (i,))

    u = cfg.outer_law(X)
    closed = F + G * u[:, None]
    rec.record("outer-w", high, np.einsum("nk,nk->n", grad_w, closed), K * W)
    rec.record("outer-eta", high, np.einsum("nk,nk->n", grad_eta, closed), -delta)
    if system.U.case.value != "P1":
        inside = (u >= system.U.lower) & (u <= system.U.upper)
        rec.record("outer-admissible", np.ones(len(X), dtype=bool), (~inside).astype(float), 0.0)

    return ImplicationReport(rec.results, len(X))


def check_local_decay(cfg: CorollaryConfig, samples: int = 10000, seed: int = 0,
                      slack: float = ANTECEDENT_SLACK) -> ImplicationReport:
    """x_i f_i + x_i g_i k'x <= -x_i^2 Q(x_i) on the ball of radius r where i is dominant"""
    X = BallSampler(cfg.n, cfg.r, seed).draw(samples)
    rec = Recorder(X, None, slack, MIN_HITS)
    F = cfg.system.drift(X)
    G = cfg.system.input_vector(X)
    Qx = np.asarray(cfg.Q(X), dtype=float)
    dom = abs_dominance(cfg.gains_tilde, X, slack)
    u = X @ cfg.kvec
    for i in range(cfg.n):
        rec.record("local-law", dom[i], X[:, i] * F[:, i] + X[:, i] * G[:, i] * u,
                   -X[:, i] ** 2 * Qx[:, i], (i,))
    if cfg.system.U.case.value != "P1":
        inside = (u >= cfg.system.U.lower) & (u <= cfg.system.U.upper)
        rec.record("local-law-admissible", np.ones(len(u), dtype=bool), (~inside).astype(float), 0.0)
    return ImplicationReport(rec.results, len(X))


def check_corollary_implications(cfg: CorollaryConfig, sampler: BoxSampler, samples: int = 100000,
                                 slack: float = ANTECEDENT_SLACK, min_hits: int = MIN_HITS,
                                 batch_size: int = BATCH_SIZE, local_samples: int = 10000) -> ImplicationReport:
    """Sampled check of the coordinate implications, the local law and the outer law"""
    report = ImplicationReport({}, 0)
    for start in range(0, samples, batch_size):
        X = sampler.draw(min(batch_size, samples - start))
        report.merge(_check_batch(cfg, X, slack, min_hits))

    if cfg.epsilon > 0 and not cfg.eta.is_constant:
        def in_shell(X):
            values = np.asarray(cfg.eta.value(X), dtype=float)
            return (values >= 0) & (values <= cfg.epsilon)

        wanted = max(min_hits * 100, samples // 100)
        try:
            extra = sampler.draw_where(in_shell, wanted, batch=batch_size)
            report.merge(_check_batch(cfg, extra, slack, min_hits))
            report.notes.append(f"shell topped up with {len(extra)} rejection samples")
        except SamplerExhaustedError as e:
            logger.warning(f"Shell coverage is thin: {e}")
            report.notes.append(f"shell sampler exhausted: {e}")

    report.merge(check_local_decay(cfg, local_samples, sampler.seed + 1, slack))
    logger.info(f"Coordinate implications for {cfg.name or 'system'}: "
                f"{'pass' if report.passed else 'fail'} on {report.samples} samples")
    return report


# ----------------------------------------------------------------------
# third-order cascade x1' = -x1 + x2, x2' = -x2 + g u, x3' = x1^2 + u
# ----------------------------------------------------------------------

def cascade_system(g: ScalarField, U: Optional[ControlSet] = None, name: str = "cascade") -> ControlAffineSystem:
    x1, x2, x3 = make_symbols(STATE_VARS)
    f = [ScalarField(-x1 + x2, STATE_VARS, name="f1"),
         ScalarField(-x2, STATE_VARS, name="f2"),
         ScalarField(x1 ** 2, STATE_VARS, name="f3")]
    inputs = [ScalarField.constant(0.0, STATE_VARS, "g1"), g, ScalarField.constant(1.0, STATE_VARS, "g3")]
    return ControlAffineSystem(f, inputs, U=U or ControlSet.p1(), name=name)


def pair_switch_g(lam: float, gamma: MonotoneFn) -> ScalarField:
    """g = x2 x3 (|x2| - gamma(|x3|)) (gamma(|x3|) - lam |x2|)"""
    x1, x2, x3 = make_symbols(STATE_VARS)
    g3 = gamma.to_sympy(sp.Abs(x3))
    return ScalarField(x2 * x3 * (sp.Abs(x2) - g3) * (g3 - lam * sp.Abs(x2)), STATE_VARS, name="g")


def _as_g(g, lam: float, gamma: MonotoneFn) -> ScalarField:
    if g is None:
        return pair_switch_g(lam, gamma)
    if isinstance(g, ScalarField):
        return g
    if isinstance(g, sp.Basic):
        return ScalarField(g, STATE_VARS, name="g")
    return ScalarField.parse(g, STATE_VARS, name="g")


def cascade_gains(lam: float, sigma: float, gamma: MonotoneFn) -> GainMatrix:
    return GainMatrix.from_entries(3, {
        (1, 2): linear(1.0 / (1.0 - sigma)),
        (1, 3): zero(),
        (2, 1): linear(lam * (1.0 - sigma)),
        (2, 3): gamma,
        (3, 1): scaled_inverse(gamma, lam * (1.0 - sigma), 1.0),
        (3, 2): scaled_inverse(gamma, lam, 1.0),
    })


def _check_ratios(lam: float, sigma: float) -> None:
    if not (0 < lam < 1 and 0 < sigma < 1):
        raise DomainError(f"lambda and sigma must lie in (0, 1), got {lam} and {sigma}")


def select_local_gain(g: ScalarField, gamma: MonotoneFn, lam: float, sigma: float,
                      r_start: float = 1.0, halvings: int = MAX_HALVINGS,
                      samples: int = 4000, seed: int = 0) -> Tuple[float, float, Dict[str, float]]:
    """
    Pick p inside (r gamma_2 / (lam (1 - sigma)) + sigma, gamma_1 (1 - sigma) / (L r + |g(0)|)),
    halving r until the interval opens. gamma_1, gamma_2 bound gamma(s)/s on (0, r];
    L is the sampled gradient bound of g on the 2r-ball times a safety factor.
    Returns (p, r, details).
    """
    g0 = abs(float(g.value(np.zeros(3))))
    tiny = 1e-8
    slope0 = float(gamma(tiny)) / tiny
    if slope0 <= sigma * g0 / (1.0 - sigma):
        raise DomainError(f"gamma'(0) ~ {slope0:.6g} does not exceed sigma |g(0)| / (1 - sigma)")

    r = r_start
    for _ in range(halvings + 1):
        s = np.linspace(r / RATIO_POINTS, r, RATIO_POINTS)
        ratios = np.asarray(gamma(s)) / s
        gamma1, gamma2 = float(ratios.min()), float(ratios.max())
        X = np.vstack([np.zeros((1, 3)), BallSampler(3, 2.0 * r, seed).draw(samples)])
        L = LIPSCHITZ_SAFETY * float(np.max(np.linalg.norm(g.gradient(X), axis=1)))
        lo = r * gamma2 / (lam * (1.0 - sigma)) + sigma
        den = L * r + g0
        hi = gamma1 * (1.0 - sigma) / den if den > 0 else math.inf
        if lo < hi:
            p = min(lo + 0.1 * (hi - lo), lo + 1.0)
            logger.info(f"Local gain p={p:.6g} on radius r={r:.6g} (interval {lo:.6g}..{hi:.6g})")
            return p, r, {"lower": lo, "upper": hi, "gamma1": gamma1, "gamma2": gamma2, "L": L}
        r /= 2.0
    raise DomainError(f"no local gain found after {halvings} halvings of r")


def cascade_instance(lam: float = 0.5, sigma: float = 0.5, gamma: Optional[MonotoneFn] = None,
                     A_scale: float = 0.5, g=None) -> Tuple[ControlAffineSystem, CorollaryConfig]:
    """
    Cascade with a constant decay profile Q = A_scale * sigma, eta = -1 and
    epsilon = -1, so only the dominance-region implications are active.
    """
    _check_ratios(lam, sigma)
    if not 0 < A_scale <= 1:
        raise DomainError(f"A_scale must lie in (0, 1], got {A_scale}")
    gamma = gamma or identity()
    g = _as_g(g, lam, gamma)
    system = cascade_system(g)
    p, r, details = select_local_gain(g, gamma, lam, sigma)
    cfg = CorollaryConfig(
        system=system,
        gains_tilde=cascade_gains(lam, sigma, gamma),
        Q=A_scale * sigma,
        eta=ScalarField.constant(-1.0, STATE_VARS, "eta"),
        W=ScalarField.constant(1.0, STATE_VARS, "W"),
        delta=1.0,
        Kfun=1.0,
        epsilon=-1.0,
        kvec=(0.0, 0.0, -p),
        r=r,
        name="cascade",
        params={"lam": lam, "sigma": sigma, "gamma": gamma, "g": g, "p": p, **details},
    )
    return system, cfg


def check_pair_condition(cfg: CorollaryConfig, sampler: BoxSampler, samples: int = 100000,
                         slack: float = ANTECEDENT_SLACK, Q: Optional[Callable] = None,
                         radius_sq: Optional[float] = None) -> ImplicationResult:
    """
    Where lam (1-sigma)|x1| <= gamma(|x3|), lam |x2| <= gamma(|x3|) <= |x2| and x2 x3 g < 0:
    x2^2 + x2 x1^2 g >= |x2 x3 g| Q(x3) + x2^2 Q(x2). With `radius_sq` the region is
    also cut to x1^2 + x2^2 <= radius_sq.
    """
    lam, sigma, gamma, g = (cfg.params[k] for k in ("lam", "sigma", "gamma", "g"))
    Q = cfg.Q if Q is None else Q
    X = sampler.draw(samples)
    key = "pair-condition" if radius_sq is None else "slab-condition"
    mask, lhs, rhs = _pair_terms(X, lam, sigma, gamma, g, Q, slack)
    if radius_sq is not None:
        mask &= X[:, 0] ** 2 + X[:, 1] ** 2 <= radius_sq
    rec = Recorder(X, None, slack, MIN_HITS)
    rec.record(key, mask, lhs, rhs)
    return rec.results[key]


def _pair_terms(X, lam, sigma, gamma, g, Q, slack):
    ax = np.abs(X)
    g3 = np.asarray(gamma(ax[:, 2]))
    gv = np.asarray(g.value(X), dtype=float)
    tol = slack * np.maximum(1.0, g3)
    mask = ((lam * (1.0 - sigma) * ax[:, 0] <= g3 + tol) & (lam * ax[:, 1] <= g3 + tol)
            & (g3 <= ax[:, 1] + tol) & (X[:, 1] * X[:, 2] * gv < 0))
    rhs_q = np.abs(X[:, 1] * X[:, 2] * gv) * np.asarray(Q(X[:, 2])) + X[:, 1] ** 2 * np.asarray(Q(X[:, 1]))
    return mask, rhs_q, X[:, 1] ** 2 + X[:, 1] * X[:, 0] ** 2 * gv


# ----------------------------------------------------------------------
# single quadratic CLF V = x1^2/2 + p x2^2/2 + q x3^2/2
# ----------------------------------------------------------------------

def find_quadratic_clf_witness(p: float, q: float, lam: float = 0.5, gamma: Optional[MonotoneFn] = None,
                               max_power: int = 12) -> Optional[Dict[str, Any]]:
    """
    Point with q x3 = -p x2 g(x) where 1 - x2 + p x2^2 <= q x3 for x1 = 1, found
    along x2 = 10^-k. None when no k up to `max_power` gives one.
    """
    if p <= 0 or q <= 0:
        raise DomainError(f"p and q must be positive, got {p} and {q}")
    gamma = gamma or identity()
    g = pair_switch_g(lam, gamma)
    inverse = scaled_inverse(gamma)
    for k in range(1, max_power + 1):
        x2 = 10.0 ** (-k)
        level = 0.5 * ((1.0 + lam) * x2 + math.sqrt((1.0 - lam) ** 2 * x2 ** 2 + 4.0 * q / (p * x2 ** 2)))
        x3 = float(inverse(level))
        x = np.array([1.0, x2, x3])
        gv = float(g.value(x))
        residual = abs(q * x3 + p * x2 * gv) / max(1.0, abs(q * x3))
        if residual > WITNESS_RTOL:
            logger.debug(f"Witness candidate x2={x2:g} misses the constraint by {residual:.3g}")
            continue
        lhs = 1.0 - x2 + p * x2 ** 2
        if lhs <= q * x3:
            return {"x": x.tolist(), "residual": residual, "lhs": lhs, "rhs": q * x3, "p": p, "q": q}
    return None


def quadratic_clf_sweep(lam: float = 0.5, gamma: Optional[MonotoneFn] = None, points: int = 13,
                        lo: float = 1e-3, hi: float = 1e3) -> List[Dict[str, Any]]:
    """Witness search over a log grid of (p, q); one row per pair"""
    grid = np.logspace(math.log10(lo), math.log10(hi), points)
    rows = []
    for p in grid:
        for q in grid:
            witness = find_quadratic_clf_witness(float(p), float(q), lam, gamma)
            rows.append({"p": float(p), "q": float(q), "violated": witness is not None, "witness": witness})
    missing = sum(not row["violated"] for row in rows)
    if missing:
        logger.warning(f"No witness for {missing} of {len(rows)} (p, q) pairs")
    return rows


# ----------------------------------------------------------------------
# cascade with g = g(x1, x2) certified on a slab around {x1^2 + x2^2 = 2a}
# ----------------------------------------------------------------------

SLAB_GRID = {"a": (0.1, 0.05, 0.2), "eps": (0.02, 0.01), "c": (0.04, 0.03, 0.02, 0.01)}


def slab_q(sigma: float) -> Univariate:
    """q(y) = sigma min(1, (1 - sigma) / |y|)"""
    return Univariate(["*", sigma, ["min", 1.0, ["/", 1.0 - sigma, ["abs", "s"]]]], "q")


def slab_instance(lam: float = 0.5, sigma: float = 0.5, gamma: Optional[MonotoneFn] = None,
                  a: float = 0.1, eps: float = 0.02, c: float = 0.04, R: Optional[float] = None,
                  A_scale: float = 0.5, g=None) -> Tuple[ControlAffineSystem, CorollaryConfig]:
    """
    eta = -a + (x1^2 + x2^2)/2, W = 1 + |x|^2/2, delta = c, K = 2(eta + a) + 1/c,
    zero outer law and Q = A_scale * q. g defaults to x2 and may not involve x3.
    """
    _check_ratios(lam, sigma)
    if not a >= c > 0 or eps <= 0:
        raise DomainError(f"slab constants need a >= c > 0 and eps > 0, got a={a}, c={c}, eps={eps}")
    R = 2.0 * (a + eps) if R is None else R
    if 2.0 * (a + eps) > R:
        raise DomainError(f"slab radius R={R} is below 2(a + eps) = {2.0 * (a + eps)}")
    gamma = gamma or identity()
    x1, x2, x3 = make_symbols(STATE_VARS)
    g = _as_g(x2 if g is None else g, lam, gamma)
    if x3 in g.expr.free_symbols:
        raise DomainError("slab instance needs g independent of x3")

    system = cascade_system(g, name="slab")
    p, r_p, details = select_local_gain(g, gamma, lam, sigma)
    q = slab_q(sigma)
    cfg = CorollaryConfig(
        system=system,
        gains_tilde=cascade_gains(lam, sigma, gamma),
        Q=Univariate(lambda s: A_scale * q(s), "Q"),
        eta=ScalarField(-a + (x1 ** 2 + x2 ** 2) / 2, STATE_VARS, name="eta"),
        W=ScalarField(1 + (x1 ** 2 + x2 ** 2 + x3 ** 2) / 2, STATE_VARS, name="W"),
        delta=float(c),
        Kfun=["+", ["*", 2.0, ["+", "s", a]], 1.0 / c],
        epsilon=eps,
        kvec=(0.0, 0.0, -p),
        # the local ball has to sit inside {eta < 0}
        r=min(r_p, 0.9 * math.sqrt(2.0 * a)),
        name="slab",
        params={"lam": lam, "sigma": sigma, "gamma": gamma, "g": g, "p": p, "q": q,
                "a": a, "eps": eps, "c": c, "R": R, **details},
    )
    return system, cfg


def check_slab_conditions(cfg: CorollaryConfig, sampler: BoxSampler, samples: int = 100000,
                          slack: float = ANTECEDENT_SLACK) -> ImplicationReport:
    """
    The slab condition with the profile q, the two outer-law chains on
    {eta >= 0} and the shell conditions written out for this cascade.
    """
    lam, sigma, gamma, g, q = (cfg.params[k] for k in ("lam", "sigma", "gamma", "g", "q"))
    a, eps, R = cfg.params["a"], cfg.params["eps"], cfg.params["R"]
    Q = cfg.Q

    X = sampler.draw(samples)
    shell_of = lambda Y: (Y[:, 0] ** 2 + Y[:, 1] ** 2 >= 2 * a) & (Y[:, 0] ** 2 + Y[:, 1] ** 2 <= 2 * (a + eps))
    notes = []
    try:
        X = np.vstack([X, sampler.draw_where(shell_of, max(1000, samples // 50))])
    except SamplerExhaustedError as e:
        notes.append(f"shell sampler exhausted: {e}")

    rec = Recorder(X, None, slack, MIN_HITS)
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    gv = np.asarray(g.value(X), dtype=float)
    eta = np.asarray(cfg.eta.value(X), dtype=float)
    W = np.asarray(cfg.W.value(X), dtype=float)
    K = np.asarray(cfg.Kfun(np.maximum(eta, 0.0)), dtype=float)
    c = float(cfg.delta(0.0))
    g3 = np.asarray(gamma(np.abs(x3)))
    q2, q3 = np.asarray(Q(x2)), np.asarray(Q(x3))
    tol = slack * np.maximum(1.0, g3)
    base = -x1 ** 2 + x1 * x2 - x2 ** 2
    shell = shell_of(X)
    high = eta >= 0
    cone = (lam * (1 - sigma) * np.abs(x1) <= g3 + tol) & (lam * np.abs(x2) <= g3 + tol)

    mask, lhs, rhs = _pair_terms(X, lam, sigma, gamma, g, q, slack)
    in_slab = x1 ** 2 + x2 ** 2 <= R
    rec.record("slab-condition", mask & in_slab, lhs, rhs)
    outside = mask & ~in_slab
    outside_bad = outside & (lhs > rhs + slack * np.maximum(1.0, np.abs(rhs)))
    notes.append(f"{int(outside.sum())} sampled points lie in the unrestricted region only; "
                 f"{int(outside_bad.sum())} of them break the unrestricted condition")

    rec.record("outer-w-chain", high, base + x3 * x1 ** 2, K * W)
    rec.record("outer-eta-chain", high, base, -(eta + a))
    rec.record("outer-eta-margin", high, base, -c)

    rec.record("shell-eta", cone & shell & (x3 * x2 * gv < 0),
               base - x2 * gv * (x1 ** 2 + x3 * q3), -c)
    mixed = (lam * (1 - sigma) * np.abs(x1) <= np.abs(x2)) & (g3 <= np.abs(x2) + tol)
    w2 = mixed & shell & (x2 * gv * (x2 * gv + x3) < 0)
    rec.record("shell-w-x2", w2,
               base + x3 * x1 ** 2 - x2 * (x2 * gv + x3) * _safe_div(q2 - 1.0, gv, w2), K * W)
    rec.record("shell-w-x3", cone & shell & (x3 * (x2 * gv + x3) < 0),
               base - x2 * gv * x1 ** 2 - (x2 * gv + x3) * x3 * q3, K * W)

    report = ImplicationReport(rec.results, len(X), notes=notes)
    logger.info(f"Slab conditions: {'pass' if report.passed else 'fail'} on {len(X)} samples")
    return report


def slab_conditions(cfg: CorollaryConfig, sampler: BoxSampler, samples: int = 100000,
                    slack: float = ANTECEDENT_SLACK) -> ImplicationReport:
    """Slab-specific conditions plus the generic coordinate implications"""
    report = check_slab_conditions(cfg, sampler, samples, slack)
    return report.merge(check_corollary_implications(cfg, sampler, samples, slack))


def search_slab_constants(grid: Optional[Dict[str, Sequence[float]]] = None, samples: int = 20000,
                          seed: int = 0, **kwargs) -> Optional[Dict[str, Any]]:
    """First (a, eps, c) on the grid whose slab instance passes every check"""
    grid = grid or SLAB_GRID
    for a in grid["a"]:
        for eps in grid["eps"]:
            for c in grid["c"]:
                if c > a:
                    continue
                _, cfg = slab_instance(a=a, eps=eps, c=c, **kwargs)
                sampler = BoxSampler([-1.0] * 3, [1.0] * 3, seed)
                report = slab_conditions(cfg, sampler, samples)
                if report.passed:
                    logger.info(f"Slab constants a={a}, eps={eps}, c={c} pass")
                    return {"a": a, "eps": eps, "c": c, "R": cfg.params["R"], "config": cfg, "report": report}
                logger.info(f"Slab constants a={a}, eps={eps}, c={c} fail")
    return None
