"""
Closed- and open-loop simulation with runtime checks of the Lyapunov data.

The integrator is the embedded Dormand-Prince 5(4) pair with the control
sampled at the start of each step and held over it. Disturbance switch times
are forced step boundaries, so the disturbance is constant on every step.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
import hashlib
import json
import logging
import math
import platform
import time

import numpy as np
import pandas as pd
import scipy
import sympy
from sklearn.isotonic import IsotonicRegression

from config import Config
from vrclf.errors import DomainError, IntegrationError
from vrclf.reaction_network import ReactionNetwork
from vrclf.vclf_core import ControlAffineSystem, DisturbanceBox, VRCLFSpec, dominance_mask

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MIN_STEP = 1e-12
FIRST_STEP = 1e-3
MAX_STEPS = 2_000_000
SAFETY = 0.9
MIN_FACTOR = 0.1
MAX_FACTOR = 4.0
MIN_PER_BIN = 5
MAX_REPORTED = 10

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])

Control = Callable[[float, np.ndarray], float]
Dynamics = Union[ControlAffineSystem, ReactionNetwork]


# ----------------------------------------------------------------------
# disturbance signals
# ----------------------------------------------------------------------

class DisturbanceSignal:
    """
    Piecewise-constant d(t) with values in a box: constant, given switch
    times and values, or seeded random values with exponential dwell times.
    """

    def __init__(self, box: Optional[DisturbanceBox], times: Sequence[float] = (),
                 values: Sequence[Sequence[float]] = (), kind: str = "none",
                 seed: Optional[int] = None, dwell: float = Config.DISTURBANCE_DWELL):
        self.box = box
        self.kind = kind
        self.seed = seed
        self.dwell = dwell
        self.times = [float(t) for t in times]
        self.values = [np.asarray(v, dtype=float) for v in values]
        self._rng = np.random.default_rng(seed) if kind == "random" else None
        if self.times and any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise DomainError("disturbance switch times must increase strictly")
        for v in self.values:
            if box is None or not box.contains(v):
                raise DomainError(f"disturbance value {v.tolist()} lies outside the box")

    @staticmethod
    def none() -> "DisturbanceSignal":
        return DisturbanceSignal(None)

    @staticmethod
    def constant(d: Sequence[float], box: DisturbanceBox) -> "DisturbanceSignal":
        return DisturbanceSignal(box, [0.0], [d], "constant")

    @staticmethod
    def piecewise(times: Sequence[float], values: Sequence[Sequence[float]],
                  box: DisturbanceBox) -> "DisturbanceSignal":
        if len(times) != len(values) or not times or times[0] != 0.0:
            raise DomainError("piecewise disturbance needs one value per switch time, starting at t=0")
        return DisturbanceSignal(box, times, values, "piecewise")

    @staticmethod
    def random(box: DisturbanceBox, seed: int, dwell: float = Config.DISTURBANCE_DWELL) -> "DisturbanceSignal":
        if dwell <= 0:
            raise DomainError(f"dwell time must be positive, got {dwell}")
        signal = DisturbanceSignal(box, kind="random", seed=seed, dwell=dwell)
        signal.times = [0.0]
        signal.values = [box.sample(signal._rng)]
        return signal

    def _extend(self, t: float) -> None:
        while self.kind == "random" and self.times[-1] <= t:
            self.times.append(self.times[-1] + float(self._rng.exponential(self.dwell)))
            self.values.append(self.box.sample(self._rng))

    def value(self, t: float) -> Optional[np.ndarray]:
        if not self.times:
            return None
        self._extend(t)
        index = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.values[max(index, 0)]

    def next_switch(self, t: float) -> float:
        """First switch time strictly after t, or inf"""
        if not self.times:
            return math.inf
        self._extend(t)
        index = int(np.searchsorted(self.times, t, side="right"))
        return self.times[index] if index < len(self.times) else math.inf

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "seed": self.seed, "dwell": self.dwell,
                "box": self.box.to_dict() if self.box else None}


# ----------------------------------------------------------------------
# controls
# ----------------------------------------------------------------------

def feedback(law: Callable[[np.ndarray], float]) -> Control:
    return lambda t, x: float(law(x))


def open_loop(u: Union[float, Callable[[float], float]]) -> Control:
    if callable(u):
        return lambda t, x: float(u(t))
    value = float(u)
    return lambda t, x: value


def dilution_control(law) -> Control:
    """Log-coordinate input u = D(e^x) - 1 for a clamped dilution law"""
    return lambda t, x: float(law(np.exp(x))) - 1.0


# ----------------------------------------------------------------------
# integration
# ----------------------------------------------------------------------

@dataclass
class IntegratorOptions:
    rtol: float = Config.RTOL
    atol: float = Config.ATOL
    max_step: float = Config.MAX_STEP
    first_step: float = FIRST_STEP
    min_step: float = MIN_STEP
    max_steps: int = MAX_STEPS

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0 or self.max_step <= 0:
            raise DomainError("integrator tolerances and max step must be positive")


@dataclass
class Trajectory:
    """Accepted steps of one run; controls[k] is the value held on [t_k, t_k+1)"""
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    disturbances: Optional[np.ndarray] = None
    steps: int = 0
    rejections: int = 0
    seed: Optional[int] = None
    log_coordinates: bool = False

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def concentrations(self) -> np.ndarray:
        return np.exp(self.states) if self.log_coordinates else self.states

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)


def _rhs_of(system: Dynamics) -> Callable:
    if isinstance(system, ReactionNetwork):
        return lambda x, u, d: system.rhs(x, u)
    return lambda x, u, d: system.rhs(x, u, d)


def _dopri_step(rhs, x: np.ndarray, h: float, u: float, d, k1: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ks = [k1]
    for stage in range(1, 7):
        xs = x + h * sum(a * k for a, k in zip(_A[stage], ks))
        ks.append(np.asarray(rhs(xs, u, d), dtype=float))
    K = np.stack(ks)
    y5 = x + h * (_B5 @ K)
    y4 = x + h * (_B4 @ K)
    return y5, y5 - y4, ks[-1]


def integrate(system: Dynamics, control: Control, x0: Sequence[float], T: float,
              signal: Optional[DisturbanceSignal] = None, options: Optional[IntegratorOptions] = None,
              seed: Optional[int] = None, log_coordinates: bool = False) -> Trajectory:
    """Adaptive Dormand-Prince with sample-and-hold control"""
    if T <= 0:
        raise DomainError(f"horizon must be positive, got {T}")
    opts = options or IntegratorOptions()
    signal = signal or DisturbanceSignal.none()
    rhs = _rhs_of(system)
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite initial state", 0.0, x)

    t = 0.0
    h = min(opts.first_step, opts.max_step, T)
    times, states, controls, dists = [t], [x.copy()], [], []
    steps = rejections = 0
    while t < T:
        if steps + rejections >= opts.max_steps:
            raise IntegrationError(f"step budget of {opts.max_steps} exhausted", t, x)
        d = signal.value(t)
        u = float(control(t, x))
        if not math.isfinite(u):
            raise IntegrationError("control is not finite", t, x)
        k1 = np.asarray(rhs(x, u, d), dtype=float)
        if not np.all(np.isfinite(k1)):
            raise IntegrationError("right-hand side is not finite", t, x)
        boundary = min(T, signal.next_switch(t))
        while True:
            h = min(h, opts.max_step, boundary - t)
            if h < opts.min_step and boundary - t > opts.min_step:
                raise IntegrationError(f"step size underflow (h={h:.3g})", t, x)
            with np.errstate(all="ignore"):
                y, err_vec, _ = _dopri_step(rhs, x, h, u, d, k1)
            scale = opts.atol + opts.rtol * np.maximum(np.abs(x), np.abs(y))
            err = float(np.max(np.abs(err_vec) / scale)) if np.all(np.isfinite(y)) else math.inf
            if err <= 1.0:
                break
            rejections += 1
            factor = MIN_FACTOR if not math.isfinite(err) else max(MIN_FACTOR, SAFETY * err ** -0.2)
            h *= factor
        t = boundary if boundary - (t + h) <= 1e-14 * max(1.0, abs(t)) else t + h
        x = y
        steps += 1
        times.append(t)
        states.append(x.copy())
        controls.append(u)
        dists.append(d)
        factor = MAX_FACTOR if err == 0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err ** -0.2))
        h *= factor

    # the last sample repeats the final held value so the columns line up
    controls.append(controls[-1] if controls else 0.0)
    dists.append(dists[-1] if dists else None)
    disturbances = None if dists[0] is None else np.array(dists, dtype=float)
    return Trajectory(np.array(times), np.array(states), np.array(controls), disturbances,
                      steps, rejections, seed, log_coordinates)


def simulate_batch(system: Dynamics, control: Control, initial_states: Sequence[Sequence[float]], T: float,
                   base_seed: int = 0, signal_factory: Optional[Callable[[int], DisturbanceSignal]] = None,
                   options: Optional[IntegratorOptions] = None, workers: int = 1,
                   log_coordinates: bool = False) -> List[Trajectory]:
    """One trajectory per initial state with seed base_seed + index, returned in seed order"""
    def run(item):
        index, x0 = item
        seed = base_seed + index
        signal = signal_factory(seed) if signal_factory else None
        return integrate(system, control, x0, T, signal, options, seed, log_coordinates)

    items = list(enumerate(initial_states))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]
    logger.info(f"Simulated {len(results)} trajectories over T={T}")
    return sorted(results, key=lambda traj: traj.seed)


# ----------------------------------------------------------------------
# monitors
# ----------------------------------------------------------------------

@dataclass
class Channels:
    V: np.ndarray
    eta: np.ndarray
    W: np.ndarray
    active: np.ndarray

    @property
    def bitmask(self) -> np.ndarray:
        weights = 1 << np.arange(self.active.shape[1])
        return (self.active * weights).sum(axis=1).astype(int)


def channels(traj: Trajectory, spec: VRCLFSpec) -> Channels:
    X = traj.states
    values = spec.values(X)
    active = dominance_mask(spec.gains, values).T
    return Channels(values.T, np.asarray(spec.eta.value(X), dtype=float),
                    np.asarray(spec.W.value(X), dtype=float), active)


@dataclass
class MonitorResult:
    id: str
    checked: int = 0
    violation_count: int = 0
    violations: List[Tuple[float, float]] = field(default_factory=list)

    def record(self, mask: np.ndarray, residual: np.ndarray, tol: np.ndarray, times: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool)
        bad = mask & ~(residual <= tol)
        self.checked += int(mask.sum())
        self.violation_count += int(bad.sum())
        for idx in np.flatnonzero(bad)[:MAX_REPORTED - len(self.violations)]:
            self.violations.append((float(times[idx]), float(residual[idx])))

    def to_dict(self) -> Dict:
        return {"id": self.id, "checked": self.checked, "violations": self.violation_count,
                "witnesses": [{"t": t, "residual": r} for t, r in self.violations]}


@dataclass
class MonitorReport:
    results: Dict[str, MonitorResult]

    @property
    def passed(self) -> bool:
        return all(not r.violation_count for r in self.results.values())

    def __getitem__(self, key: str) -> MonitorResult:
        return self.results[key]

    def to_dict(self) -> Dict:
        return {"passed": self.passed, "monitors": [r.to_dict() for r in self.results.values()]}


def monitor(traj: Trajectory, spec: VRCLFSpec, tol: float = Config.MONITOR_TOL,
            mass: Optional[Tuple[np.ndarray, float]] = None) -> MonitorReport:
    """
    Per accepted step: the sandwich where h <= 0, eta decrease and W growth
    where h >= 0 (h = eta - 2 epsilon / 5), and decrease of every component
    that stays active across the step. Derivatives are finite differences
    over the step; rho is averaged over its endpoints.

    `mass` = (p, p'c_f) adds the relaxation check on |p'c - p'c_f| in
    concentration space.
    """
    ch = channels(traj, spec)
    X = traj.states
    t = traj.times
    dt = np.diff(t)
    results = {key: MonitorResult(key) for key in ("sandwich", "eta-decrease", "w-growth", "v-decrease")}

    norms = np.linalg.norm(X, axis=1)
    vmax = ch.V.max(axis=1)
    if spec.a1 is not None and spec.a2 is not None and not spec.degenerate:
        inside = ch.eta - 0.4 * spec.epsilon <= 0
        lower = np.asarray(spec.a1(norms), dtype=float) - vmax
        upper = vmax - np.asarray(spec.a2(norms), dtype=float)
        slack = tol * (1.0 + np.abs(vmax))
        results["sandwich"].record(inside, np.maximum(lower, upper), slack, t)

    h = ch.eta - 0.4 * spec.epsilon
    outer = (h[:-1] >= 0) & (h[1:] >= 0) & (not spec.degenerate)
    inner = (h[:-1] <= 0) & (h[1:] <= 0) if not spec.degenerate else np.ones(len(dt), dtype=bool)

    deta = np.diff(ch.eta) / dt
    delta = np.asarray(spec.delta(np.maximum(ch.eta[:-1], 0.0)), dtype=float)
    results["eta-decrease"].record(outer, deta + 0.5 * delta, tol * (1.0 + np.abs(deta)), t[:-1])

    dW = np.diff(ch.W) / dt
    growth = 2.0 * np.asarray(spec.Kfun(np.maximum(ch.eta[:-1], 0.0)), dtype=float) * ch.W[:-1]
    results["w-growth"].record(outer, dW - growth, tol * (1.0 + np.abs(dW)), t[:-1])

    for i in range(spec.k):
        active = ch.active[:-1, i] & ch.active[1:, i] & inner
        dV = np.diff(ch.V[:, i]) / dt
        rho = 0.5 * (np.asarray(spec.rho(ch.V[:-1, i]), dtype=float) + np.asarray(spec.rho(ch.V[1:, i]), dtype=float))
        results["v-decrease"].record(active & (ch.V[:-1, i] > 0), dV + 0.5 * rho, tol * (1.0 + np.abs(dV)), t[:-1])

    if mass is not None:
        p, target = np.asarray(mass[0], dtype=float), float(mass[1])
        gap = np.abs(traj.concentrations @ p - target)
        results["mass-relaxation"] = MonitorResult("mass-relaxation")
        results["mass-relaxation"].record(np.ones(len(dt), dtype=bool), np.diff(gap),
                                          tol * (1.0 + gap[:-1]), t[:-1])
    return MonitorReport(results)


# ----------------------------------------------------------------------
# KL envelope
# ----------------------------------------------------------------------

@dataclass
class KLEstimate:
    bin_edges: np.ndarray
    t_grid: np.ndarray
    raw: np.ndarray
    envelope: np.ndarray
    counts: List[int]
    monotonicity_violations: int
    verdict: bool

    def to_dict(self) -> Dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "t": self.t_grid.tolist(),
            "envelope": self.envelope.tolist(),
            "counts": self.counts,
            "monotonicity_violations": self.monotonicity_violations,
            "verdict": "pass" if self.verdict else "fail",
        }


def estimate_kl(trajectories: Sequence[Trajectory], bins: Union[int, Sequence[float]] = 1,
                t_points: int = 101, decay: float = 1e-3) -> KLEstimate:
    """
    Empirical max of |x(t)| per |x0| bin, smoothed to a nonincreasing
    envelope by isotonic regression. The verdict passes when every bin ends
    below decay * (upper bin edge).
    """
    if not trajectories:
        raise DomainError("no trajectories to estimate from")
    r0 = np.array([traj.norms()[0] for traj in trajectories])
    if np.isscalar(bins):
        edges = np.linspace(r0.min(), r0.max(), int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=float)
    horizon = min(traj.times[-1] for traj in trajectories)
    t_grid = np.linspace(0.0, horizon, t_points)
    which = np.clip(np.searchsorted(edges, r0, side="right") - 1, 0, len(edges) - 2)

    raw = np.zeros((len(edges) - 1, t_points))
    envelope = np.zeros_like(raw)
    counts = []
    violations = 0
    iso = IsotonicRegression(increasing=False)
    for b in range(len(edges) - 1):
        members = [traj for traj, w in zip(trajectories, which) if w == b]
        counts.append(len(members))
        if len(members) < MIN_PER_BIN:
            raise DomainError(f"bin {b + 1} holds {len(members)} trajectories, need at least {MIN_PER_BIN}")
        curves = np.stack([np.interp(t_grid, traj.times, traj.norms()) for traj in members])
        raw[b] = curves.max(axis=0)
        violations += int(np.sum(np.diff(raw[b]) > 1e-12 * np.maximum(1.0, raw[b][:-1])))
        envelope[b] = iso.fit_transform(t_grid, raw[b])
    verdict = bool(np.all(envelope[:, -1] <= decay * np.maximum(edges[1:], np.finfo(float).tiny)))
    logger.info(f"KL envelope over {len(trajectories)} trajectories: {'pass' if verdict else 'fail'}")
    return KLEstimate(edges, t_grid, raw, envelope, counts, violations, verdict)


# ----------------------------------------------------------------------
# output
# ----------------------------------------------------------------------

def trajectory_frame(traj: Trajectory, spec: Optional[VRCLFSpec] = None) -> pd.DataFrame:
    """Columns t, c_1..c_n, D, eta, W, V_1..V_k, active_set"""
    n = traj.states.shape[1]
    data: Dict[str, Any] = {"t": traj.times}
    values = traj.concentrations
    prefix = "c" if traj.log_coordinates else "x"
    for i in range(n):
        data[f"{prefix}_{i + 1}"] = values[:, i]
    data["D" if traj.log_coordinates else "u"] = traj.controls + 1.0 if traj.log_coordinates else traj.controls
    if spec is not None:
        ch = channels(traj, spec)
        data["eta"] = ch.eta
        data["W"] = ch.W
        for i in range(spec.k):
            data[f"V_{i + 1}"] = ch.V[:, i]
        data["active_set"] = ch.bitmask
    return pd.DataFrame(data)


def write_trajectory_csv(traj: Trajectory, path: str, spec: Optional[VRCLFSpec] = None) -> str:
    trajectory_frame(traj, spec).to_csv(path, index=False, float_format="%.12g")
    logger.info(f"Wrote trajectory with {len(traj.times)} samples to {path}")
    return path


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seeds: List[int] = field(default_factory=list)
    tolerances: Dict[str, float] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=lambda: {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "sympy": sympy.__version__,
        "pandas": pd.__version__,
    })
    started: float = field(default_factory=time.time)
    wall_time: float = 0.0

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.config).encode("utf-8")).hexdigest()

    def finish(self) -> "RunManifest":
        self.wall_time = time.time() - self.started
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["config_hash"] = self.config_hash()
        return data

    def write(self, path: str) -> str:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        return path
