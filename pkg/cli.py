"""
Command line entry point.

Exit codes: 0 on success, 2 when a verification fails (the report is still
written), 1 on usage, schema or IO errors.
"""
import argparse
import asyncio
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import Config
from vrclf import schema
from vrclf.corollary_lab import (
    build_spec, cascade_instance, check_corollary_implications, check_pair_condition, quadratic_clf_sweep,
    search_slab_constants, slab_conditions, slab_instance,
)
from vrclf.errors import SchemaError, VRCLFError
from vrclf.feasibility import Infeasible, feasible_interval, select_u
from vrclf.gain_calculus import check_small_gain, default_grid
from vrclf.graph import ReactorGraph, summarize
from vrclf.reaction_network import (
    autocatalytic_equilibria, autocatalytic_instance, autocatalytic_target, dilution_law_bounds, equilibria,
)
from vrclf.sim_harness import (
    IntegratorOptions, RunManifest, dilution_control, estimate_kl, feedback, monitor, open_loop, simulate_batch,
    write_trajectory_csv,
)
from vrclf.vclf_core import BoxSampler, check_implications, check_local_law, check_sandwich, synthesize

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILED = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=Config.DEFAULT_SEED)
    common.add_argument("--samples", type=int, default=Config.DEFAULT_SAMPLES)
    common.add_argument("--tol-rtol", type=float, default=Config.RTOL)
    common.add_argument("--tol-atol", type=float, default=Config.ATOL)
    common.add_argument("--tol-monitor", type=float, default=Config.MONITOR_TOL)
    common.add_argument("--tol-slack", type=float, default=Config.ANTECEDENT_SLACK)
    common.add_argument("--log-level", default=Config.LOG_LEVEL)
    common.add_argument("--out", nargs="?", const=Config.OUTPUT_DIR, default=None,
                        help=f"directory for reports, CSV files and the manifest (bare --out: {Config.OUTPUT_DIR})")
    common.add_argument("--json", action="store_true", help="print the report as JSON")

    parser = _Parser(prog="vrclf", description="Vector control Lyapunov function toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("smallgain", parents=[common], help="small-gain check of a gain matrix")
    p.add_argument("gains")
    p.add_argument("--grid-points", type=int, default=Config.SMALL_GAIN_GRID_POINTS)

    p = sub.add_parser("feascheck", parents=[common], help="feasibility of affine constraints")
    p.add_argument("constraints")

    p = sub.add_parser("verify", parents=[common], help="sampled implication checks of a problem file")
    p.add_argument("problem")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("synth", parents=[common], help="synthesize the feedback law of a problem file")
    p.add_argument("problem")
    p.add_argument("--points", help="JSON list of states to evaluate the law at")
    p.add_argument("--serve", action="store_true", help="serve the law over HTTP")

    p = sub.add_parser("simulate", parents=[common], help="closed-loop batch of a problem file")
    p.add_argument("problem")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("example43", aliases=["cascade"], parents=[common], help="third-order cascade certificates")
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--sweep-points", type=int, default=13)
    _add_closed_loop(p, box=2.0)

    p = sub.add_parser("example44", aliases=["slab"], parents=[common], help="cascade certified on a slab")
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--search", action="store_true", help="grid search over (a, eps, c)")
    p.add_argument("--a", type=float, default=0.1)
    p.add_argument("--eps", type=float, default=0.02)
    p.add_argument("--c", type=float, default=0.04)
    _add_closed_loop(p, box=1.0)

    cstr = sub.add_parser("cstr", help="stirred tank reactor pipeline")
    csub = cstr.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = csub.add_parser("equilibria", parents=[common])
    p.add_argument("network", nargs="?", help="network JSON; omitted means the autocatalytic step")
    p.add_argument("--dstar", type=float, default=1.0)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--feed", type=float, nargs=2, default=(1.5, 0.5))
    for action in ("check", "stabilize", "simulate"):
        p = csub.add_parser(action, parents=[common])
        p.add_argument("--theta", type=float, default=1.0)
        p.add_argument("--mu", type=float, default=0.5)
        p.add_argument("--dmax", type=float, default=None, help="10 for the scaled reactor, else 5%% above the bound")
        p.add_argument("--lam", type=float, default=0.9)
        p.add_argument("--epsilon", type=float, default=0.1)
        p.add_argument("--root", type=int, default=None,
                       help="target this equilibrium (index by c1) of the reactor given by --k and --feed")
        p.add_argument("--k", type=float, default=1.0)
        p.add_argument("--feed", type=float, nargs=2, default=(3.95, 0.05))
        if action != "check":
            p.add_argument("--points", type=int, default=1000)
        if action == "simulate":
            p.add_argument("--runs", type=int, default=20)
            p.add_argument("--horizon", type=float, default=200.0)
            p.add_argument("--open-loop", action="store_true")
            p.add_argument("--workers", type=int, default=1)
    return parser


def _add_closed_loop(p: argparse.ArgumentParser, box: float) -> None:
    p.add_argument("--runs", type=int, default=20, help="closed-loop runs from random states, 0 to skip")
    p.add_argument("--horizon", type=float, default=20.0)
    p.add_argument("--box", type=float, default=box, help="initial states uniform in [-box, box]^3")
    p.add_argument("--converge-tol", type=float, default=1e-2)
    p.add_argument("--workers", type=int, default=1)


# ----------------------------------------------------------------------
# output helpers
# ----------------------------------------------------------------------

def _emit(args, kind: str, body: Dict, manifest: RunManifest, text: str) -> None:
    manifest.finish()
    document = schema.write_report(kind, body, manifest.to_dict())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        schema.dump(document, os.path.join(args.out, f"{kind}_report.json"))
        manifest.write(os.path.join(args.out, "manifest.json"))
    if args.json:
        print(schema.dumps(document))
    else:
        print(text)


def _manifest(args, config: Dict) -> RunManifest:
    tolerances = {
        "rtol": args.tol_rtol, "atol": args.tol_atol,
        "monitor": args.tol_monitor, "slack": args.tol_slack,
    }
    return RunManifest(command=" ".join(_command_words(args)), config=config,
                       seeds=[args.seed], tolerances=tolerances)


def _command_words(args) -> List[str]:
    words = [args.command]
    if getattr(args, "action", None):
        words.append(args.action)
    return words


def _options(args) -> IntegratorOptions:
    return IntegratorOptions(rtol=args.tol_rtol, atol=args.tol_atol)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_smallgain(args) -> int:
    data = schema.load(args.gains)
    G = schema.read_gains(data)
    grid = default_grid(args.grid_points, Config.SMALL_GAIN_GRID_MIN, Config.SMALL_GAIN_GRID_MAX)
    report = check_small_gain(G, grid, Config.MAX_CYCLE_K)
    worst = min((c.worst_margin for c in report.cycles), default=None)
    body = {**report.to_dict(), "worst_margin": worst}
    _emit(args, "smallgain", body, _manifest(args, data),
          f"small-gain: {report.verdict.value} over {len(report.cycles)} cycles, worst margin {worst}")
    return EXIT_OK if report.satisfied else EXIT_FAILED


def cmd_feascheck(args) -> int:
    data = schema.load(args.constraints)
    constraints, control_set = schema.read_constraints(data)
    result = feasible_interval(constraints, control_set)
    body = result.to_dict()
    if isinstance(result, Infeasible):
        text = f"infeasible: implication {result.implication} fails for {[i + 1 for i in result.witness]}"
        body["witness"] = [i + 1 for i in result.witness]
        _emit(args, "feascheck", body, _manifest(args, data), text)
        return EXIT_FAILED
    body["u"] = select_u(result, control_set)
    _emit(args, "feascheck", body, _manifest(args, data),
          f"feasible: ({result.lower:.6g}, {result.upper:.6g}), u = {body['u']:.6g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    data = schema.load(args.problem)
    problem = schema.read_problem(data)
    report = check_implications(problem.system, problem.spec, problem.sampler(args.seed), args.samples,
                                args.tol_slack, workers=args.workers)
    report.merge(check_sandwich(problem.spec, problem.sampler(args.seed + 1), min(args.samples, 10000),
                                args.tol_slack))
    report.merge(check_local_law(problem.system, problem.spec, min(args.samples, 10000), args.seed + 2,
                                 args.tol_slack))
    _emit(args, "verify", report.to_dict(), _manifest(args, data), report.table())
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_synth(args) -> int:
    data = schema.load(args.problem)
    problem = schema.read_problem(data)
    law = synthesize(problem.system, problem.spec)
    body: Dict[str, Any] = {"regions": [], "values": []}
    if args.points:
        with open(args.points) as f:
            points = json.load(f)
        for x in points:
            body["regions"].append(law.region(x))
            body["values"].append(law(x))
    if args.serve:
        from app import app, install_law
        install_law(law, {"problem": os.path.abspath(args.problem), "name": problem.spec.name})
        app.run(host=Config.HOST, port=Config.PORT)
        return EXIT_OK
    _emit(args, "synth", body, _manifest(args, data),
          "\n".join(f"{r:<9} u = {u:.6g}" for r, u in zip(body["regions"], body["values"])) or "law synthesized")
    return EXIT_OK


def cmd_simulate(args) -> int:
    data = schema.load(args.problem)
    problem = schema.read_problem(data)
    if not problem.initial_states:
        raise UsageError("problem file has no initial_states")
    law = synthesize(problem.system, problem.spec)
    horizon = args.horizon or problem.horizon
    runs = simulate_batch(problem.system, feedback(law), problem.initial_states, horizon, args.seed,
                          options=_options(args), workers=args.workers)
    reports = [monitor(traj, problem.spec, args.tol_monitor) for traj in runs]
    body: Dict[str, Any] = {
        "runs": [{"seed": traj.seed, "final": traj.final.tolist(), "steps": traj.steps,
                  "rejections": traj.rejections, "monitors": rep.to_dict()} for traj, rep in zip(runs, reports)],
    }
    if len(runs) >= 5:
        body["kl"] = estimate_kl(runs).to_dict()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for traj in runs:
            write_trajectory_csv(traj, os.path.join(args.out, f"trajectory_{traj.seed}.csv"), problem.spec)
    passed = all(rep.passed for rep in reports)
    _emit(args, "simulate", body, _manifest(args, data),
          f"{len(runs)} runs, monitors {'pass' if passed else 'report violations'}")
    return EXIT_OK if passed else EXIT_FAILED


def _closed_loop(args, system, cfg) -> Optional[Dict[str, Any]]:
    """Law synthesized from build_spec(cfg), simulated from random states in the box"""
    if args.runs <= 0:
        return None
    spec = build_spec(cfg)
    law = synthesize(system, spec)
    rng = np.random.default_rng(args.seed)
    starts = rng.uniform(-args.box, args.box, size=(args.runs, system.n))
    runs = simulate_batch(system, feedback(law), starts, args.horizon, args.seed,
                          options=_options(args), workers=args.workers)
    reports = [monitor(traj, spec, args.tol_monitor) for traj in runs]
    norms = [float(np.linalg.norm(traj.final)) for traj in runs]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for traj in runs:
            write_trajectory_csv(traj, os.path.join(args.out, f"trajectory_{traj.seed}.csv"), spec)
    converged = int(sum(norm <= args.converge_tol for norm in norms))
    logger.info(f"Closed loop: {converged} of {len(runs)} runs end within {args.converge_tol} of the origin")
    return {
        "horizon": args.horizon,
        "converged": converged,
        "runs": [{"seed": traj.seed, "x0": traj.states[0].tolist(), "final": traj.final.tolist(),
                  "norm": norm, "monitors": rep.to_dict()} for traj, rep, norm in zip(runs, reports, norms)],
    }


def _closed_loop_text(closed: Optional[Dict[str, Any]]) -> str:
    if closed is None:
        return ""
    return f"\nclosed loop: {closed['converged']} of {len(closed['runs'])} runs converged"


def _closed_loop_passed(closed: Optional[Dict[str, Any]]) -> bool:
    return closed is None or closed["converged"] == len(closed["runs"])


def _closed_loop_config(args) -> Dict[str, Any]:
    return {"runs": args.runs, "horizon": args.horizon, "box": args.box}


def cmd_example43(args) -> int:
    system, cfg = cascade_instance(args.lam, args.sigma)
    report = check_corollary_implications(cfg, _box_sampler(args.seed), args.samples, args.tol_slack)
    pair = check_pair_condition(cfg, _box_sampler(args.seed + 1), args.samples, args.tol_slack)
    report.results[pair.id] = pair
    sweep = quadratic_clf_sweep(args.lam, points=args.sweep_points)
    refuted = sum(row["violated"] for row in sweep)
    closed = _closed_loop(args, system, cfg)
    body = {
        "implications": report.to_dict(),
        "p": cfg.params["p"],
        "r": cfg.r,
        "quadratic_clf": {"pairs": len(sweep), "refuted": refuted, "rows": sweep},
        "closed_loop": closed,
    }
    passed = report.passed and _closed_loop_passed(closed)
    config = {"lam": args.lam, "sigma": args.sigma, "samples": args.samples, **_closed_loop_config(args)}
    _emit(args, "example43", body, _manifest(args, config),
          f"{report.table()}\nquadratic CLF refuted for {refuted} of {len(sweep)} (p, q) pairs"
          f"{_closed_loop_text(closed)}")
    return EXIT_OK if passed else EXIT_FAILED


def cmd_example44(args) -> int:
    config = {"lam": args.lam, "sigma": args.sigma, "samples": args.samples, **_closed_loop_config(args)}
    if args.search:
        found = search_slab_constants(samples=args.samples, seed=args.seed, lam=args.lam, sigma=args.sigma)
        if found is None:
            _emit(args, "example44", {"found": False}, _manifest(args, config), "no constants on the grid pass")
            return EXIT_FAILED
        body = {"found": True, **{k: found[k] for k in ("a", "eps", "c", "R")},
                "report": found["report"].to_dict()}
        _emit(args, "example44", body, _manifest(args, config),
              f"a={found['a']}, eps={found['eps']}, c={found['c']}, R={found['R']}")
        return EXIT_OK
    system, cfg = slab_instance(args.lam, args.sigma, a=args.a, eps=args.eps, c=args.c)
    report = slab_conditions(cfg, _box_sampler(args.seed), args.samples, args.tol_slack)
    closed = _closed_loop(args, system, cfg)
    config.update({"a": args.a, "eps": args.eps, "c": args.c})
    body = {**report.to_dict(), "closed_loop": closed}
    _emit(args, "example44", body, _manifest(args, config), report.table() + _closed_loop_text(closed))
    return EXIT_OK if report.passed and _closed_loop_passed(closed) else EXIT_FAILED


def _box_sampler(seed: int) -> BoxSampler:
    return BoxSampler([-1.0] * 3, [1.0] * 3, seed)


def cmd_cstr_equilibria(args) -> int:
    if args.network:
        data = schema.load(args.network)
        net, _ = schema.read_network(data)
        report = equilibria(net, args.dstar)
        config = data
    else:
        report = autocatalytic_equilibria(args.k, args.feed)
        config = {"k": args.k, "c_f": list(args.feed)}
    lines = [f"{report.count} equilibria ({report.method})"]
    lines += [f"  c* = {np.round(root, 10).tolist()}  residual {res:.2e}"
              for root, res in zip(report.roots, report.residuals)]
    _emit(args, "cstr", report.to_dict(), _manifest(args, config), "\n".join(lines + report.notes))
    return EXIT_OK


def _cstr_instance(args):
    if args.root is not None:
        return autocatalytic_target(args.k, args.feed, args.root, args.dmax, lam=args.lam, epsilon=args.epsilon)
    dmax = 10.0 if args.dmax is None else args.dmax
    return autocatalytic_instance(args.theta, args.mu, dmax, args.lam, epsilon=args.epsilon)


def _cstr_config(args, inst) -> Dict:
    if args.root is not None:
        reactor = {"k": args.k, "c_f": list(args.feed), "root": args.root}
    else:
        reactor = {"theta": args.theta, "mu": args.mu}
    return {**reactor, "D_max": inst.net.D_max, "lam": args.lam, "epsilon": args.epsilon, "samples": args.samples}


def cmd_cstr_check(args) -> int:
    inst = _cstr_instance(args)
    state = asyncio.run(ReactorGraph().run(inst, args.samples, args.seed, synthesize=False))
    body = summarize(state)
    text = "\n".join([f"reactor conditions: {'PASS' if body['passed'] else 'FAIL'}"] + body["errors"])
    _emit(args, "cstr", body, _manifest(args, _cstr_config(args, inst)), text)
    return EXIT_OK if body["passed"] else EXIT_FAILED


def _stabilized(args):
    inst = _cstr_instance(args)
    state = asyncio.run(ReactorGraph().run(inst, args.samples, args.seed, synthesize=True))
    return inst, state


def cmd_cstr_stabilize(args) -> int:
    inst, state = _stabilized(args)
    body = summarize(state)
    law = state.get("law")
    if law is None:
        _emit(args, "cstr", body, _manifest(args, _cstr_config(args, inst)), "synthesis skipped: conditions fail")
        return EXIT_FAILED
    body["bounds"] = dilution_law_bounds(law, args.points, args.seed)
    text = (f"D(1) = {body['bounds']['at_target']:.6g}, D range on {args.points} states: "
            f"[{body['bounds']['min']:.6g}, {body['bounds']['max']:.6g}]")
    _emit(args, "cstr", body, _manifest(args, _cstr_config(args, inst)), text)
    return EXIT_OK


def cmd_cstr_simulate(args) -> int:
    inst, state = _stabilized(args)
    law = state.get("law")
    if law is None and not args.open_loop:
        _emit(args, "cstr", summarize(state), _manifest(args, _cstr_config(args, inst)), "synthesis skipped")
        return EXIT_FAILED
    rng = np.random.default_rng(args.seed)
    c0 = rng.uniform(0.05, 5.0, size=(args.runs, inst.net.n))
    control = open_loop(0.0) if args.open_loop else dilution_control(law)
    runs = simulate_batch(inst.system, control, np.log(c0), args.horizon, args.seed,
                          options=_options(args), workers=args.workers, log_coordinates=True)
    p = inst.cons.pairs[0].p
    mass = (-p, float(-p @ inst.net.c_f))
    reports = [monitor(traj, inst.spec, args.tol_monitor, mass) for traj in runs]
    distance = [float(np.max(np.abs(traj.concentrations[-1] - 1.0))) for traj in runs]
    body = {
        "open_loop": args.open_loop,
        "runs": [{"seed": traj.seed, "c0": traj.concentrations[0].tolist(), "final": traj.concentrations[-1].tolist(),
                  "distance": d, "monitors": rep.to_dict()} for traj, rep, d in zip(runs, reports, distance)],
        "converged": int(sum(d <= 1e-3 for d in distance)),
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for traj in runs:
            write_trajectory_csv(traj, os.path.join(args.out, f"cstr_{traj.seed}.csv"), inst.spec)
    _emit(args, "cstr", body, _manifest(args, {**_cstr_config(args, inst), "runs": args.runs, "horizon": args.horizon}),
          f"{body['converged']} of {len(runs)} runs within 1e-3 of the target")
    return EXIT_OK


ALIASES = {"cascade": "example43", "slab": "example44"}

COMMANDS = {
    "smallgain": cmd_smallgain,
    "feascheck": cmd_feascheck,
    "verify": cmd_verify,
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "example43": cmd_example43,
    "example44": cmd_example44,
    ("cstr", "equilibria"): cmd_cstr_equilibria,
    ("cstr", "check"): cmd_cstr_check,
    ("cstr", "stabilize"): cmd_cstr_stabilize,
    ("cstr", "simulate"): cmd_cstr_simulate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.getLogger().setLevel(args.log_level.upper())
    args.command = ALIASES.get(args.command, args.command)
    key = (args.command, args.action) if args.command == "cstr" else args.command
    try:
        return COMMANDS[key](args)
    except (OSError, SchemaError, UsageError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VRCLFError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
