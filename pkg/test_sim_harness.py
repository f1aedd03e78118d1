import math

import numpy as np
import pytest

from vrclf.errors import DomainError
from vrclf.fields import ScalarField
from vrclf.reaction_network import autocatalytic_equilibria, autocatalytic_network
from vrclf.schema import read_problem
from vrclf.sim_harness import (
    DisturbanceSignal, RunManifest, estimate_kl, feedback, integrate, monitor, open_loop,
    simulate_batch, trajectory_frame, write_trajectory_csv,
)
from vrclf.vclf_core import ControlAffineSystem, DisturbanceBox, synthesize

X = ["x"]
STARTS = [[1.0], [-1.5], [0.8], [2.0], [-0.6]]


def linear_system(a):
    """x' = a x"""
    return ControlAffineSystem([ScalarField.parse(["*", a, "x"], X)], [ScalarField.constant(1.0, X)])


def test_exponential_decay():
    traj = integrate(linear_system(-1.0), open_loop(0.0), [1.0], 1.0)
    assert traj.times[-1] == 1.0
    assert traj.final[0] == pytest.approx(math.exp(-1.0), abs=1e-7)
    assert len(traj.controls) == len(traj.times)


def test_horizon_must_be_positive():
    with pytest.raises(DomainError):
        integrate(linear_system(-1.0), open_loop(0.0), [1.0], 0.0)


def test_mass_is_conserved_without_dilution():
    net, _ = autocatalytic_network(1.0, (1.5, 0.5), 10.0)
    traj = integrate(net, open_loop(0.0), [1.0, 1.0], 5.0)
    np.testing.assert_allclose(traj.states.sum(axis=1), 2.0, rtol=1e-8)


def test_low_equilibrium_is_kept():
    c_f = (3.95, 0.05)
    net, _ = autocatalytic_network(1.0, c_f, 10.0)
    low = autocatalytic_equilibria(1.0, c_f).roots[-1]
    assert low[1] < 0.2
    traj = integrate(net, open_loop(1.0), low, 5.0)
    np.testing.assert_allclose(traj.final, low, atol=1e-6)


def test_piecewise_disturbance_switches_on_step_boundaries():
    box = DisturbanceBox((-1.0,), (1.0,))
    f = ScalarField.parse(["+", ["-", "x"], "d"], X, ["d"])
    system = ControlAffineSystem([f], [ScalarField.constant(0.0, X)], D=box)
    signal = DisturbanceSignal.piecewise([0.0, 0.37, 1.1], [[0.0], [1.0], [-1.0]], box)
    traj = integrate(system, open_loop(0.0), [0.0], 2.0, signal)
    for t, d in ((0.37, 1.0), (1.1, -1.0)):
        index = int(np.flatnonzero(traj.times == t)[0])
        assert traj.disturbances[index, 0] == d
    # x = 1 - e^-(t - 0.37) on the middle piece
    index = int(np.flatnonzero(traj.times == 1.1)[0])
    assert traj.states[index, 0] == pytest.approx(1.0 - math.exp(-0.73), abs=1e-7)


def test_piecewise_signal_validation():
    box = DisturbanceBox((-1.0,), (1.0,))
    with pytest.raises(DomainError):
        DisturbanceSignal.piecewise([0.5], [[0.0]], box)
    with pytest.raises(DomainError):
        DisturbanceSignal.piecewise([0.0], [[2.0]], box)
    with pytest.raises(DomainError):
        DisturbanceSignal.piecewise([0.0, 1.0, 1.0], [[0.0], [0.1], [0.2]], box)


def test_random_signal_is_seeded():
    box = DisturbanceBox((-1.0, 0.0), (1.0, 1.0))
    a, b = DisturbanceSignal.random(box, 11), DisturbanceSignal.random(box, 11)
    for t in (0.0, 0.3, 2.5):
        np.testing.assert_array_equal(a.value(t), b.value(t))
        assert box.contains(a.value(t))
    assert a.next_switch(0.0) > 0.0


def test_monitor_on_scalar_decay(scalar_problem):
    problem = read_problem(scalar_problem)
    law = synthesize(problem.system, problem.spec)
    traj = integrate(problem.system, feedback(law), [1.5], 5.0)
    report = monitor(traj, problem.spec)
    assert report.passed
    assert report["v-decrease"].checked > 0
    assert report["eta-decrease"].checked == 0


def test_mass_relaxation_monitor(reactor):
    x0 = np.log([0.5, 2.0])
    traj = integrate(reactor.system, open_loop(1.0), x0, 3.0, log_coordinates=True)
    p = reactor.cons.pairs[0].p
    report = monitor(traj, reactor.spec, mass=(p, float(p @ reactor.net.c_f)))
    assert report["mass-relaxation"].violation_count == 0
    np.testing.assert_allclose(traj.concentrations[0], [0.5, 2.0])


# ----------------------------------------------------------------------
# batches and KL envelopes
# ----------------------------------------------------------------------

def test_batch_is_returned_in_seed_order():
    runs = simulate_batch(linear_system(-1.0), open_loop(0.0), STARTS, 1.0, base_seed=3, workers=2)
    assert [traj.seed for traj in runs] == [3, 4, 5, 6, 7]
    assert [traj.states[0, 0] for traj in runs] == [x[0] for x in STARTS]


# ----------------------------------------------------------------------
# open loop with two stable equilibria
# ----------------------------------------------------------------------

BISTABLE_STARTS = [[1.05, 0.05], [0.05, 19.0]]


@pytest.mark.slow
def test_open_loop_settles_away_from_target(bistable):
    runs = simulate_batch(bistable.system, open_loop(0.0), np.log(BISTABLE_STARTS), 50.0, log_coordinates=True)
    others = np.array(bistable.cfg.params["other_roots"])
    for traj in runs:
        assert np.max(np.abs(traj.final)) > 0.1
        assert np.min(np.max(np.abs(others - traj.final), axis=1)) < 1e-3


@pytest.mark.slow
def test_open_loop_breaks_component_decrease(bistable):
    traj = integrate(bistable.system, open_loop(0.0), np.log(BISTABLE_STARTS[0]), 50.0, log_coordinates=True)
    report = monitor(traj, bistable.spec)
    assert report["v-decrease"].checked > 0
    assert report["v-decrease"].violation_count > 0


def test_kl_envelope_for_decay():
    runs = simulate_batch(linear_system(-1.0), open_loop(0.0), STARTS, 10.0)
    estimate = estimate_kl(runs)
    assert estimate.verdict
    assert estimate.counts == [5]
    assert np.all(np.diff(estimate.envelope[0]) <= 1e-12)


def test_kl_envelope_for_growth():
    runs = simulate_batch(linear_system(1.0), open_loop(0.0), STARTS, 2.0)
    assert not estimate_kl(runs).verdict


def test_kl_needs_enough_trajectories():
    runs = simulate_batch(linear_system(-1.0), open_loop(0.0), STARTS[:3], 1.0)
    with pytest.raises(DomainError):
        estimate_kl(runs)


# ----------------------------------------------------------------------
# output
# ----------------------------------------------------------------------

def test_trajectory_columns(scalar_problem):
    problem = read_problem(scalar_problem)
    traj = integrate(problem.system, open_loop(0.0), [1.0], 1.0)
    frame = trajectory_frame(traj, problem.spec)
    assert list(frame.columns) == ["t", "x_1", "u", "eta", "W", "V_1", "active_set"]
    assert (frame["active_set"] == 1).all()


def test_csv_is_deterministic(tmp_path):
    traj = integrate(linear_system(-1.0), open_loop(0.0), [1.0], 2.0)
    first = write_trajectory_csv(traj, str(tmp_path / "a.csv"))
    second = write_trajectory_csv(traj, str(tmp_path / "b.csv"))
    assert open(first).read() == open(second).read()


def test_manifest_hash_ignores_key_order(tmp_path):
    a = RunManifest("simulate", {"seed": 1, "T": [1, 2]})
    b = RunManifest("simulate", {"T": [1, 2], "seed": 1})
    c = RunManifest("simulate", {"T": [1, 2], "seed": 2})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    path = a.finish().write(str(tmp_path / "manifest.json"))
    assert a.config_hash() in open(path).read()
