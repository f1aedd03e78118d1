import asyncio

import numpy as np
import pytest

from vrclf.errors import DomainError, HypothesisError
from vrclf.fields import ScalarField
from vrclf.graph import ReactorGraph, summarize
from vrclf.sim_harness import dilution_control, simulate_batch
from vrclf.vclf_core import BoxSampler
from vrclf.reaction_network import (
    ConservationData, CstrInstance, ReactionNetwork, autocatalytic_equilibria, autocatalytic_instance,
    autocatalytic_network, autocatalytic_scaled, autocatalytic_target, check_cstr_conditions, check_hypotheses,
    check_w_bounds, dmax_bound, equilibria, find_conservation, log_transform, normalize, require_hypotheses,
    scaled_parameters, stabilize, stoichiometric_sigma,
)


def with_b(inst, b):
    cons = ConservationData(inst.cons.pairs, b, inst.cons.R, inst.cons.gfun)
    return CstrInstance(inst.net, cons, inst.cfg)


# ----------------------------------------------------------------------
# networks and conservation
# ----------------------------------------------------------------------

def test_null_space_pair():
    pairs = find_conservation([[-1.0], [1.0]])
    assert len(pairs) == 1
    p = pairs[0].p / pairs[0].p[0]
    np.testing.assert_allclose(p, [1.0, 1.0])
    np.testing.assert_allclose(pairs[0].q, [0.0])


def test_supplied_pairs_are_checked():
    S = [[-1.0], [1.0]]
    assert find_conservation(S, [((1.0, 0.0), None)], include_null_space=False) == []
    pairs = find_conservation(S, [((0.0, 1.0), (1.0,))], include_null_space=False)
    assert len(pairs) == 1
    np.testing.assert_allclose(pairs[0].q, [1.0])
    assert find_conservation(S, [((0.0, 1.0), (2.0,))], include_null_space=False) == []


def test_invertible_stoichiometry_conserves_nothing():
    assert find_conservation(np.eye(2)) == []


def test_network_validation():
    rate = ScalarField.parse(["*", "c1", "c2"], ["c1", "c2"])
    with pytest.raises(DomainError):
        ReactionNetwork(np.array([[-1.0], [1.0]]), (rate, rate), np.ones(2), 5.0)
    with pytest.raises(DomainError):
        ReactionNetwork(np.array([[-1.0], [1.0]]), (rate,), np.array([-1.0, 1.0]), 5.0)
    with pytest.raises(DomainError):
        ReactionNetwork(np.array([[-1.0], [1.0]]), (rate,), np.ones(2), 0.0)


def test_network_dict_form():
    net, _ = autocatalytic_network(1.0, (1.5, 0.5), 10.0)
    again = ReactionNetwork.from_dict(net.to_dict())
    c = np.array([0.7, 1.3])
    np.testing.assert_allclose(again.rhs(c, 2.0), net.rhs(c, 2.0))


def test_stoichiometric_sigma():
    assert stoichiometric_sigma([[-1.0, 0.0], [2.0, -3.0]]) == 3.0


def test_scaled_constants():
    net, cons = autocatalytic_scaled(1.0, 0.5, 10.0)
    np.testing.assert_allclose(net.c_f, [2.0, 0.5])
    np.testing.assert_allclose(net.S, [[-1.0], [0.5]])
    np.testing.assert_allclose(cons.pairs[0].p, [-0.5, -1.0])
    assert (cons.b, cons.R) == (3.0, 2.0)
    assert cons.gfun(2.0) == pytest.approx(4.0)


def test_hypotheses_hold(reactor):
    report = require_hypotheses(reactor.net, reactor.cons, samples=5000)
    assert report.passed
    assert report["rate-bound"].hits == 5000


def test_small_b_breaks_linear_bound(reactor):
    inst = with_b(reactor, 0.1)
    report = check_hypotheses(inst.net, inst.cons, samples=2000)
    assert report["max-bound"].violation_count > 0
    with pytest.raises(HypothesisError):
        require_hypotheses(inst.net, inst.cons, samples=2000)


# ----------------------------------------------------------------------
# equilibria
# ----------------------------------------------------------------------

def test_single_autocatalytic_equilibrium():
    report = autocatalytic_equilibria(1.0, (1.5, 0.5))
    assert report.count == 1
    c1, c2 = report.roots[0]
    assert c2 == pytest.approx(1.565, abs=1e-3)
    assert c1 + c2 == pytest.approx(2.0)
    assert max(report.residuals) <= 1e-10
    assert report.notes == []


def test_three_autocatalytic_equilibria():
    report = autocatalytic_equilibria(1.0, (3.95, 0.05))
    assert report.count == 3
    assert max(report.residuals) <= 1e-10


def test_root_count_note_near_fold():
    # k M > 3 but the feed of product is too large for the two upper roots
    report = autocatalytic_equilibria(1.0, (3.9, 0.1))
    assert report.count == 1
    assert report.notes


def test_newton_agrees_with_bisection():
    net, _ = autocatalytic_network(1.0, (1.5, 0.5), 10.0)
    newton = equilibria(net, 1.0)
    bisection = autocatalytic_equilibria(1.0, (1.5, 0.5))
    assert newton.count == 1
    np.testing.assert_allclose(newton.roots[0], bisection.roots[0], atol=1e-8)


def test_newton_finds_all_three_equilibria():
    c_f = (3.95, 0.05)
    net, _ = autocatalytic_network(1.0, c_f, 10.0)
    newton = equilibria(net, 1.0)
    bisection = autocatalytic_equilibria(1.0, c_f)
    assert newton.count == 3
    np.testing.assert_allclose(np.array(newton.roots), np.array(bisection.roots), atol=1e-8)


def test_newton_on_normalized_reactor(reactor):
    report = equilibria(reactor.net, 1.0)
    assert any(np.allclose(root, 1.0, atol=1e-8) for root in report.roots)


def test_target_instance_sits_on_middle_root(bistable):
    np.testing.assert_allclose(bistable.net.rhs(np.ones(2), 1.0), 0.0, atol=1e-10)
    c_star = bistable.cfg.params["c_star"]
    assert 3.7 < c_star[0] < 3.9
    assert len(bistable.cfg.params["other_roots"]) == 2
    assert bistable.net.D_max > max(dmax_bound(bistable.cfg.params["theta"], bistable.cfg.params["mu"]))


def test_target_index_must_exist():
    with pytest.raises(DomainError):
        autocatalytic_target(1.0, (1.5, 0.5), 1)


def test_equilibrium_without_reactions_is_feed():
    zero_rate = ScalarField.constant(0.0, ["c1", "c2"])
    net = ReactionNetwork(np.array([[-1.0], [1.0]]), (zero_rate,), np.array([1.5, 0.5]), 5.0)
    report = equilibria(net, 1.0)
    assert report.count == 1
    np.testing.assert_allclose(report.roots[0], [1.5, 0.5], rtol=1e-9)


@pytest.mark.parametrize("D_star", [0.0, 10.0, 12.0])
def test_dilution_must_lie_below_ceiling(D_star):
    net, _ = autocatalytic_network(1.0, (1.5, 0.5), 10.0)
    with pytest.raises(DomainError):
        equilibria(net, D_star)


def test_normalized_feed_matches_scaled_form():
    net, cons = autocatalytic_network(1.0, (1.5, 0.5), 10.0)
    root = autocatalytic_equilibria(1.0, (1.5, 0.5)).roots[0]
    scaled, scaled_cons = normalize(net, root, cons)
    theta, mu = scaled_parameters(1.0, root)
    np.testing.assert_allclose(scaled.c_f, [1.0 + theta, 1.0 - mu * theta], rtol=1e-9)
    np.testing.assert_allclose(scaled.rhs(np.ones(2), 1.0), [0.0, 0.0], atol=1e-9)
    assert scaled_cons.N == cons.N
    log_transform(scaled)


def test_dmax_bound():
    assert dmax_bound(1.0, 0.5) == pytest.approx((2.25, 9.75))
    assert dmax_bound(2.0, 0.25) == pytest.approx((1.5625, 10.3125))


def test_product_feed_must_stay_positive():
    with pytest.raises(DomainError):
        dmax_bound(2.0, 0.5)
    with pytest.raises(DomainError):
        autocatalytic_scaled(1.0, 1.0, 10.0)


# ----------------------------------------------------------------------
# log coordinates and VRCLF data
# ----------------------------------------------------------------------

def test_log_transform_at_target(reactor):
    system = reactor.system
    np.testing.assert_allclose(system.drift(np.zeros(2)), [0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(system.input_vector(np.zeros(2)), [1.0, -0.5])
    assert (system.U.a, system.U.b) == (1.0, 9.0)


def test_log_transform_needs_normalized_network():
    net, _ = autocatalytic_network(1.0, (1.5, 0.5), 10.0)
    with pytest.raises(DomainError):
        log_transform(net)


def test_log_transform_needs_room_for_unit_dilution():
    net, _ = autocatalytic_scaled(1.0, 0.5, 0.5)
    with pytest.raises(DomainError):
        log_transform(net)


def test_auxiliary_functions_at_target(reactor):
    cfg = reactor.corollary
    assert cfg.eta.value(np.zeros(2)) == pytest.approx(-0.1)
    assert cfg.W.value(np.zeros(2)) == pytest.approx(3.0)
    assert reactor.spec.k == 2


def test_w_bounds(reactor):
    assert check_w_bounds(reactor, samples=5000).passed


@pytest.mark.slow
def test_reactor_conditions_hold(reactor):
    report = check_cstr_conditions(reactor, samples=20000, seed=0, local_samples=5000)
    assert report.passed, report.table()


@pytest.mark.slow
def test_low_ceiling_breaks_outside_decay():
    inst = autocatalytic_instance(theta=1.0, mu=0.5, D_max=1.0)
    report = check_cstr_conditions(inst, samples=20000, seed=0, local_samples=1000)
    assert report["outside-decay"].violation_count > 0


# ----------------------------------------------------------------------
# dilution law
# ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def dilution(reactor):
    return stabilize(reactor)


def test_dilution_at_target(dilution):
    assert dilution(np.ones(2)) == pytest.approx(1.0)


def test_dilution_in_local_ball(dilution):
    # u = 2 x2 near the target
    assert dilution(np.exp([0.01, 0.02])) == pytest.approx(1.04)


def test_dilution_needs_positive_concentrations(dilution):
    with pytest.raises(DomainError):
        dilution(np.array([0.0, 1.0]))


def test_dilution_stays_within_ceiling(reactor, dilution):
    X = BoxSampler(np.full(2, np.log(0.05)), np.full(2, np.log(5.0)), 3).draw(50)
    for x in X:
        u = dilution.control(x)
        assert -1.0 <= u <= reactor.net.D_max - 1.0
        assert 0.0 <= dilution(np.exp(x)) <= reactor.net.D_max


@pytest.mark.slow
def test_dilution_drives_random_feeds_to_target(reactor, dilution):
    c0 = np.random.default_rng(0).uniform(0.05, 5.0, size=(20, 2))
    runs = simulate_batch(reactor.system, dilution_control(dilution), np.log(c0), 200.0, log_coordinates=True)
    for traj in runs:
        np.testing.assert_allclose(traj.concentrations[-1], 1.0, atol=1e-3)


# ----------------------------------------------------------------------
# pipeline
# ----------------------------------------------------------------------

def test_pipeline_stops_on_failed_hypotheses(reactor):
    state = asyncio.run(ReactorGraph().run(with_b(reactor, 0.1), samples=2000, seed=0))
    summary = summarize(state)
    assert not summary["passed"]
    assert any(e.startswith("hypotheses:") for e in summary["errors"])
    assert "spec_result" not in summary
    assert not summary["synthesized"]


@pytest.mark.slow
def test_pipeline_synthesizes_law(reactor):
    state = asyncio.run(ReactorGraph().run(reactor, samples=20000, seed=0))
    summary = summarize(state)
    assert summary["passed"], summary["errors"]
    assert summary["synthesized"]
    assert summary["spec_result"]["k"] == 2
