import numpy as np
import pytest

from vrclf.errors import DomainError
from vrclf.feasibility import ControlSet
from vrclf.fields import ScalarField, Univariate
from vrclf.gain_calculus import GainMatrix, linear
from vrclf.vclf_core import (
    BallSampler, BoxSampler, ControlAffineSystem, DisturbanceBox, Recorder, VRCLFSpec, active_set, bump,
    certificates, check_implications, check_local_law, check_sandwich, lie_derivatives, max_over_D,
    sub_controller_k2, synthesize,
)

X = ["x"]


def scalar_system(g=0.0, U=None):
    """x' = -x + g u"""
    return ControlAffineSystem([ScalarField.parse(["-", "x"], X)], [ScalarField.constant(g, X)], U=U)


def scalar_spec(rho="s", **overrides):
    data = dict(
        V=[ScalarField.quadratic(0, X)],
        eta=ScalarField.constant(-1.0, X),
        W=ScalarField.constant(1.0, X),
        delta=1.0,
        Kfun=1.0,
        rho=rho,
        epsilon=-1.0,
        gains=GainMatrix.from_entries(1, {}),
        local_feedback=[0.0],
        r=0.5,
    )
    data.update(overrides)
    return VRCLFSpec(**data)


def test_lie_derivatives_on_cascade(cascade):
    system, _ = cascade
    V3 = ScalarField.quadratic(2, system.state_vars)
    assert lie_derivatives(system, V3, np.array([1.0, 0.0, 2.0])) == pytest.approx((2.0, 2.0))


def test_lie_derivatives_of_constant():
    system = scalar_system(1.0)
    assert lie_derivatives(system, ScalarField.constant(3.0, X), np.array([2.0])) == (0.0, 0.0)


def test_max_over_disturbance_box():
    f = ScalarField.parse(["+", ["-", "x"], ["*", 3, "d"]], X, ["d"])
    system = ControlAffineSystem([f], [ScalarField.constant(0.0, X)], D=DisturbanceBox((-1.0,), (1.0,)))
    V = ScalarField.quadratic(0, X)
    # -x^2 + 3 x d is maximal at a vertex: -4 + 6
    assert max_over_D(system, V, np.array([2.0])) == pytest.approx(2.0)
    assert system.exact_max


def test_max_over_single_point_box():
    f = ScalarField.parse(["*", "d", "x"], X, ["d"])
    system = ControlAffineSystem([f], [ScalarField.constant(0.0, X)], D=DisturbanceBox((0.5,), (0.5,)))
    V = ScalarField.quadratic(0, X)
    x = np.array([2.0])
    assert max_over_D(system, V, x) == pytest.approx(lie_derivatives(system, V, x, np.array([0.5]))[0])


def test_disturbance_needs_box():
    f = ScalarField.parse(["+", "x", "d"], X, ["d"])
    with pytest.raises(DomainError):
        ControlAffineSystem([f], [ScalarField.constant(0.0, X)])


def test_active_set():
    xs = ["x1", "x2"]
    spec = VRCLFSpec(
        V=[ScalarField.quadratic(0, xs), ScalarField.quadratic(1, xs)],
        eta=ScalarField.constant(-1.0, xs),
        W=ScalarField.constant(1.0, xs),
        delta=1.0, Kfun=1.0, rho="s", epsilon=-1.0,
        gains=GainMatrix.from_entries(2, {(1, 2): linear(2.0), (2, 1): linear(1.0 / 3.0)}),
        local_feedback=[0.0, 0.0], r=0.5,
    )
    assert active_set(spec, np.array([1.0, 3.0])) == [1]
    assert active_set(spec, np.zeros(2)) == [0, 1]


def test_spec_validation():
    with pytest.raises(DomainError):
        scalar_spec(r=0.0)
    with pytest.raises(DomainError):
        scalar_spec(local_feedback=[0.0, 1.0])


def test_bump():
    assert bump(-1.0) == 0.0
    assert bump(2.0) == 1.0
    assert bump(0.5) == pytest.approx(0.5)
    s = np.linspace(0.05, 0.95, 46)
    assert np.all(np.diff([bump(v) for v in s]) > 0)


def test_box_sampler_is_seeded():
    a = BoxSampler([-1.0, 0.0], [1.0, 2.0], seed=3).draw(5)
    b = BoxSampler([-1.0, 0.0], [1.0, 2.0], seed=3).draw(5)
    np.testing.assert_array_equal(a, b)
    assert np.all((a[:, 1] >= 0.0) & (a[:, 1] <= 2.0))


def test_ball_sampler_radius():
    X = BallSampler(3, 0.5, seed=1).draw(1000)
    assert np.max(np.linalg.norm(X, axis=1)) <= 0.5 + 1e-12


# ----------------------------------------------------------------------
# implication checks
# ----------------------------------------------------------------------

def test_scalar_decay_passes():
    report = check_implications(scalar_system(), scalar_spec(), BoxSampler([-2.0], [2.0], 0), 5000)
    assert report.passed
    assert report["v-flat"].status == "pass"
    assert report["v-pair"].status == "vacuous"


def test_inflated_rho_fails_with_witness():
    spec = scalar_spec(rho=Univariate(lambda s: 1e6 * s))
    report = check_implications(scalar_system(), spec, BoxSampler([-2.0], [2.0], 0), 2000)
    assert not report.passed
    result = report["v-flat"]
    assert result.violation_count > 0
    assert result.violations[0].residual > 0
    assert report.to_dict()["implications"][0]["witnesses"]


def test_bounded_input_adds_implications():
    system = scalar_system(1.0, ControlSet.p3(1.0, 1.0))
    report = check_implications(system, scalar_spec(), BoxSampler([-2.0], [2.0], 0), 1000)
    assert "v-lower-input" in report.results
    assert "w-upper-input" in report.results


def test_parallel_batches_match_serial():
    sampler_args = ([-2.0], [2.0], 5)
    serial = check_implications(scalar_system(), scalar_spec(), BoxSampler(*sampler_args), 4000, batch_size=1000)
    threaded = check_implications(scalar_system(), scalar_spec(), BoxSampler(*sampler_args), 4000,
                                  batch_size=1000, workers=4)
    assert serial["v-flat"].hits == threaded["v-flat"].hits


def test_sandwich_and_local_law():
    spec = scalar_spec()
    sandwich = check_sandwich(spec, BoxSampler([-2.0], [2.0], 0), 1000)
    assert sandwich.passed
    assert set(sandwich.results) >= {"W>=1", "eta(0)<0", "ball-2r"}
    local = check_local_law(scalar_system(), spec, 1000, seed=1)
    assert local.passed


def test_nonnegative_eta_at_origin_is_reported():
    spec = scalar_spec(eta=ScalarField.constant(0.5, X), epsilon=1.0)
    report = check_sandwich(spec, BoxSampler([-2.0], [2.0], 0), 100)
    assert report["eta(0)<0"].violation_count == 1


# ----------------------------------------------------------------------
# synthesis
# ----------------------------------------------------------------------

def test_law_vanishes_at_origin():
    law = synthesize(scalar_system(1.0), scalar_spec())
    assert law.region(np.zeros(1)) == "origin"
    assert law(np.zeros(1)) == 0.0


def test_regions_by_radius():
    law = synthesize(scalar_system(1.0), scalar_spec(r=0.5))
    assert law.region(np.array([0.2])) == "local"
    assert law.region(np.array([0.8])) == "local-k2"
    assert law.region(np.array([3.0])) == "k2"


def test_blend_weight_midpoint():
    law = synthesize(scalar_system(1.0), scalar_spec(r=0.5))
    x = np.array([0.5 * np.sqrt(2.5)])
    assert law.weight("local-k2", x) == pytest.approx(0.5)


def test_k2_controller_and_certificate():
    system, spec = scalar_system(1.0), scalar_spec()
    # -1 + 0.75 * 0.5 + u < 0 leaves u = 0 as the min-norm choice
    assert sub_controller_k2(system, spec, np.array([1.0])) == 0.0
    law = synthesize(system, spec)
    cert = certificates(system, spec, law, np.array([3.0]))
    assert cert.ok()
    assert cert.v_residuals[0] == pytest.approx(-9.0 + 0.5 * 4.5)


def test_unstable_drift_needs_input():
    system = ControlAffineSystem([ScalarField.parse("x", X)], [ScalarField.constant(1.0, X)])
    law = synthesize(system, scalar_spec())
    x = np.array([2.0])
    u = law(x)
    # x (x + u) <= -0.75 rho(V) = -1.5 needs u < -2.75
    assert u < -2.75
    assert certificates(system, scalar_spec(), law, x).ok()


# ----------------------------------------------------------------------
# seams and sampled certificates
# ----------------------------------------------------------------------

def shell_law():
    """x' = x + u with eta = x^2 - 1 and epsilon = 1, so every region is reachable"""
    system = ControlAffineSystem([ScalarField.parse("x", X)], [ScalarField.constant(1.0, X)])
    spec = scalar_spec(eta=ScalarField.parse(["-", ["pow", "x", 2], 1], X), epsilon=1.0, local_feedback=[-2.0])
    return system, spec, synthesize(system, spec)


def test_blend_matches_pure_branches_on_radius_seams():
    _, spec, law = shell_law()
    inner, outer = np.array([spec.r]), np.array([2.0 * spec.r])
    assert law.branch("local-k2", inner) == pytest.approx(law.branch("local", inner), abs=1e-9)
    assert law.branch("local-k2", outer) == pytest.approx(law.branch("k2", outer), abs=1e-9)


@pytest.mark.parametrize("level", [0.2, 0.4, 0.6, 0.8])
def test_law_agrees_across_eta_seams(level):
    _, _, law = shell_law()
    seam = np.sqrt(1.0 + level)
    below, above = np.array([seam - 1e-10]), np.array([seam + 1e-10])
    assert law.region(below) != law.region(above)
    assert abs(law(below) - law(above)) <= 1e-9


@pytest.mark.parametrize("name, first, second, eta", [
    ("k2-k3", "k2", "k3", (0.2, 0.4)),
    ("k3-k1", "k3", "k1", (0.6, 0.8)),
])
def test_eta_blends_end_on_pure_branches(name, first, second, eta):
    _, _, law = shell_law()
    low, high = (np.array([np.sqrt(1.0 + level)]) for level in eta)
    assert law.branch(name, low) == pytest.approx(law.branch(first, low), abs=1e-9)
    assert law.branch(name, high) == pytest.approx(law.branch(second, high), abs=1e-9)


def test_law_is_admissible_on_samples():
    system = scalar_system(1.0, ControlSet.p3(1.0, 1.0))
    law = synthesize(system, scalar_spec(rho=["*", 4, "s"], local_feedback=[-0.5]))
    values = [law(x) for x in BoxSampler([-1.9], [1.9], 7).draw(200)]
    assert all(system.U.contains(u) for u in values)
    assert max(abs(u) for u in values) > 0.5


def test_certificates_hold_below_the_shell():
    system, spec, law = shell_law()
    X = BoxSampler([-3.0], [3.0], 11).draw(2000)
    eta = X[:, 0] ** 2 - 1.0
    X = X[(np.abs(X[:, 0]) > 2.0 * spec.r) & (eta < 0.4 * spec.epsilon)]
    assert len(X) > 20
    for x in X:
        cert = certificates(system, spec, law, x)
        assert cert.v_residuals
        assert cert.ok(), (x, cert)


def test_strict_consequent_needs_room_beyond_the_slack():
    rec = Recorder(np.zeros((3, 1)), None, 1e-9, 1)
    everywhere = np.ones(3, dtype=bool)
    rec.record("loose", everywhere, np.array([0.0, -1.0, 1e-12]), 0.0)
    rec.record("strict", everywhere, np.array([0.0, -1.0, -1e-12]), 0.0, strict=True)
    assert rec.results["loose"].violation_count == 0
    assert rec.results["strict"].violation_count == 2
