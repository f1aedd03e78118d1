import dataclasses

import numpy as np
import pytest

from vrclf.corollary_lab import (
    build_spec, check_corollary_implications, check_local_decay, check_pair_condition, check_slab_conditions,
    find_quadratic_clf_witness, quadratic_clf_sweep, rho_from_q, select_local_gain, slab_instance,
)
from vrclf.errors import DomainError
from vrclf.fields import Univariate
from vrclf.gain_calculus import identity
from vrclf.vclf_core import BoxSampler, check_implications

BOX = ([-2.0] * 3, [2.0] * 3)


def test_build_spec_moves_gains_to_v_scale(cascade):
    _, cfg = cascade
    spec = build_spec(cfg)
    # 2|x| becomes 4 s once V = x^2/2
    assert spec.gains[0, 1](1.0) == pytest.approx(4.0, rel=1e-9)
    assert spec.gains[0, 2].is_zero
    assert spec.r == pytest.approx(cfg.r / 2.0)
    assert spec.V[2].value(np.array([0.0, 0.0, 2.0])) == pytest.approx(2.0)


def test_rho_from_constant_profile():
    rho = rho_from_q(Univariate(0.25))
    assert float(rho(2.0)) == pytest.approx(1.0)
    assert float(rho(0.0)) == 0.0


def test_cascade_local_gain(cascade):
    _, cfg = cascade
    p = cfg.params["p"]
    assert cfg.params["lower"] < p < cfg.params["upper"]
    assert p <= cfg.params["lower"] + 1.0
    np.testing.assert_allclose(cfg.kvec, [0.0, 0.0, -p])


def test_local_gain_is_reproducible(cascade):
    _, cfg = cascade
    p, r, _ = select_local_gain(cfg.params["g"], identity(), 0.5, 0.5)
    assert p == cfg.params["p"]
    assert r == cfg.r


def test_cascade_ratios_must_lie_in_unit_interval():
    from vrclf.corollary_lab import cascade_instance
    with pytest.raises(DomainError):
        cascade_instance(1.5, 0.5)


def test_decay_profile_must_be_positive(cascade):
    _, cfg = cascade
    with pytest.raises(DomainError):
        dataclasses.replace(cfg, Q=0.0)


def test_cascade_local_decay(cascade):
    _, cfg = cascade
    report = check_local_decay(cfg, 5000, seed=2)
    assert report.passed
    assert report["local-law"].hits > 0


@pytest.mark.slow
def test_cascade_implications(cascade):
    _, cfg = cascade
    report = check_corollary_implications(cfg, BoxSampler(*BOX, seed=0), 40000, local_samples=5000)
    assert report.passed, report.table()


# ----------------------------------------------------------------------
# single quadratic CLF
# ----------------------------------------------------------------------

def test_quadratic_clf_witness():
    witness = find_quadratic_clf_witness(1.0, 1.0)
    assert witness is not None
    np.testing.assert_allclose(witness["x"], [1.0, 0.1, 10.075], rtol=1e-4)
    assert witness["residual"] <= 1e-8
    assert witness["lhs"] <= witness["rhs"]


def test_quadratic_clf_needs_positive_weights():
    with pytest.raises(DomainError):
        find_quadratic_clf_witness(0.0, 1.0)


def test_quadratic_clf_sweep_shape():
    rows = quadratic_clf_sweep(points=3)
    assert len(rows) == 9
    center = rows[4]
    assert (center["p"], center["q"]) == pytest.approx((1.0, 1.0))
    assert center["violated"]


# ----------------------------------------------------------------------
# slab instance
# ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def slab():
    return slab_instance()


def test_slab_defaults(slab):
    _, cfg = slab
    assert cfg.params["R"] == pytest.approx(0.24)
    assert cfg.eta.value(np.zeros(3)) == pytest.approx(-0.1)
    assert float(cfg.Kfun(0.0)) == pytest.approx(25.2)
    assert float(cfg.delta(0.3)) == pytest.approx(0.04)
    assert cfg.r < np.sqrt(0.2)


@pytest.mark.parametrize("kwargs", [
    {"a": 0.05, "c": 0.1},
    {"eps": 0.0},
    {"R": 0.1},
    {"g": ["*", "x2", "x3"]},
])
def test_slab_rejects_bad_constants(kwargs):
    with pytest.raises(DomainError):
        slab_instance(**kwargs)


def test_slab_outer_eta_chain_holds(slab):
    _, cfg = slab
    report = check_slab_conditions(cfg, BoxSampler([-1.0] * 3, [1.0] * 3, seed=4), 5000)
    assert report["outer-eta-chain"].violation_count == 0
    assert report["outer-eta-margin"].violation_count == 0
    assert report["outer-eta-chain"].hits > 0


def test_slab_condition_holds(slab):
    _, cfg = slab
    report = check_slab_conditions(cfg, BoxSampler([-1.0] * 3, [1.0] * 3, seed=4), 5000)
    assert report["slab-condition"].hits > 0
    assert report["slab-condition"].violation_count == 0


# ----------------------------------------------------------------------
# coordinate conditions carried to the translated VRCLF
# ----------------------------------------------------------------------

@pytest.mark.slow
def test_pair_condition_carries_to_translated_implications(cascade):
    system, cfg = cascade
    pair = check_pair_condition(cfg, BoxSampler(*BOX, seed=5), 20000)
    assert pair.hits > 0
    assert pair.violation_count == 0
    report = check_implications(system, build_spec(cfg), BoxSampler(*BOX, seed=6), 20000)
    broken = {key: r.violation_count for key, r in report.results.items() if r.violation_count}
    assert broken == {}
