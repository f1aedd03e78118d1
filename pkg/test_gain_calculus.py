import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from vrclf.errors import CycleCapError, DomainError
from vrclf.gain_calculus import (
    GainClass, GainMatrix, MonotoneFn, Verdict, add, check_small_gain, compose, compose_all,
    default_grid, identity, linear, maximum, path_maximum, power, regularize_gains,
    scaled_inverse, simple_cycles, tabulated, translate_gain, zero,
)
from config import Config
from vrclf import gain_calculus
from vrclf.corollary_lab import cascade_gains

GRID = default_grid(120)


def test_zero_evaluates_to_zero():
    assert zero()(5.0) == 0.0


def test_compose_linear():
    assert compose(linear(2.0), linear(0.25))(4.0) == pytest.approx(2.0)


def test_scaled_inverse_of_square_is_square_root():
    assert scaled_inverse(power(1.0, 2.0), 1.0, 1.0)(9.0) == pytest.approx(3.0, rel=1e-10)


def test_scaled_inverse_zero_argument():
    assert scaled_inverse(power(2.0, 3.0))(0.0) == 0.0


def test_negative_argument_rejected():
    with pytest.raises(DomainError):
        linear(1.0)(-1.0)


def test_non_finite_argument_rejected():
    with pytest.raises(DomainError):
        identity()(math.inf)


def test_inverse_needs_kinf():
    bounded = tabulated([0.0, 1.0, 2.0], [0.0, 1.0, 1.0])
    with pytest.raises(DomainError):
        scaled_inverse(bounded)


def test_class_tags_propagate():
    assert linear(0.0).class_tag == GainClass.N1
    assert linear(3.0).class_tag == GainClass.KINF
    assert compose(linear(2.0), zero()).class_tag == GainClass.N1
    assert maximum(linear(1.0), power(2.0, 0.5)).class_tag == GainClass.KINF
    assert maximum(linear(1.0), zero()).class_tag == GainClass.N1
    assert add(zero(), linear(1.0)).class_tag == GainClass.KINF


def test_tabulated_extends_last_segment():
    fn = tabulated([0.0, 1.0, 2.0], [0.0, 2.0, 3.0], GainClass.KINF)
    assert fn(0.5) == pytest.approx(1.0)
    assert fn(4.0) == pytest.approx(5.0)


def test_tabulated_must_start_at_origin():
    with pytest.raises(DomainError):
        tabulated([1.0, 2.0], [0.0, 1.0])


def test_array_evaluation():
    values = power(2.0, 2.0)(np.array([0.0, 1.0, 3.0]))
    np.testing.assert_allclose(values, [0.0, 2.0, 18.0])


def test_dict_form_roundtrip():
    fn = maximum(linear(0.5), scaled_inverse(power(1.0, 2.0), 2.0, 0.5))
    again = MonotoneFn.from_dict(fn.to_dict())
    np.testing.assert_allclose(again(GRID), fn(GRID))


def test_unknown_kind_rejected():
    with pytest.raises(DomainError):
        MonotoneFn.from_dict({"kind": "exotic"})


def test_translate_gain_to_v_scale():
    # 2|x| on the coordinate scale becomes 4 s on the V = x^2/2 scale
    assert translate_gain(linear(2.0))(1.5) == pytest.approx(6.0)
    assert translate_gain(zero()).is_zero


# ----------------------------------------------------------------------
# gain matrices and cycles
# ----------------------------------------------------------------------

def test_diagonal_must_be_zero():
    with pytest.raises(DomainError):
        GainMatrix.from_entries(2, {(1, 1): linear(1.0)})


def test_cascade_gains_satisfy_small_gain():
    G = cascade_gains(0.5, 0.5, identity())
    report = check_small_gain(G, GRID)
    assert report.verdict == Verdict.SATISFIED
    by_cycle = {c.indices: c for c in report.cycles}
    assert set(by_cycle) == {(0, 1), (1, 2), (0, 1, 2)}
    assert by_cycle[(0, 1)].relative_margin == pytest.approx(0.5, rel=1e-9)
    assert by_cycle[(0, 1)].slope_at_zero == pytest.approx(0.5, rel=1e-6)


def test_zero_matrix_is_vacuously_satisfied():
    G = GainMatrix.from_entries(3, {})
    report = check_small_gain(G, GRID)
    assert report.satisfied
    assert report.cycles == []


def test_expanding_pair_is_violated():
    G = GainMatrix.from_entries(2, {(1, 2): linear(1.1), (2, 1): linear(1.1)})
    report = check_small_gain(G, GRID)
    assert report.verdict == Verdict.VIOLATED
    assert report.witness_cycle == (0, 1)
    assert report.to_dict()["witness_cycle"] == [1, 2]
    assert report.cycles[0].worst_margin < 0


def test_identity_pair_is_marginal_or_violated():
    G = GainMatrix.from_entries(2, {(1, 2): identity(), (2, 1): identity()})
    assert check_small_gain(G, GRID).verdict != Verdict.SATISFIED


def test_cycles_start_at_smallest_index():
    entries = {(i, j): linear(0.5) for i in range(1, 4) for j in range(1, 4) if i != j}
    cycles = simple_cycles(GainMatrix.from_entries(3, entries))
    assert len(cycles) == 5
    assert all(c[0] == min(c) for c in cycles)


def test_cycle_cap():
    with pytest.raises(CycleCapError):
        simple_cycles(GainMatrix.from_entries(13, {}), max_k=12)


def test_dominance():
    G = GainMatrix.from_entries(2, {(1, 2): linear(2.0), (2, 1): linear(1.0 / 3.0)})
    assert not G.dominant(0, [0.5, 4.5])
    assert G.dominant(1, [0.5, 4.5])


def test_path_maximum_through_intermediate_node():
    G = GainMatrix.from_entries(3, {(1, 3): linear(0.5), (3, 2): linear(0.5), (2, 1): linear(0.1)})
    a = path_maximum(G, 0, 1)
    # max of gamma_21 and gamma_13 o gamma_32
    assert a(1.0) == pytest.approx(0.25)


def test_regularize_zero_pair():
    G = GainMatrix.from_entries(2, {})
    reg = regularize_gains(G)
    assert reg[0, 1](2.0) == pytest.approx(1.0, rel=1e-9)
    assert reg[1, 0](2.0) == pytest.approx(1.0, rel=1e-9)
    assert reg[0, 1].class_tag == GainClass.KINF


def test_regularize_keeps_larger_gain():
    G = GainMatrix.from_entries(2, {(1, 2): linear(0.25), (2, 1): linear(0.5)})
    reg = regularize_gains(G)
    assert reg[0, 1](3.0) == pytest.approx(1.0, rel=1e-9)
    assert reg[1, 0](1.0) == pytest.approx(0.5, rel=1e-9)
    assert check_small_gain(reg, GRID).satisfied


def test_regularize_refuses_violated_matrix():
    G = GainMatrix.from_entries(2, {(1, 2): linear(2.0), (2, 1): linear(2.0)})
    with pytest.raises(DomainError):
        regularize_gains(G)


def test_matrix_dict_form():
    G = cascade_gains(0.5, 0.5, identity())
    again = GainMatrix.from_dict(G.to_dict())
    assert again.k == 3
    assert again[2, 0](2.0) == pytest.approx(G[2, 0](2.0))


def test_declared_size_must_match():
    data = GainMatrix.from_entries(2, {}).to_dict()
    data["k"] = 3
    with pytest.raises(DomainError):
        GainMatrix.from_dict(data)


def test_closed_form_inverses():
    assert scaled_inverse(linear(4.0)).closed is not None
    # 3 g^-1(s / 2) with g(t) = 2 t^2
    fn = scaled_inverse(compose(linear(2.0), power(1.0, 2.0)), 0.5, 3.0)
    assert fn.closed is not None
    assert fn(8.0) == pytest.approx(3.0 * math.sqrt(2.0), rel=1e-12)
    assert scaled_inverse(fn).closed is not None


def test_cascade_gains_invert_in_closed_form():
    G = cascade_gains(0.5, 0.5, identity())
    inverses = [G[i, j] for i in range(3) for j in range(3) if G[i, j].kind.value == "scaled_inverse"]
    assert inverses
    assert all(g.closed is not None for g in inverses)


def test_inverse_of_sum_uses_root_finding():
    fn = scaled_inverse(add(identity(), power(1.0, 3.0)))
    assert fn.closed is None
    # t + t^3 = 10 at t = 2
    np.testing.assert_allclose(fn(np.array([10.0, 10.0, 2.0, 0.0])), [2.0, 2.0, 1.0, 0.0], rtol=1e-10)


def test_inversion_tolerance_comes_from_config(monkeypatch):
    seen = []

    def recording_brentq(*args, **kwargs):
        seen.append(kwargs["rtol"])
        return brentq(*args, **kwargs)

    monkeypatch.setattr(gain_calculus, "brentq", recording_brentq)
    monkeypatch.setattr(Config, "INVERSION_RTOL", 1e-6)
    scaled_inverse(add(identity(), power(1.0, 3.0)))(10.0)
    assert seen == [1e-6]


def test_tangent_cycle_is_marginal():
    # slope 1 just above zero, yet every sampled margin is a quarter or more
    bent = tabulated([0.0, 1e-12, 2e-12, 1.0], [0.0, 0.5e-12, 1.5e-12, 0.5])
    G = GainMatrix.from_entries(2, {(1, 2): bent, (2, 1): identity()})
    report = check_small_gain(G, GRID)
    assert report.cycles[0].relative_margin > 0.24
    assert report.cycles[0].slope_at_zero == pytest.approx(1.0, rel=1e-6)
    assert report.verdict == Verdict.MARGINAL


# ----------------------------------------------------------------------
# properties
# ----------------------------------------------------------------------

slopes = st.floats(min_value=0.1, max_value=10.0)
exponents = st.floats(min_value=0.5, max_value=3.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(slopes, exponents), min_size=1, max_size=4))
def test_compositions_are_nondecreasing(parts):
    fn = compose_all([power(c, e) for c, e in parts])
    s = np.logspace(-3, 1, 60)
    values = fn(s)
    assert np.all(np.diff(values) >= -1e-12 * np.maximum(1.0, values[1:]))
    assert fn(0.0) == 0.0


@settings(max_examples=50, deadline=None)
@given(slopes, exponents, st.floats(min_value=1e-3, max_value=1e3))
def test_inverse_undoes_power(coeff, exponent, s):
    fn = power(coeff, exponent)
    assert scaled_inverse(fn)(fn(s)) == pytest.approx(s, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.05, max_value=0.95), st.floats(min_value=0.05, max_value=0.95))
def test_cycle_verdict_is_symmetric(a, b):
    forward = GainMatrix.from_entries(2, {(1, 2): linear(a), (2, 1): linear(b)})
    backward = GainMatrix.from_entries(2, {(1, 2): linear(b), (2, 1): linear(a)})
    assert check_small_gain(forward, GRID).verdict == check_small_gain(backward, GRID).verdict
