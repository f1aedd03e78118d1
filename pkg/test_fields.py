import numpy as np
import pytest

from vrclf.errors import DomainError, NonFiniteError, SchemaError
from vrclf.fields import ScalarField, Univariate, as_univariate, parse_tree
from vrclf.gain_calculus import linear

XS = ["x1", "x2"]


def test_parse_and_evaluate():
    field = ScalarField.parse(["+", ["*", 2, "x1"], ["pow", "x2", 2]], XS)
    assert field.value(np.array([1.0, 3.0])) == pytest.approx(11.0)
    np.testing.assert_allclose(field.gradient(np.array([1.0, 3.0])), [2.0, 6.0])


def test_batch_evaluation():
    field = ScalarField.parse(["*", "x1", "x2"], XS)
    X = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 5.0]])
    np.testing.assert_allclose(field.value(X), [2.0, 12.0, 0.0])
    np.testing.assert_allclose(field.gradient(X), [[2.0, 1.0], [4.0, 3.0], [5.0, 0.0]])


def test_constant_field_broadcasts():
    field = ScalarField.constant(-1.0, XS)
    assert field.is_constant
    np.testing.assert_allclose(field.value(np.zeros((4, 2))), -np.ones(4))
    np.testing.assert_allclose(field.gradient(np.ones(2)), [0.0, 0.0])


def test_symbolic_gradient_matches_central_differences():
    field = ScalarField.parse(["+", ["exp", ["-", "x1"]], ["*", "x1", ["pow", "x2", 3]]], XS)
    x = np.array([0.3, -1.2])
    np.testing.assert_allclose(field.gradient(x), field.central_gradient(x), rtol=1e-6)


def test_central_gradient_mode():
    field = ScalarField(ScalarField.parse(["pow", "x1", 2], XS).expr, XS, gradient_mode="central")
    np.testing.assert_allclose(field.gradient(np.array([2.0, 0.0])), [4.0, 0.0], rtol=1e-6)


def test_bad_gradient_mode():
    with pytest.raises(DomainError):
        ScalarField(ScalarField.parse("x1", XS).expr, XS, gradient_mode="forward")


def test_quadratic_component():
    V2 = ScalarField.quadratic(1, XS)
    assert V2.value(np.array([5.0, 3.0])) == pytest.approx(4.5)
    assert V2.name == "V2"


def test_unknown_variable():
    with pytest.raises(SchemaError):
        ScalarField.parse(["+", "x1", "y"], XS)


def test_unknown_operator():
    with pytest.raises(SchemaError):
        parse_tree(["sinh", "x1"], {})


def test_wrong_arity():
    with pytest.raises(SchemaError):
        ScalarField.parse(["/", "x1"], XS)


def test_wrong_dimension():
    field = ScalarField.parse("x1", XS)
    with pytest.raises(DomainError):
        field.value(np.zeros(3))


def test_non_finite_value():
    field = ScalarField.parse(["ln", "x1"], XS)
    with pytest.raises(NonFiniteError):
        field.value(np.array([-1.0, 0.0]))


def test_near_kink():
    field = ScalarField.parse(["abs", "x1"], XS)
    assert field.near_kink(np.array([1e-8, 1.0]))
    assert not field.near_kink(np.array([0.5, 1.0]))


def test_disturbance_field_needs_value():
    field = ScalarField.parse(["+", "x1", "d"], XS, ["d"])
    assert field.value(np.array([1.0, 0.0]), np.array([0.5])) == pytest.approx(1.5)
    with pytest.raises(DomainError):
        field.value(np.array([1.0, 0.0]))


def test_subs_fixes_a_variable():
    field = ScalarField.parse(["*", "x1", "x2"], XS).subs({"x2": 3.0})
    assert field.value(np.array([2.0, 100.0])) == pytest.approx(6.0)


def test_tree_roundtrip():
    field = ScalarField.parse(["max", ["-", "x1", 1], ["*", 0.5, "x2"]], XS)
    again = ScalarField.parse(field.to_tree(), XS)
    x = np.array([[3.0, 1.0], [0.0, 4.0]])
    np.testing.assert_allclose(again.value(x), field.value(x))


def test_univariate_tree():
    fn = Univariate(["*", 2, "s"], "rho")
    assert fn(3.0) == pytest.approx(6.0)
    np.testing.assert_allclose(fn(np.array([0.0, 1.0])), [0.0, 2.0])


def test_univariate_constant_broadcasts():
    fn = Univariate(0.25)
    np.testing.assert_allclose(fn(np.array([1.0, -1.0, 0.0])), [0.25, 0.25, 0.25])


def test_univariate_callable():
    fn = Univariate(lambda s: np.minimum(s, 1.0))
    assert fn(5.0) == 1.0
    with pytest.raises(SchemaError):
        fn.to_tree()


def test_univariate_rejects_other_variables():
    with pytest.raises(SchemaError):
        Univariate(["+", "s", "x"])


def test_as_univariate_passes_gains_through():
    gain = linear(2.0)
    assert as_univariate(gain) is gain
    assert isinstance(as_univariate(1.0), Univariate)
