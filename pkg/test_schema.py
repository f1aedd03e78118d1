import numpy as np
import pytest

from vrclf import schema
from vrclf.errors import SchemaError
from vrclf.reaction_network import autocatalytic_scaled


def test_malformed_document_reports_position():
    with pytest.raises(SchemaError) as info:
        schema.loads('{\n  "k": 1,\n  "entries": [[\n}')
    assert info.value.line == 4
    assert info.value.to_dict()["line"] == 4


def test_newer_schema_version_rejected():
    with pytest.raises(SchemaError):
        schema.loads('{"schema_version": 2, "k": 1}')


def test_top_level_must_be_object():
    with pytest.raises(SchemaError):
        schema.loads("[1, 2]")


def test_dumps_stamps_version():
    assert schema.loads(schema.dumps({"x": np.arange(2)})) == {"schema_version": 1, "x": [0, 1]}


def test_gain_matrix_fields_required():
    with pytest.raises(SchemaError):
        schema.read_gains({"k": 2})


def test_constraints_default_to_full_line():
    constraints, control_set = schema.read_constraints({"constraints": [{"f": -1, "g": 2, "label": "V1"}]})
    assert constraints[0].label == "V1"
    assert control_set.case.value == "P1"


def test_bad_constraint_value():
    with pytest.raises(SchemaError):
        schema.read_constraints({"constraints": [{"f": "NaN", "g": 1}]})


def test_read_problem(scalar_problem):
    problem = schema.read_problem(scalar_problem)
    assert problem.system.n == 1
    assert problem.spec.degenerate
    assert problem.horizon == 5.0
    assert len(problem.initial_states) == 5
    assert problem.sampler(0).draw(3).shape == (3, 1)


def test_problem_fields_required(scalar_problem):
    del scalar_problem["gains"]
    with pytest.raises(SchemaError):
        schema.read_problem(scalar_problem)


def test_problem_with_unknown_variable(scalar_problem):
    scalar_problem["f"] = [["-", "y"]]
    with pytest.raises(SchemaError):
        schema.read_problem(scalar_problem)


def test_problem_with_disturbance(scalar_problem):
    scalar_problem.update({
        "f": [["+", ["-", "x"], ["*", 0.1, "d"]]],
        "disturbance_vars": ["d"],
        "D": {"lower": [-1.0], "upper": [1.0]},
    })
    problem = schema.read_problem(scalar_problem)
    assert problem.system.D.dim == 1
    assert problem.system.exact_max


def test_network_roundtrip():
    net, cons = autocatalytic_scaled(1.0, 0.5, 10.0)
    again, again_cons = schema.read_network(schema.write_network(net, cons))
    c = np.array([0.3, 1.7])
    np.testing.assert_allclose(again.rhs(c, 2.0), net.rhs(c, 2.0))
    assert (again_cons.b, again_cons.R) == (cons.b, cons.R)
    np.testing.assert_allclose(again_cons.pairs[0].p, cons.pairs[0].p)


def test_network_fields_required():
    with pytest.raises(SchemaError):
        schema.read_network({"S": [[-1], [1]], "rates": []})


def test_report_kinds():
    report = schema.write_report("verify", {"passed": True})
    assert schema.read_report(report)["kind"] == "verify"
    with pytest.raises(SchemaError):
        schema.write_report("example", {})
