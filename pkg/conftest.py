import json

import pytest

from vrclf.corollary_lab import cascade_instance
from vrclf.reaction_network import autocatalytic_instance, autocatalytic_target


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long sampling or simulation runs")


@pytest.fixture(scope="session")
def cascade():
    """(system, config) of the cascade with lam = sigma = 0.5 and gamma = identity"""
    return cascade_instance(0.5, 0.5)


@pytest.fixture(scope="session")
def reactor():
    """Normalized autocatalytic reactor with theta = 1, mu = 0.5 and D_max = 10"""
    return autocatalytic_instance(theta=1.0, mu=0.5, D_max=10.0)


@pytest.fixture(scope="session")
def bistable():
    """Reactor k = 1, c_f = (3.95, 0.05) normalized at its middle equilibrium; D = 1 has two stable roots"""
    return autocatalytic_target(1.0, (3.95, 0.05), 1)


@pytest.fixture
def scalar_problem():
    """x' = -x with V = x^2/2 and rho(s) = s; the input never enters"""
    return {
        "name": "scalar decay",
        "state_vars": ["x"],
        "f": [["-", "x"]],
        "g": [0],
        "V": [["*", 0.5, ["pow", "x", 2]]],
        "eta": -1,
        "W": 1,
        "delta": 1,
        "K": 1,
        "rho": "s",
        "epsilon": -1,
        "gains": {"k": 1, "entries": [[{"kind": "zero"}]]},
        "local_feedback": [0.0],
        "r": 0.5,
        "sampler": {"lower": [-2.0], "upper": [2.0]},
        "initial_states": [[1.0], [-1.5], [0.8], [2.0], [-0.6]],
        "horizon": 5.0,
    }


@pytest.fixture
def write_json(tmp_path):
    def write(name, data):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)
    return write
