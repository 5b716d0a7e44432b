import numpy as np
import pytest

from spopf.case_model import build_quadratic_model, load_case, parse_case
from spopf.cli import DATA_DIR, run_solve
from spopf.scenario import build_problem, load_scenario

TWO_BUS = """
function mpc = two_bus
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0   0   0  0  1  1.0  0  345  1  1.1  0.9;
    2  1  50  20  0  0  1  1.0  0  345  1  1.05 0.95;
];
mpc.gen = [
    1  0  0  300  -300  1.02  100  1  250  10;
];
mpc.branch = [
    1  2  0.01  0.1  0.02  250  250  250  0  0  1  -360  360;
];
"""


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


@pytest.fixture(scope="session")
def case9():
    return load_case(DATA_DIR / "case9.m")


@pytest.fixture(scope="session")
def model9(case9):
    return build_quadratic_model(case9)


@pytest.fixture(scope="session")
def two_bus():
    return parse_case(TWO_BUS)


@pytest.fixture(scope="session")
def variant1_scenario():
    return load_scenario(DATA_DIR / "case9_variant1.json")


@pytest.fixture(scope="session")
def variant2_scenario():
    return load_scenario(DATA_DIR / "case9_variant2.json")


@pytest.fixture(scope="session")
def variant1_problem(variant1_scenario):
    return build_problem(variant1_scenario)


@pytest.fixture(scope="session")
def variant1_run(variant1_scenario, tmp_path_factory):
    out = tmp_path_factory.mktemp("variant1")
    report, code = run_solve(variant1_scenario, out, threads=1, trace=True)
    return report, code, out


@pytest.fixture(scope="session")
def variant2_run(variant2_scenario, tmp_path_factory):
    out = tmp_path_factory.mktemp("variant2")
    report, code = run_solve(variant2_scenario, out, threads=1)
    return report, code, out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
