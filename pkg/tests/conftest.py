import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from predsearch.bench import load_tabular, write_synthetic_nb201
from predsearch.space import build_anynet_space, build_nb201_space

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def anynet():
    return build_anynet_space()


@pytest.fixture(scope="session")
def nb201():
    return build_nb201_space()


@pytest.fixture(scope="session")
def nb201_table(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "nb201_synthetic.csv"
    write_synthetic_nb201(path, seed=0)
    return path


@pytest.fixture(scope="session")
def nb201_oracle(nb201_table, nb201):
    return load_tabular(nb201_table, nb201)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance ledger: one line per criterion in the terminal summary ----------------

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    def record(cid, ok, detail):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        line = f"criterion {cid}: {status}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
