import logging

import numpy as np
import pytest

from npdenoise import data


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("npdenoise").setLevel(logging.ERROR)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_planes(gen, n):
    normals = gen.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, gen.uniform(-1, 1, n)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    params = data.BuildParams(n_points=128, sigma=0.01, seed=3, holdout=2)
    return data.build_dataset(data.analytic_corpus(6, seed=3), out, params)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
