import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spnmkl.kernels import KernelSpec
from spnmkl.spn_graph import enumerate_paths, nested_demo_document, spn_from_dict

ROOT = Path(__file__).resolve().parents[1]


def demo_specs():
    return [
        KernelSpec("K1", "linear"),
        KernelSpec("K2", "rbf", gamma=0.5),
        KernelSpec("K3", "rbf", gamma=1.0),
        KernelSpec("K4", "polynomial", degree=2, coef=1.0),
        KernelSpec("K5", "rbf", gamma=0.1),
        KernelSpec("K6", "rbf", gamma=2.0),
        KernelSpec("K7", "linear"),
    ]


@pytest.fixture
def nested_doc():
    return nested_demo_document()


@pytest.fixture
def nested_graph(nested_doc):
    return spn_from_dict(nested_doc)


@pytest.fixture
def nested_table(nested_graph):
    return enumerate_paths(nested_graph)


@pytest.fixture
def specs():
    return demo_specs()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
