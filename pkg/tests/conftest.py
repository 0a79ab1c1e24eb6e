import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from foliated_paths.model_geometry import build_model  # noqa: E402

BUILTINS = [
    ("heisenberg", {"n": 1}),
    ("heisenberg", {"n": 2}),
    ("su2_hopf", None),
    ("flat_product", {"n": 2, "m": 1}),
]


@pytest.fixture(scope="session")
def heis():
    return build_model("heisenberg", {"n": 1})


@pytest.fixture(scope="session")
def su2():
    return build_model("su2_hopf")


@pytest.fixture(scope="session")
def flat():
    return build_model("flat_product", {"n": 2, "m": 1})


@pytest.fixture(scope="session")
def demo_dir():
    return os.path.join(os.path.dirname(os.path.dirname(__file__)), "demos", "configs")
