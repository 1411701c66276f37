import numpy as np
import pytest

from nudge_ns.services.fem import build_dofmap
from nudge_ns.services.mesh import Mesh, Tag, unit_square_mesh


def pytest_addoption(parser):
	parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance checks")


def pytest_collection_modifyitems(config, items):
	if config.getoption("--runslow"):
		return
	skip = pytest.mark.skip(reason="slow: pass --runslow to run")
	for item in items:
		if "slow" in item.keywords:
			item.add_marker(skip)


@pytest.fixture
def rng():
	return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def reference_triangle():
	return Mesh(
		np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
		np.array([[0, 1, 2]]),
		np.array([[0, 1], [1, 2], [2, 0]]),
		(Tag.WALL, Tag.WALL, Tag.WALL),
	).validate()


@pytest.fixture(scope="session")
def two_cells():
	return unit_square_mesh(1)


@pytest.fixture(scope="session")
def square4():
	return unit_square_mesh(4)


@pytest.fixture(scope="session")
def space4(square4):
	return build_dofmap(square4)


@pytest.fixture(scope="session")
def square8():
	return unit_square_mesh(8)


@pytest.fixture(scope="session")
def space8(square8):
	return build_dofmap(square8)
