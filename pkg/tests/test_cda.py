import math

import numpy as np
import pytest

from nudge_ns.services.cda import (
	Mode, NudgeConfig, build_interpolant, estimate_stability_constant, guard_violated,
	interpolation_error_ratio, nudging_matrix, nudging_rhs,
)
from nudge_ns.services.errors import ConfigError, InterpolantError, TruthCoverageError
from nudge_ns.services.fem import Field, Kind, build_dofmap, interpolate
from nudge_ns.services.mesh import coarse_grid, rectangle_mesh, unit_square_mesh


def smooth(x, y):
	return np.sin(np.pi * x) * np.sin(np.pi * y), np.cos(np.pi * x) * y


def smooth_gradient(x, y):
	return (
		(np.pi * np.cos(np.pi * x) * np.sin(np.pi * y), np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)),
		(-np.pi * np.sin(np.pi * x) * y, np.cos(np.pi * x)),
	)


@pytest.fixture(scope="module")
def fine16():
	return build_dofmap(unit_square_mesh(16))


@pytest.mark.parametrize("mode", [Mode.AVERAGE, Mode.NODAL])
def test_constants_are_reproduced(space8, mode):
	itp = build_interpolant(space8, coarse_grid(space8.mesh, 2), mode)
	assert itp.error(lambda x, y: (2.0 + 0.0 * x, -1.0 + 0.0 * y)) < 1e-12
	u = interpolate(space8, Kind.VELOCITY, lambda x, y: (2.0 + 0.0 * x, -1.0 + 0.0 * y))
	coarse = itp.restrict(u)
	assert np.allclose(coarse[:, 0], 2.0) and np.allclose(coarse[:, 1], -1.0)


def test_nodal_mode_reproduces_linear_fields(space8):
	itp = build_interpolant(space8, coarse_grid(space8.mesh, 4), Mode.NODAL)
	assert itp.error(lambda x, y: (x + 2.0 * y, 1.0 - y)) < 1e-12


def test_average_mode_box_means(space8):
	itp = build_interpolant(space8, coarse_grid(space8.mesh, 2), Mode.AVERAGE)
	means = itp.restrict_function(lambda x, y: (x, y))
	assert np.allclose(means[:, 0], [0.25, 0.75, 0.25, 0.75])
	assert np.allclose(means[:, 1], [0.25, 0.25, 0.75, 0.75])


def test_stability_constant_battery(fine16):
	itp = build_interpolant(fine16, coarse_grid(fine16.mesh, 4), Mode.AVERAGE)
	c_i = estimate_stability_constant(itp)
	assert 0.5 < c_i <= 1.05
	assert estimate_stability_constant(itp) == c_i


def test_first_order_approximation(fine16):
	errors = []
	for n in (4, 8):
		itp = build_interpolant(fine16, coarse_grid(fine16.mesh, n), Mode.AVERAGE)
		errors.append(itp.error(smooth))
		assert interpolation_error_ratio(itp, smooth, smooth_gradient) < 1.0
	assert 1.7 <= errors[0] / errors[1] <= 2.3


def test_nudging_matrix_properties(space8, rng):
	itp = build_interpolant(space8, coarse_grid(space8.mesh, 4), Mode.AVERAGE)
	J = nudging_matrix(itp, space8)
	assert abs(J - J.T).max() < 1e-14
	for _ in range(10):
		v = rng.normal(size=space8.num_velocity)
		assert v @ J @ v >= -1e-12
	u = Field(space8, Kind.VELOCITY, rng.normal(size=space8.num_velocity))
	assert np.allclose(J @ u.coefficients, nudging_rhs(itp, u, space8), atol=1e-14)


def test_nudging_rhs_from_coarse_samples(space8):
	itp = build_interpolant(space8, coarse_grid(space8.mesh, 2), Mode.AVERAGE)
	w = interpolate(space8, Kind.VELOCITY, smooth)
	from_field = nudging_rhs(itp, w, space8)
	from_samples = nudging_rhs(itp, itp.restrict(w), space8)
	assert np.allclose(from_field, from_samples, atol=1e-13)


def test_missing_truth_sample(space8):
	itp = build_interpolant(space8, coarse_grid(space8.mesh, 2))
	with pytest.raises(TruthCoverageError):
		nudging_rhs(itp, None, space8)


def test_fine_dofs_outside_coarse_grid():
	fine = build_dofmap(rectangle_mesh(0.0, 2.0, 0.0, 1.0, 4, 2))
	grid = coarse_grid(unit_square_mesh(2), 2)
	with pytest.raises(InterpolantError):
		build_interpolant(fine, grid)


def test_guard():
	assert not guard_violated(0.0, 1.0, 0.5, 1.0)
	assert guard_violated(1e5, 1.0, 1.0 / 32, 1.0)
	assert not guard_violated(10.0, 1.0, math.sqrt(2) / 32, 1.0)


def test_nudge_config_rejects_negative_mu(space8):
	itp = build_interpolant(space8, coarse_grid(space8.mesh, 2))
	with pytest.raises(ConfigError):
		NudgeConfig(mu=-1.0, interpolant=itp, source=None)
	assert not NudgeConfig(mu=0.0, interpolant=itp, source=None).active
