from functools import lru_cache
import logging
import math

import numpy as np
import pytest

from nudge_ns.services.cda import NudgeConfig, build_interpolant
from nudge_ns.services.errors import ConfigError
from nudge_ns.services.fem import (
	Field, Kind, assemble_convection, assemble_load, assemble_mass, assemble_stiffness, build_dofmap, interpolate,
	l2_norm,
)
from nudge_ns.services.linalg import DIRECT
from nudge_ns.services.mesh import Tag, barycentric_refine, coarse_grid, unit_square_mesh
from nudge_ns.services.metrics import (
	accumulated_h1_error, fit_geometric_decay, h1_error_vs_truth, l2_error_vs_truth, velocity_norm,
)
from nudge_ns.services.schemes import (
	Problem, SchemeConfig, SchemeKind, boundary_flux, check_nudging_guard, divergence_residual, initial_state,
	iterate, operators, proj_step1_be, proj_step2, run, weak_divergence,
)
from nudge_ns.services.truth import AnalyticSource, InMemorySource, ManufacturedSolution, manufactured_problem


ALL_KINDS = [k.value for k in SchemeKind]
FIRST_ORDER = ["coupled_be", "proj_be", "penalty_be"]


def zero_problem(space):
	return Problem(
		space=space,
		dirichlet_tags=(Tag.WALL,),
		boundary=lambda t: (lambda x, y: (0.0 * x, 0.0 * y)),
		steady_boundary=True,
	)


def test_config_validation():
	with pytest.raises(ConfigError):
		SchemeConfig(kind="proj_be", nu=1.0, dt=0.0, end_time=1.0)
	with pytest.raises(ConfigError):
		SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=0.05)
	with pytest.raises(ConfigError):
		SchemeConfig(kind="penalty_be", nu=1.0, dt=0.1, end_time=1.0, eps=0.0)
	with pytest.raises(ConfigError):
		SchemeConfig(kind="coupled_be", nu=-1.0, dt=0.1, end_time=1.0)
	with pytest.raises(ValueError):
		SchemeConfig(kind="crank_nicolson", nu=1.0, dt=0.1, end_time=1.0)


def test_num_steps():
	assert SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=0.3).num_steps == 3
	assert SchemeConfig(kind="proj_be", nu=1.0, dt=0.05, end_time=2.0).num_steps == 40
	assert SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=0.25).num_steps == 2


def test_kind_properties():
	assert SchemeKind.PROJ_BDF2.bdf2 and not SchemeKind.PROJ_BE.bdf2
	assert SchemeKind.PENALTY_BDF2.bootstrap is SchemeKind.PENALTY_BE
	assert SchemeKind.COUPLED_BE.family == "coupled"


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_zero_problem_stays_zero(space4, kind):
	cfg = SchemeConfig(kind=kind, nu=1.0, dt=0.1, end_time=0.3)
	for state in iterate(cfg, zero_problem(space4)):
		assert not state.u.coefficients.any()
		assert not state.u_tilde.coefficients.any()
		assert not state.p.coefficients.any()


def test_single_step_gives_one_row(space4):
	cfg = SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=0.1)
	series = run(cfg, manufactured_problem(space4), metrics={"u_l2": lambda s: velocity_norm(s.u)})
	assert series.times == [pytest.approx(0.1)]
	assert series.columns == ["u_l2"]
	assert series.last("u_l2") > 0.0


def test_metrics_follow_declaration_order(space4):
	cfg = SchemeConfig(kind="coupled_be", nu=1.0, dt=0.1, end_time=0.2)
	metrics = {"divergence": lambda s: s.divergence, "u_l2": lambda s: velocity_norm(s.u)}
	series = run(cfg, manufactured_problem(space4), metrics=metrics)
	assert series.columns == ["divergence", "u_l2"]
	assert len(series) == 2
	assert np.all(np.isfinite(series.column("divergence")))


def projection_config():
	return SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=0.1, tol=1e-12)


def test_projection_removes_divergence(space4, rng):
	coeffs = rng.normal(size=space4.num_velocity)
	boundary = space4.boundary_velocity_dofs()
	coeffs[boundary] = interpolate(space4, Kind.VELOCITY, lambda x, y: (y, x)).coefficients[boundary]
	u = Field(space4, Kind.VELOCITY, coeffs)
	flux = boundary_flux(u)
	assert abs(flux.sum()) < 1e-12
	u_tilde, p, report = proj_step2(u, projection_config(), flux=flux)
	assert report.converged
	assert divergence_residual(u_tilde, flux) <= 1e-9 * max(1.0, divergence_residual(u, flux))
	assert abs(p.coefficients.mean()) < 1e-10


def test_projection_is_idempotent(space4, rng):
	cfg = projection_config()
	u = Field(space4, Kind.VELOCITY, rng.normal(size=space4.num_velocity))
	once, _, _ = proj_step2(u, cfg)
	twice, _, _ = proj_step2(once, cfg)
	assert np.allclose(once.coefficients, twice.coefficients, atol=1e-8)


def test_projection_does_not_grow_l2_norm(space4, rng):
	for _ in range(5):
		u = Field(space4, Kind.VELOCITY, rng.normal(size=space4.num_velocity))
		u_tilde, _, _ = proj_step2(u, projection_config())
		assert l2_norm(u_tilde) <= l2_norm(u) * (1.0 + 1e-12)


def test_projection_keeps_solenoidal_fields(space4):
	u = Field(space4, Kind.VELOCITY, np.zeros(space4.num_velocity))
	u_tilde, p, report = proj_step2(u, projection_config())
	assert not u_tilde.coefficients.any() and not p.coefficients.any()
	assert report.iterations == 0


def test_divergence_is_normalised_by_pressure_norm(space4, rng):
	ops = operators(space4)
	stretch = interpolate(space4, Kind.VELOCITY, lambda x, y: (x, 0.0 * y))
	# div u = 1 everywhere, so (div u, q) / ||q|| peaks at q = 1 on the unit square
	assert weak_divergence(ops, ops.divergence @ stretch.coefficients) == pytest.approx(1.0, rel=1e-10)
	assert divergence_residual(stretch, boundary_flux(stretch)) == pytest.approx(1.0, rel=1e-10)
	rotation = interpolate(space4, Kind.VELOCITY, lambda x, y: (y, -x))
	assert weak_divergence(ops, ops.divergence @ rotation.coefficients) < 1e-12

	u = Field(space4, Kind.VELOCITY, rng.normal(size=space4.num_velocity))
	r = ops.divergence @ u.coefficients
	value = weak_divergence(ops, r)
	best = Field(space4, Kind.PRESSURE, ops.pressure_mass_solve(r))
	assert r @ best.coefficients / l2_norm(best) == pytest.approx(value, rel=1e-10)
	for _ in range(5):
		q = Field(space4, Kind.PRESSURE, rng.normal(size=space4.num_pressure))
		assert r @ q.coefficients / l2_norm(q) <= value * (1.0 + 1e-12)


def test_step_times_are_counted_not_summed(space4):
	cfg = SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=3.0)
	problem = zero_problem(space4)
	states = list(iterate(cfg, problem))
	assert [s.t for s in states] == [k * 0.1 for k in range(1, 31)]
	later = list(iterate(cfg, problem, initial_state(problem, t0=1.0)))
	assert [s.t for s in later] == [1.0 + k * 0.1 for k in range(1, 31)]


def steady_problem(space, nu=1.0):
	"""u = (x^2, -2xy), p = 0 solves the steady equations with a cubic forcing; u lies in P2."""

	def velocity(x, y):
		return x * x, -2.0 * x * y

	def forcing(x, y):
		return 2.0 * x ** 3 - 2.0 * nu, 2.0 * x * x * y

	return Problem(
		space=space,
		dirichlet_tags=(Tag.WALL,),
		boundary=lambda t: velocity,
		forcing=lambda t: forcing,
		initial_velocity=velocity,
		steady_boundary=True,
		name="steady",
	)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_steady_solution_is_preserved(space4, kind):
	problem = steady_problem(space4)
	cfg = SchemeConfig(kind=kind, nu=1.0, dt=0.1, end_time=0.5, tol=1e-12, linear_solver=DIRECT)
	start = initial_state(problem)
	states = list(iterate(cfg, problem, start))
	assert len(states) == 5
	for state in states:
		assert np.allclose(state.u.coefficients, start.u.coefficients, atol=1e-9)
		assert np.allclose(state.u_tilde.coefficients, start.u.coefficients, atol=1e-9)
		assert np.abs(state.p.coefficients).max() < 1e-8


def test_projection_step1_matches_direct_assembly(space4):
	problem = manufactured_problem(space4, exact_initial=True)
	cfg = SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=0.1, tol=1e-12, linear_solver=DIRECT)
	state = initial_state(problem)
	u, report = proj_step1_be(state, cfg, problem)
	assert report.converged

	solution = ManufacturedSolution(1.0)
	M = assemble_mass(space4)
	A = (M / cfg.dt + assemble_convection(state.u_tilde, space4) + assemble_stiffness(space4)).toarray()
	b = M @ state.u_tilde.coefficients / cfg.dt + assemble_load(space4, solution.forcing(0.1))
	fixed = space4.boundary_velocity_dofs()
	free = np.setdiff1d(np.arange(space4.num_velocity), fixed)
	expected = interpolate(space4, Kind.VELOCITY, solution.velocity(0.1)).coefficients
	expected[free] = np.linalg.solve(A[np.ix_(free, free)], b[free] - A[np.ix_(free, fixed)] @ expected[fixed])
	assert np.allclose(u.coefficients, expected, atol=1e-10 * np.abs(expected).max())


@pytest.mark.parametrize("kind", FIRST_ORDER)
def test_nudging_towards_own_trajectory_changes_nothing(space4, kind):
	problem = manufactured_problem(space4)
	cfg = SchemeConfig(kind=kind, nu=1.0, dt=0.05, end_time=0.2, tol=1e-12, linear_solver=DIRECT)
	start = initial_state(problem)
	truth = InMemorySource(space4, cfg.dt, [start.u.coefficients])
	plain = list(iterate(cfg, problem, start))
	for state in plain:
		truth.record(state)

	itp = build_interpolant(space4, coarse_grid(space4.mesh, 2))
	nudged_cfg = SchemeConfig(kind=kind, nu=1.0, dt=0.05, end_time=0.2, tol=1e-12, linear_solver=DIRECT,
		nudge=NudgeConfig(mu=1e3, interpolant=itp, source=truth))
	nudged = list(iterate(nudged_cfg, problem, start))
	assert len(nudged) == len(plain) == 4
	for a, b in zip(plain, nudged):
		scale = np.abs(a.u.coefficients).max()
		assert np.allclose(a.u.coefficients, b.u.coefficients, atol=1e-7 * scale)


@pytest.mark.parametrize("family", ["coupled", "proj", "penalty"])
def test_bdf2_starts_with_first_order_step(space4, family):
	problem = manufactured_problem(space4, exact_initial=True)
	be = SchemeConfig(kind=f"{family}_be", nu=1.0, dt=0.1, end_time=0.1, linear_solver=DIRECT)
	bdf2 = SchemeConfig(kind=f"{family}_bdf2", nu=1.0, dt=0.1, end_time=0.1, linear_solver=DIRECT)
	(first_be,) = list(iterate(be, problem))
	(first_bdf2,) = list(iterate(bdf2, problem))
	assert np.array_equal(first_be.u.coefficients, first_bdf2.u.coefficients)
	assert np.array_equal(first_be.p.coefficients, first_bdf2.p.coefficients)


def test_bdf2_steps_track_history(space4):
	cfg = SchemeConfig(kind="proj_bdf2", nu=1.0, dt=0.1, end_time=0.3)
	states = list(iterate(cfg, manufactured_problem(space4, exact_initial=True)))
	assert [s.n for s in states] == [1, 2, 3]
	assert states[2].u_prev is states[1].u


def test_guard_warning(space4, caplog):
	itp = build_interpolant(space4, coarse_grid(space4.mesh, 4))
	cfg = SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=0.1,
		nudge=NudgeConfig(mu=1e5, interpolant=itp, source=AnalyticSource(space4)))
	with caplog.at_level(logging.WARNING, logger="nudge_ns.services.schemes"):
		c_i = check_nudging_guard(cfg, samples=10)
	assert c_i > 0.0
	assert any("exceeds" in r.getMessage() for r in caplog.records)


def test_guard_silent_without_nudging(space4, caplog):
	cfg = SchemeConfig(kind="proj_be", nu=1.0, dt=0.1, end_time=0.1)
	with caplog.at_level(logging.WARNING):
		assert check_nudging_guard(cfg) is None
	assert not caplog.records


@lru_cache(maxsize=None)
def manufactured_run(kind, n, dt, end_time, mu=0.0, coarse=4, exact_initial=True, eps=1.0, refine=False,
					 tol=1e-10):
	"""Cached run of the manufactured flow with per-step L2 and H1 errors against the closed form."""
	mesh = unit_square_mesh(n)
	space = build_dofmap(barycentric_refine(mesh) if refine else mesh)
	source = AnalyticSource(space)
	nudge = None
	if mu > 0.0:
		nudge = NudgeConfig(mu=mu, interpolant=build_interpolant(space, coarse_grid(space.mesh, coarse)), source=source)
	cfg = SchemeConfig(kind=kind, nu=1.0, dt=dt, end_time=end_time, eps=eps, nudge=nudge, tol=tol,
					   linear_solver=DIRECT)
	problem = manufactured_problem(space, exact_initial=exact_initial)
	return run(cfg, problem, metrics={
		"l2": lambda s: l2_error_vs_truth(s.u, source, s.t),
		"h1": lambda s: h1_error_vs_truth(s.u, source, s.t),
	})


def final_error(kind, n, dt, end_time, **kwargs):
	return manufactured_run(kind, n, dt, end_time, **kwargs).last("l2")


def pressure_gradient_norm(t):
	# grad p = (1 + t)(1, -1) over the unit square
	return (1.0 + t) * math.sqrt(2.0)


@pytest.mark.slow
def test_coupled_be_first_order_in_time():
	coarse = final_error("coupled_be", 16, 0.1, 0.4)
	fine = final_error("coupled_be", 16, 0.05, 0.4)
	assert 1.6 <= coarse / fine <= 2.4


@pytest.mark.slow
def test_nudging_reduces_projection_error():
	plain = final_error("proj_be", 16, 0.05, 1.0)
	nudged = final_error("proj_be", 16, 0.05, 1.0, mu=1e3, coarse=8)
	assert nudged < plain


STRONG_DTS = (0.05, 0.025, 0.0125)


def strong_nudging_run(kind, dt):
	"""From rest with mu = dt^-2 on h = 1/64, H = 1/32 up to T = 2."""
	return manufactured_run(kind, 64, dt, 2.0, mu=dt ** -2, coarse=32, exact_initial=False)


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["proj_be", "penalty_be"])
def test_strong_nudging_converges_at_least_first_order(kind):
	runs = [strong_nudging_run(kind, dt) for dt in STRONG_DTS]
	errors = [r.last("l2") for r in runs]
	for coarse, fine in zip(errors, errors[1:]):
		assert coarse / fine >= 1.6
	# first-order bound with the constant of the coarsest run
	for dt, err in zip(STRONG_DTS, errors):
		assert err <= errors[0] * dt / STRONG_DTS[0] * 1.0001

	# what is left is the pressure gradient the splitting drops, damped by the nudging
	grad_p = pressure_gradient_norm(2.0)
	for dt, err in zip(STRONG_DTS, errors):
		mu = dt ** -2
		predicted = grad_p * dt / (1.0 + mu * dt) if kind == "proj_be" else grad_p / mu
		assert 0.5 <= err / predicted <= 1.5

	h1 = [accumulated_h1_error(r.column("h1"), dt) for r, dt in zip(runs, STRONG_DTS)]
	for coarse, fine in zip(h1, h1[1:]):
		assert coarse / fine >= 1.6


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["proj_be", "penalty_be"])
def test_strong_nudging_error_settles_geometrically(kind):
	for dt in STRONG_DTS:
		squared = strong_nudging_run(kind, dt).column("l2") ** 2
		alpha, floor = fit_geometric_decay(squared)
		assert alpha > 1.0
		assert floor <= dt ** 2


MU_SWEEP = (0.0, 10.0, 1e3, 1e5)


def sweep_error(kind, mu):
	return final_error(kind, 64, 0.05, 2.0, mu=mu, coarse=32, exact_initial=False)


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["proj_be", "penalty_be"])
def test_error_falls_with_mu(kind):
	errors = [sweep_error(kind, mu) for mu in MU_SWEEP]
	assert all(a > b for a, b in zip(errors, errors[1:]))
	coupled = sweep_error("coupled_be", 0.0)
	assert errors[-1] <= 2.0 * coupled


@pytest.mark.slow
def test_penalty_error_plateaus_at_eps_level():
	# without nudging the eps = 1 consistency error swamps the time error
	assert sweep_error("penalty_be", 0.0) >= 5.0 * sweep_error("penalty_be", 1e5)
	coarse = final_error("penalty_be", 16, 0.05, 1.0)
	fine = final_error("penalty_be", 16, 0.025, 1.0)
	assert abs(coarse / fine - 1.0) < 0.1
	smaller_eps = final_error("penalty_be", 16, 0.05, 1.0, eps=0.1)
	assert coarse / smaller_eps >= 3.0


BDF2_DTS = (0.2, 0.1, 0.05)


@pytest.mark.slow
@pytest.mark.parametrize("kind, options, lowest", [
	("coupled_bdf2", {"n": 32}, 3.2),
	("proj_bdf2", {"n": 32}, 2.8),
	# small eps on a barycentric refinement, where P2 has enough divergence-free fields
	("penalty_bdf2", {"n": 32, "refine": True, "eps": 1e-6, "tol": 1e-7}, 3.2),
])
def test_bdf2_second_order_in_time(kind, options, lowest):
	options = dict(options)
	n = options.pop("n")
	errors = [final_error(kind, n, dt, 1.0, **options) for dt in BDF2_DTS]
	for coarse, fine in zip(errors, errors[1:]):
		assert lowest <= coarse / fine <= 4.8
