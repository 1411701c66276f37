from __future__ import annotations
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, Iterator, Mapping, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator

from .cda import NudgeConfig, estimate_stability_constant, guard_violated, nudging_matrix, nudging_rhs
from .errors import ConfigError, SolverError
from .fem import (
	DirichletBC, DofMap, Field, Kind, apply_dirichlet, assemble_convection, assemble_convection_skew,
	assemble_divergence, assemble_graddiv, assemble_load, assemble_mass, assemble_pressure_gradient,
	assemble_stiffness, boundary_condition, interpolate, zeros,
)
from .linalg import KRYLOV, SolveReport, factorize, solve_nonsymmetric, solve_saddle, solve_spd
from .mesh import Tag
from .metrics import TimeSeries


logger = logging.getLogger(__name__)

VectorFunction = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


class SchemeKind(str, Enum):
	COUPLED_BE = "coupled_be"
	COUPLED_BDF2 = "coupled_bdf2"
	PROJ_BE = "proj_be"
	PROJ_BDF2 = "proj_bdf2"
	PENALTY_BE = "penalty_be"
	PENALTY_BDF2 = "penalty_bdf2"

	@property
	def bdf2(self) -> bool:
		return self.value.endswith("bdf2")

	@property
	def family(self) -> str:
		return self.value.split("_")[0]

	@property
	def bootstrap(self) -> "SchemeKind":
		"""First-order scheme of the same family, used for the first BDF2 step."""
		return SchemeKind(self.value.replace("bdf2", "be"))


@dataclass(frozen=True)
class SchemeConfig:
	kind: SchemeKind
	nu: float
	dt: float
	end_time: float
	eps: float = 1.0
	nudge: Optional[NudgeConfig] = None
	tol: float = 1e-10
	maxit: int = 2000
	linear_solver: str = KRYLOV

	def __post_init__(self) -> None:
		object.__setattr__(self, "kind", SchemeKind(self.kind))
		if not self.dt > 0.0:
			raise ConfigError(f"dt must be positive, got {self.dt}")
		if not self.nu > 0.0:
			raise ConfigError(f"nu must be positive, got {self.nu}")
		if self.end_time < self.dt * (1.0 - 1e-9):
			raise ConfigError(f"end_time={self.end_time} is shorter than one step dt={self.dt}")
		if not self.eps > 0.0:
			raise ConfigError(f"eps must be positive, got {self.eps}")
		if not self.tol > 0.0:
			raise ConfigError(f"tol must be positive, got {self.tol}")

	@property
	def num_steps(self) -> int:
		return int(math.floor(self.end_time / self.dt + 1e-9))

	@property
	def mu(self) -> float:
		return self.nudge.mu if self.nudge is not None else 0.0


@dataclass
class Problem:
	"""Data of one flow: forcing f(t), Dirichlet velocity g(t) on the given tags, initial data."""

	space: DofMap
	dirichlet_tags: Tuple[Tag, ...]
	boundary: Callable[[float], VectorFunction]
	forcing: Optional[Callable[[float], VectorFunction]] = None
	initial_velocity: Optional[VectorFunction] = None
	initial_pressure: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
	steady_boundary: bool = False
	name: str = "flow"


@dataclass
class State:
	n: int
	t: float
	u: Field
	u_tilde: Field
	p: Field
	u_prev: Optional[Field] = None
	u_tilde_prev: Optional[Field] = None
	report: Optional[SolveReport] = None
	divergence: float = 0.0
	start: float = 0.0

	def time_at(self, n: int, dt: float) -> float:
		"""Time level n counted from the start of the run, never a running sum of dt."""
		return self.start + n * dt


@dataclass(eq=False)
class Operators:
	"""Time-independent matrices of one discrete space."""

	space: DofMap
	mass: sparse.csr_matrix
	stiffness: sparse.csr_matrix
	divergence: sparse.csr_matrix
	gradient: sparse.csr_matrix
	graddiv: sparse.csr_matrix
	pressure_mass: sparse.csr_matrix
	pressure_stiffness: sparse.csr_matrix
	_mass_solve: Optional[Callable] = field(default=None, repr=False)
	_pressure_mass_solve: Optional[Callable] = field(default=None, repr=False)
	_pressure_precond: Optional[Callable] = field(default=None, repr=False)
	_nudging: Dict[int, sparse.csr_matrix] = field(default_factory=dict, repr=False)
	_bcs: Dict[Tuple, DirichletBC] = field(default_factory=dict, repr=False)

	def mass_solve(self, rhs: np.ndarray) -> np.ndarray:
		if self._mass_solve is None:
			self._mass_solve = factorize(self.mass)
		return self._mass_solve(rhs)

	def pressure_mass_solve(self, rhs: np.ndarray) -> np.ndarray:
		if self._pressure_mass_solve is None:
			self._pressure_mass_solve = factorize(self.pressure_mass)
		return self._pressure_mass_solve(rhs)

	def pressure_preconditioner(self) -> Callable:
		if self._pressure_precond is None:
			shift = 1e-8 * abs(self.pressure_stiffness.diagonal()).max() / abs(self.pressure_mass.diagonal()).max()
			self._pressure_precond = factorize(self.pressure_stiffness + shift * self.pressure_mass)
		return self._pressure_precond

	def nudging(self, nudge: NudgeConfig) -> sparse.csr_matrix:
		key = id(nudge.interpolant)
		if key not in self._nudging:
			self._nudging[key] = nudging_matrix(nudge.interpolant, self.space)
		return self._nudging[key]


@lru_cache(maxsize=8)
def operators(space: DofMap) -> Operators:
	logger.debug("assembling operators for %d velocity / %d pressure dofs", space.num_velocity, space.num_pressure)
	return Operators(
		space=space,
		mass=assemble_mass(space, Kind.VELOCITY),
		stiffness=assemble_stiffness(space, Kind.VELOCITY),
		divergence=assemble_divergence(space),
		gradient=assemble_pressure_gradient(space),
		graddiv=assemble_graddiv(space),
		pressure_mass=assemble_mass(space, Kind.PRESSURE),
		pressure_stiffness=assemble_stiffness(space, Kind.PRESSURE),
	)


def weak_divergence(ops: Operators, residual: np.ndarray) -> float:
	"""max over pressure functions q of r(q) / ||q||, i.e. sqrt(r^T Mp^-1 r) for r_q = (div u, q)."""
	residual = np.asarray(residual, dtype=float)
	return float(np.sqrt(max(residual @ ops.pressure_mass_solve(residual), 0.0)))


# shared pieces of every step

def _bcs(problem: Problem, ops: Operators, t: float) -> DirichletBC:
	key = ("steady",) if problem.steady_boundary else ("t", t)
	if key in ops._bcs:
		return ops._bcs[key]
	bc = boundary_condition(problem.space, problem.dirichlet_tags, problem.boundary(t))
	if problem.steady_boundary:
		ops._bcs[key] = bc
	return bc


def _load(problem: Problem, t: float) -> np.ndarray:
	if problem.forcing is None:
		return np.zeros(problem.space.num_velocity)
	return assemble_load(problem.space, problem.forcing(t))


def _add_nudging(A: sparse.spmatrix, rhs: np.ndarray, cfg: SchemeConfig, ops: Operators, t: float):
	"""Implicit mu (I_H u, v) on the left and mu (I_H w, v) on the right; skipped entirely when mu = 0."""
	nudge = cfg.nudge
	if nudge is None or not nudge.active:
		return A, rhs
	w = nudge.source.sample(t)
	J = ops.nudging(nudge)
	return A + nudge.mu * J, rhs + nudge.mu * nudging_rhs(nudge.interpolant, w, ops.space)


def _solve_velocity(A, rhs, bc: DirichletBC, cfg: SchemeConfig, step: int, t: float) -> Tuple[np.ndarray, SolveReport]:
	A_bc, rhs_bc = apply_dirichlet(A, rhs, bc)
	x, report = solve_nonsymmetric(A_bc, rhs_bc, tol=cfg.tol, maxit=cfg.maxit, method=cfg.linear_solver)
	if not report.converged:
		raise SolverError(f"velocity solve failed: {report}", report=report, step=step, time=t)
	x[bc.dofs] = bc.values
	return x, report


def _velocity(space: DofMap, coeffs: np.ndarray) -> Field:
	return Field(space, Kind.VELOCITY, coeffs)


def _pressure(space: DofMap, coeffs: np.ndarray) -> Field:
	return Field(space, Kind.PRESSURE, coeffs)


def _time_derivative(cfg: SchemeConfig, ops: Operators, current: Field, previous: Optional[Field], bdf2: bool):
	"""Left-hand mass scaling and right-hand history of BE or BDF2."""
	if bdf2:
		return 1.5 / cfg.dt, ops.mass @ (4.0 * current.coefficients - previous.coefficients) / (2.0 * cfg.dt)
	return 1.0 / cfg.dt, ops.mass @ current.coefficients / cfg.dt


def _advector(current: Field, previous: Optional[Field], bdf2: bool) -> Field:
	if bdf2:
		return 2.0 * current - previous
	return current


# coupled

def _coupled_step(state: State, cfg: SchemeConfig, problem: Problem, bdf2: bool) -> State:
	ops = operators(problem.space)
	space = problem.space
	t1 = state.time_at(state.n + 1, cfg.dt)
	n1 = state.n + 1
	scale, history = _time_derivative(cfg, ops, state.u, state.u_prev, bdf2)
	adv = _advector(state.u, state.u_prev, bdf2)
	A = scale * ops.mass + assemble_convection(adv, space) + cfg.nu * ops.stiffness
	rhs = history + _load(problem, t1)
	A, rhs = _add_nudging(A, rhs, cfg, ops, t1)

	bc = _bcs(problem, ops, t1)
	A_bc, f_bc = apply_dirichlet(A, rhs, bc)
	lifted = np.zeros(space.num_velocity)
	lifted[bc.dofs] = bc.values
	keep = np.ones(space.num_velocity)
	keep[bc.dofs] = 0.0
	B = -ops.divergence
	g = -(B @ lifted)
	B_free = (B @ sparse.diags(keep)).tocsr()
	u, p, report = solve_saddle(A_bc, B_free, f_bc, g, tol=cfg.tol, maxit=cfg.maxit,
								pressure_mass=ops.pressure_mass, method=cfg.linear_solver)
	if not report.converged:
		raise SolverError(f"coupled solve failed: {report}", report=report, step=n1, time=t1)
	u[bc.dofs] = bc.values
	uf = _velocity(space, u)
	div = weak_divergence(ops, ops.divergence @ u)
	return State(n=n1, t=t1, start=state.start, u=uf, u_tilde=uf, p=_pressure(space, p), u_prev=state.u,
				 u_tilde_prev=state.u_tilde, report=report, divergence=div)


def step_coupled_be(state: State, cfg: SchemeConfig, problem: Problem) -> State:
	"""Linearized backward Euler on the full saddle-point system; pressure with zero integral."""
	return _coupled_step(state, cfg, problem, bdf2=False)


def step_coupled_bdf2(state: State, cfg: SchemeConfig, problem: Problem) -> State:
	return _coupled_step(state, cfg, problem, bdf2=True)


# projection

def _proj_step1(state: State, cfg: SchemeConfig, problem: Problem, bdf2: bool) -> Tuple[Field, SolveReport]:
	ops = operators(problem.space)
	t1 = state.time_at(state.n + 1, cfg.dt)
	scale, history = _time_derivative(cfg, ops, state.u_tilde, state.u_tilde_prev, bdf2)
	adv = _advector(state.u_tilde, state.u_tilde_prev, bdf2)
	A = scale * ops.mass + assemble_convection(adv, problem.space) + cfg.nu * ops.stiffness
	rhs = history + _load(problem, t1)
	if bdf2:
		rhs = rhs - ops.gradient.T @ state.p.coefficients
	A, rhs = _add_nudging(A, rhs, cfg, ops, t1)
	u, report = _solve_velocity(A, rhs, _bcs(problem, ops, t1), cfg, state.n + 1, t1)
	return _velocity(problem.space, u), report


def proj_step1_be(state: State, cfg: SchemeConfig, problem: Problem) -> Tuple[Field, SolveReport]:
	"""Convection-diffusion(-nudging) solve for the intermediate velocity."""
	return _proj_step1(state, cfg, problem, bdf2=False)


def proj_step1_bdf2(state: State, cfg: SchemeConfig, problem: Problem) -> Tuple[Field, SolveReport]:
	"""BDF2 intermediate velocity with the lagged pressure gradient on the left."""
	return _proj_step1(state, cfg, problem, bdf2=True)


def boundary_flux(u: Field) -> np.ndarray:
	"""Functional q -> integral of q u.n over the boundary, which depends on the trace of u only."""
	ops = operators(u.dofmap)
	return ops.divergence @ u.coefficients + ops.gradient @ u.coefficients


def proj_step2(u: Field, cfg: SchemeConfig, flux: Optional[np.ndarray] = None, factor: Optional[float] = None,
			   step: Optional[int] = None, time: Optional[float] = None) -> Tuple[Field, Field, SolveReport]:
	"""Discrete L2 projection onto weakly divergence-free fields through a pressure Poisson problem.

	Solves (D M^-1 D^T) p = factor (D u - flux) with a constant nullspace, then
	u_tilde = u - M^-1 D^T p / factor, so that D u_tilde = flux. factor is 1/dt by
	default; the BDF2 variant passes 3/(2 dt) and receives the pressure increment.
	"""
	space = u.dofmap
	ops = operators(space)
	factor = 1.0 / cfg.dt if factor is None else factor
	flux = np.zeros(space.num_pressure) if flux is None else flux
	D = ops.gradient
	Dt = sparse.csr_matrix(D.T)

	def schur(q: np.ndarray) -> np.ndarray:
		return D @ ops.mass_solve(Dt @ q)

	S = LinearOperator((space.num_pressure, space.num_pressure), matvec=schur)
	rhs = factor * (D @ u.coefficients - flux)
	p, report = solve_spd(S, rhs, tol=cfg.tol, maxit=cfg.maxit, nullspace=True,
						  preconditioner=ops.pressure_preconditioner())
	if not report.converged:
		raise SolverError(f"pressure projection failed: {report}", report=report, step=step, time=time)
	u_tilde = u.coefficients - ops.mass_solve(Dt @ p) / factor
	return _velocity(space, u_tilde), _pressure(space, p), report


def divergence_residual(u_tilde: Field, flux: Optional[np.ndarray] = None) -> float:
	"""Weak divergence left after projection, normalised by ||q||.

	r_q = flux(q) - (u_tilde, grad q) is (div u_tilde, q) with the normal trace fixed
	by Step 1; the reported value is its dual norm over the pressure space.
	"""
	ops = operators(u_tilde.dofmap)
	flux = np.zeros(ops.space.num_pressure) if flux is None else flux
	return weak_divergence(ops, flux - ops.gradient @ u_tilde.coefficients)


def proj_step2_bdf2(u: Field, state: State, cfg: SchemeConfig, flux: Optional[np.ndarray] = None,
					step: Optional[int] = None, time: Optional[float] = None) -> Tuple[Field, Field, SolveReport]:
	"""Incremental projection: solves for p^{n+1} - p^n with factor 3/(2 dt)."""
	u_tilde, increment, report = proj_step2(u, cfg, flux=flux, factor=1.5 / cfg.dt, step=step, time=time)
	return u_tilde, state.p + increment, report


def _projection_step(state: State, cfg: SchemeConfig, problem: Problem, bdf2: bool) -> State:
	t1 = state.time_at(state.n + 1, cfg.dt)
	n1 = state.n + 1
	u, report1 = _proj_step1(state, cfg, problem, bdf2)
	flux = boundary_flux(u)
	if bdf2:
		u_tilde, p, report2 = proj_step2_bdf2(u, state, cfg, flux=flux, step=n1, time=t1)
	else:
		u_tilde, p, report2 = proj_step2(u, cfg, flux=flux, step=n1, time=t1)
	return State(n=n1, t=t1, start=state.start, u=u, u_tilde=u_tilde, p=p, u_prev=state.u,
				 u_tilde_prev=state.u_tilde,
				 report=report1 if report1.iterations >= report2.iterations else report2,
				 divergence=divergence_residual(u_tilde, flux))


def step_proj_be(state: State, cfg: SchemeConfig, problem: Problem) -> State:
	return _projection_step(state, cfg, problem, bdf2=False)


def step_proj_bdf2(state: State, cfg: SchemeConfig, problem: Problem) -> State:
	return _projection_step(state, cfg, problem, bdf2=True)


# penalty

def _penalty_step(state: State, cfg: SchemeConfig, problem: Problem, bdf2: bool) -> State:
	ops = operators(problem.space)
	space = problem.space
	t1 = state.time_at(state.n + 1, cfg.dt)
	n1 = state.n + 1
	scale, history = _time_derivative(cfg, ops, state.u, state.u_prev, bdf2)
	adv = _advector(state.u, state.u_prev, bdf2)
	A = (scale * ops.mass + assemble_convection_skew(adv, space) + cfg.nu * ops.stiffness
		 + ops.graddiv / cfg.eps)
	rhs = history + _load(problem, t1)
	A, rhs = _add_nudging(A, rhs, cfg, ops, t1)
	u, report = _solve_velocity(A, rhs, _bcs(problem, ops, t1), cfg, n1, t1)
	p, preport = solve_spd(ops.pressure_mass, -(ops.divergence @ u) / cfg.eps, tol=cfg.tol, maxit=cfg.maxit,
						   method=cfg.linear_solver)
	if not preport.converged:
		raise SolverError(f"penalty pressure recovery failed: {preport}", report=preport, step=n1, time=t1)
	uf = _velocity(space, u)
	return State(n=n1, t=t1, start=state.start, u=uf, u_tilde=uf, p=_pressure(space, p), u_prev=state.u,
				 u_tilde_prev=state.u_tilde, report=report, divergence=weak_divergence(ops, ops.divergence @ u))


def penalty_step_be(state: State, cfg: SchemeConfig, problem: Problem) -> State:
	"""Velocity-only step with eps^-1 grad-div; pressure recovered as -eps^-1 div u in the pressure space."""
	return _penalty_step(state, cfg, problem, bdf2=False)


def penalty_step_bdf2(state: State, cfg: SchemeConfig, problem: Problem) -> State:
	return _penalty_step(state, cfg, problem, bdf2=True)


STEPPERS: Dict[SchemeKind, Callable[[State, SchemeConfig, Problem], State]] = {
	SchemeKind.COUPLED_BE: step_coupled_be,
	SchemeKind.COUPLED_BDF2: step_coupled_bdf2,
	SchemeKind.PROJ_BE: step_proj_be,
	SchemeKind.PROJ_BDF2: step_proj_bdf2,
	SchemeKind.PENALTY_BE: penalty_step_be,
	SchemeKind.PENALTY_BDF2: penalty_step_bdf2,
}


# driver

def initial_state(problem: Problem, t0: float = 0.0) -> State:
	space = problem.space
	if problem.initial_velocity is not None:
		u0 = interpolate(space, Kind.VELOCITY, problem.initial_velocity)
	else:
		u0 = zeros(space, Kind.VELOCITY)
	if problem.initial_pressure is not None:
		p0 = interpolate(space, Kind.PRESSURE, problem.initial_pressure)
	else:
		p0 = zeros(space, Kind.PRESSURE)
	return State(n=0, t=t0, start=t0, u=u0, u_tilde=u0, p=p0)


def check_nudging_guard(cfg: SchemeConfig, samples: int = 50) -> Optional[float]:
	"""Battery estimate of C_I; warns when mu H^2 > nu / (2 C_I^2). Returns C_I or None without nudging."""
	if cfg.nudge is None or not cfg.nudge.active:
		return None
	itp = cfg.nudge.interpolant
	c_i = estimate_stability_constant(itp, samples=samples)
	if guard_violated(cfg.mu, cfg.nu, itp.spacing, c_i):
		logger.warning("mu*H^2 = %.4g exceeds nu/(2 C_I^2) = %.4g (C_I=%.3f); convergence bound does not apply",
					   cfg.mu * itp.spacing ** 2, cfg.nu / (2.0 * c_i ** 2), c_i)
	return c_i


def iterate(cfg: SchemeConfig, problem: Problem, initial: Optional[State] = None) -> Iterator[State]:
	"""Yield the state after every step; BDF2 kinds take exactly one first-order step first."""
	state = initial_state(problem) if initial is None else initial
	step = STEPPERS[cfg.kind]
	for k in range(cfg.num_steps):
		if cfg.kind.bdf2 and state.u_prev is None:
			state = STEPPERS[cfg.kind.bootstrap](state, cfg, problem)
		else:
			state = step(state, cfg, problem)
		logger.debug("step %d t=%.6g %s", state.n, state.t, state.report)
		yield state


StateMetric = Callable[[State], float]
StateObserver = Callable[[State], None]


def run(cfg: SchemeConfig, problem: Problem, metrics: Optional[Mapping[str, StateMetric]] = None,
		observers: Sequence[StateObserver] = (), initial: Optional[State] = None,
		metadata: Optional[Dict] = None) -> TimeSeries:
	"""Time-step from t=0 to end_time; metric columns are recorded in declaration order for every step."""
	metrics = dict(metrics or {})
	series = TimeSeries(list(metrics), metadata=dict(metadata or {}))
	check_nudging_guard(cfg)
	logger.info("running %s: %d steps of dt=%g, mu=%g", cfg.kind.value, cfg.num_steps, cfg.dt, cfg.mu)
	for state in iterate(cfg, problem, initial):
		series.append(state.t, {name: fn(state) for name, fn in metrics.items()})
		for observer in observers:
			observer(state)
	return series
