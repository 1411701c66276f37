from __future__ import annotations
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
import logging
import math
import os

from .. import __version__
from .cda import NudgeConfig, build_interpolant, estimate_stability_constant, guard_violated
from .config import RunSpec, expand_sweep
from .errors import ConfigError, NudgeNSError
from .fem import DofMap, build_dofmap
from .mesh import Mesh, barycentric_refine, channel_block_mesh, coarse_grid, load_mesh, unit_square_mesh
from .metrics import (
	RunLogger, TimeSeries, drag_lift, emit_csv, h1_error_vs_truth, l2_error_vs_truth, velocity_norm,
)
from .schemes import Problem, SchemeConfig, State, StateMetric, run
from .storage import RunRegistry
from .truth import (
	AnalyticSource, ManufacturedSolution, MeasurementSource, SnapshotSource, StoredReference, channel_problem,
	generate_reference, manufactured_problem,
)


logger = logging.getLogger(__name__)

THREADS_ENV = "NUDGE_NS_THREADS"
RESULTS_FILE = "results.csv"
MANIFEST_FILE = "manifest"


@dataclass
class Setup:
	spec: RunSpec
	mesh: Mesh
	space: DofMap
	problem: Problem
	source: Optional[MeasurementSource]
	cfg: SchemeConfig


@dataclass
class RunResult:
	name: str
	output_dir: str
	status: str
	final_l2_error: Optional[float] = None
	message: Optional[str] = None

	@property
	def ok(self) -> bool:
		return self.status == "finished"


# setup

def build_mesh(spec: RunSpec) -> Mesh:
	section = spec.mesh
	if section.generator == "unit_square":
		mesh = unit_square_mesh(section.n)
	elif section.generator == "channel":
		mesh = channel_block_mesh(section.target_h)
	else:
		mesh = load_mesh(section.path, normalize_orientation=section.normalize_orientation)
	return barycentric_refine(mesh) if section.refine else mesh


def build_problem(spec: RunSpec, space: DofMap) -> Problem:
	if spec.problem == "channel":
		return channel_problem(space, nu=spec.nu)
	return manufactured_problem(space, nu=spec.nu, exact_initial=spec.truth.exact_initial)


def build_source(spec: RunSpec, space: DofMap) -> Optional[MeasurementSource]:
	truth = spec.truth
	if truth.source == "none":
		return None
	if truth.source == "analytic":
		if spec.problem != "manufactured":
			raise ConfigError("analytic truth exists only for the manufactured problem")
		return AnalyticSource(space, ManufacturedSolution(spec.nu))
	return StoredReference.open(truth.path, space, truth.policy)


def build_nudge(spec: RunSpec, mesh: Mesh, space: DofMap, source: Optional[MeasurementSource]) -> Optional[NudgeConfig]:
	cda = spec.cda
	if cda.mu == 0.0:
		return None
	if source is None:
		raise ConfigError("nudging with mu > 0 needs a truth source")
	x0, x1, y0, y1 = mesh.bbox
	grid = coarse_grid(mesh, cda.coarse_n(max(x1 - x0, y1 - y0)))
	itp = build_interpolant(space, grid, cda.mode)
	return NudgeConfig(mu=cda.mu, interpolant=itp, source=source)


def prepare(spec: RunSpec) -> Setup:
	mesh = build_mesh(spec)
	space = build_dofmap(mesh)
	problem = build_problem(spec, space)
	source = build_source(spec, space)
	s = spec.scheme
	cfg = SchemeConfig(
		kind=s.scheme, nu=spec.nu, dt=s.dt, end_time=s.end_time, eps=s.eps,
		nudge=build_nudge(spec, mesh, space, source), tol=s.tol, maxit=s.maxit, linear_solver=s.linear_solver,
	)
	if isinstance(source, SnapshotSource):
		source.check_step(cfg.dt)
	logger.info("prepared %s: %d cells, %d velocity dofs, %d pressure dofs",
				spec.run_name, mesh.num_cells, space.num_velocity, space.num_pressure)
	return Setup(spec, mesh, space, problem, source, cfg)


def enforce_guard(setup: Setup) -> Optional[float]:
	"""Refuse nudging outside mu H^2 <= nu / (2 C_I^2) unless the config overrides the guard."""
	nudge = setup.cfg.nudge
	if nudge is None or not nudge.active:
		return None
	itp = nudge.interpolant
	c_i = estimate_stability_constant(itp)
	if guard_violated(nudge.mu, setup.cfg.nu, itp.spacing, c_i):
		message = (f"mu*H^2 = {nudge.mu * itp.spacing ** 2:.4g} exceeds nu/(2 C_I^2) = "
				   f"{setup.cfg.nu / (2.0 * c_i ** 2):.4g} (H={itp.spacing:.4g}, C_I={c_i:.3f})")
		if not setup.spec.cda.override_guard:
			raise ConfigError(message + "; set override_guard = true in [cda] to run anyway")
		logger.warning("%s; continuing because override_guard is set", message)
	return c_i


# metrics

def _truth_for_errors(setup: Setup) -> Optional[Any]:
	if setup.source is not None:
		return setup.source
	if setup.spec.problem == "manufactured":
		return AnalyticSource(setup.space, ManufacturedSolution(setup.spec.nu))
	return None


def _against_truth(norm, truth: Any, name: str) -> StateMetric:
	warned = []

	def metric(state: State) -> float:
		if not truth.covers(state.t):
			if not warned:
				logger.warning("%s: truth does not cover t=%.6g, writing nan", name, state.t)
				warned.append(state.t)
			return math.nan
		return norm(state.u, truth, state.t)

	return metric


def metric_functions(setup: Setup, names: List[str]) -> Dict[str, StateMetric]:
	"""Columns in the order requested; metrics without the data they need are skipped."""
	truth = _truth_for_errors(setup)
	nu = setup.cfg.nu
	forces: Dict[int, Tuple[float, float]] = {}

	def force(state: State) -> Tuple[float, float]:
		if state.n not in forces:
			forces.clear()
			forces[state.n] = drag_lift(state.u, state.p, nu)
		return forces[state.n]

	available: Dict[str, StateMetric] = {
		"u_l2": lambda s: velocity_norm(s.u),
		"divergence": lambda s: s.divergence,
		"iterations": lambda s: float(s.report.iterations) if s.report is not None else 0.0,
		"residual": lambda s: float(s.report.residual) if s.report is not None else 0.0,
	}
	if truth is not None:
		available["l2_error"] = _against_truth(l2_error_vs_truth, truth, "l2_error")
		available["h1_error"] = _against_truth(h1_error_vs_truth, truth, "h1_error")
	if setup.spec.problem == "channel":
		available["drag"] = lambda s: force(s)[0]
		available["lift"] = lambda s: force(s)[1]

	selected: Dict[str, StateMetric] = {}
	for name in names:
		if name in available:
			selected[name] = available[name]
		else:
			logger.warning("metric %s is not available for %s; skipped", name, setup.spec.run_name)
	return selected


# artifacts

def manifest_text(spec: RunSpec, mesh_hash: str) -> str:
	"""Comment header plus the resolved config; parsing it back yields the same spec."""
	header = [
		f"# nudge_ns {__version__}",
		f"# mesh_hash {mesh_hash}",
		f"# run {spec.run_name}",
		"",
	]
	return "\n".join(header) + spec.to_config_text(include_sweep=False)


def _write_text(path: Union[str, Path], content: str) -> None:
	path = Path(path)
	path.parent.mkdir(parents=True, exist_ok=True)
	path.write_text(content, encoding="utf-8")


def describe(spec: RunSpec) -> str:
	"""Resolved spec as printed by --dry-run."""
	lines = [f"# run {spec.run_name}: problem={spec.problem}, nu={spec.nu!r}, metrics={','.join(spec.metrics)}"]
	return "\n".join(lines) + "\n" + spec.to_config_text()


def run_experiment(spec: RunSpec, output_dir: Optional[Union[str, Path]] = None,
				   registry: Optional[RunRegistry] = None) -> RunResult:
	"""Solve one configured run and write results.csv, manifest and the event log into its directory."""
	out = Path(output_dir or spec.output.directory)
	out.mkdir(parents=True, exist_ok=True)
	name = spec.run_name
	events = RunLogger(out, name)
	own_registry = registry is None
	registry = registry or RunRegistry.for_output(spec.output.directory)
	try:
		return _run_recorded(spec, out, events, registry)
	finally:
		if own_registry:
			registry.dispose()


def _run_recorded(spec: RunSpec, out: Path, events: RunLogger, registry: RunRegistry) -> RunResult:
	name = spec.run_name
	run_id = registry.start(name, spec.scheme.scheme.value, spec.cda.mu, spec.scheme.dt, str(out))
	try:
		setup = prepare(spec)
		mesh_hash = setup.mesh.fingerprint()
		_write_text(out / MANIFEST_FILE, manifest_text(spec, mesh_hash))
		c_i = enforce_guard(setup)
		events.log_stage("setup", True, metadata={
			"mesh_hash": mesh_hash, "velocity_dofs": setup.space.num_velocity, "c_i": c_i,
		})
		metrics = metric_functions(setup, spec.metrics)
		series = run(setup.cfg, setup.problem, metrics=metrics, observers=[events.log_step],
					 metadata={"run": name, "mesh_hash": mesh_hash})
		emit_csv(series, out / RESULTS_FILE)
	except NudgeNSError as exc:
		events.log_stage("run", False, errors=str(exc))
		registry.finish(run_id, "failed", message=str(exc))
		logger.error("run %s failed: %s", name, exc)
		return RunResult(name, str(out), "failed", message=str(exc))
	final = series.last("l2_error") if "l2_error" in series.columns and len(series) else None
	events.log_stage("run", True, step=setup.cfg.num_steps, time=series.times[-1] if len(series) else 0.0,
					 metadata={"final_l2_error": final})
	registry.finish(run_id, "finished", final_l2_error=final)
	logger.info("run %s finished: %d steps written to %s", name, len(series), out / RESULTS_FILE)
	return RunResult(name, str(out), "finished", final_l2_error=final)


# sweeps

def sweep_workers() -> int:
	raw = os.getenv(THREADS_ENV, "1")
	try:
		return max(1, int(raw))
	except ValueError:
		raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None


def variant_dir(root: Union[str, Path], label: str) -> Path:
	"""`a=1,b=2` becomes <root>/a=1/b=2."""
	path = Path(root)
	for part in label.split(","):
		if part:
			path = path / part
	return path


def _run_variant(args: Tuple[RunSpec, str, str]) -> RunResult:
	spec, out, db_url = args
	registry = RunRegistry(db_url)
	try:
		return run_experiment(spec, out, registry)
	finally:
		registry.dispose()


def run_sweep(spec: RunSpec, vary: Optional[Dict[str, List[str]]] = None,
			  workers: Optional[int] = None) -> List[RunResult]:
	"""Independent runs over the cartesian product of sweep values, at most `workers` at a time."""
	variants = expand_sweep(spec, vary)
	root = spec.output.directory
	registry = RunRegistry.for_output(root)
	jobs = [(variant, str(variant_dir(root, label)), registry.url) for label, variant in variants]
	registry.dispose()
	workers = min(workers or sweep_workers(), len(jobs))
	logger.info("sweep over %d variants with %d worker(s)", len(jobs), workers)
	if workers <= 1:
		return [_run_variant(job) for job in jobs]
	with ProcessPoolExecutor(max_workers=workers) as pool:
		return list(pool.map(_run_variant, jobs))


# reference

def reference_run(spec: RunSpec) -> Tuple[Path, TimeSeries]:
	"""Coupled run archived under [truth] path; its metric series goes to the output directory."""
	if spec.truth.path is None:
		raise ConfigError("reference generation needs [truth] path for the archive")
	out = Path(spec.output.directory)
	events = RunLogger(out, spec.run_name)
	mesh = build_mesh(spec)
	space = build_dofmap(mesh)
	problem = build_problem(spec, space)
	s = spec.scheme
	cfg = SchemeConfig(kind=s.scheme, nu=spec.nu, dt=s.dt, end_time=s.end_time, tol=s.tol, maxit=s.maxit,
					   linear_solver=s.linear_solver)
	setup = Setup(spec, mesh, space, problem, None, cfg)
	_write_text(out / MANIFEST_FILE, manifest_text(spec, mesh.fingerprint()))
	archive = Path(spec.truth.path)
	try:
		_, series = generate_reference(space, cfg, problem, archive, stride=spec.truth.stride,
									   metrics=metric_functions(setup, spec.metrics),
									   observers=[events.log_step])
	except NudgeNSError as exc:
		events.log_stage("reference", False, errors=str(exc))
		raise
	emit_csv(series, out / RESULTS_FILE)
	events.log_stage("reference", True, metadata={"archive": str(archive), "steps": len(series)})
	return archive, series


def mesh_info(mesh: Mesh) -> Dict[str, Any]:
	x0, x1, y0, y1 = mesh.bbox
	space = build_dofmap(mesh)
	return {
		"vertices": mesh.num_vertices,
		"cells": mesh.num_cells,
		"edges": mesh.num_edges,
		"boundary_edges": int(len(mesh.boundary_edges)),
		"h": mesh.h,
		"bbox": (x0, x1, y0, y1),
		"tags": sorted(t.value for t in mesh.tags),
		"velocity_dofs": space.num_velocity,
		"pressure_dofs": space.num_pressure,
		"hash": mesh.fingerprint(),
	}
