from __future__ import annotations
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import csv
import json
import logging
import os

import numpy as np

from .errors import MeshValidationError
from .fem import Field, evaluate_in_cells, h1_error, h1_seminorm, l2_error, l2_norm
from .mesh import Tag
from .quadrature import line_rule


logger = logging.getLogger(__name__)

RHO = 1.0
BLOCK_SIDE = 0.1
U_MAX = 1.5


@dataclass
class TimeSeries:
	"""Named metric columns over a shared, strictly increasing time axis."""

	columns: List[str]
	times: List[float] = field(default_factory=list)
	values: Dict[str, List[float]] = field(default_factory=dict)
	metadata: Dict[str, Any] = field(default_factory=dict)

	def __post_init__(self) -> None:
		if len(set(self.columns)) != len(self.columns):
			raise ValueError(f"duplicate column names in {self.columns}")
		for name in self.columns:
			self.values.setdefault(name, [])

	def __len__(self) -> int:
		return len(self.times)

	def append(self, t: float, row: Mapping[str, float]) -> None:
		if self.times and not t > self.times[-1]:
			raise ValueError(f"time {t} does not follow {self.times[-1]}")
		missing = [c for c in self.columns if c not in row]
		if missing:
			raise ValueError(f"row at t={t} lacks columns {missing}")
		self.times.append(float(t))
		for name in self.columns:
			self.values[name].append(float(row[name]))

	def column(self, name: str) -> np.ndarray:
		return np.asarray(self.values[name])

	def window(self, t_min: float, t_max: float = np.inf) -> "TimeSeries":
		out = TimeSeries(list(self.columns), metadata=dict(self.metadata))
		for i, t in enumerate(self.times):
			if t_min - 1e-12 <= t <= t_max + 1e-12:
				out.append(t, {c: self.values[c][i] for c in self.columns})
		return out

	def last(self, name: str) -> float:
		return self.values[name][-1]


def emit_csv(series: TimeSeries, path: Union[str, Path]) -> None:
	"""Header `time,<columns...>` then one row per time at 17 significant digits."""
	path = Path(path)
	path.parent.mkdir(parents=True, exist_ok=True)
	with open(path, "w", encoding="utf-8", newline="") as f:
		writer = csv.writer(f, lineterminator="\n")
		writer.writerow(["time", *series.columns])
		for i, t in enumerate(series.times):
			writer.writerow([format(t, ".17g"), *(format(series.values[c][i], ".17g") for c in series.columns)])


def read_csv(path: Union[str, Path]) -> TimeSeries:
	with open(path, "r", encoding="utf-8", newline="") as f:
		reader = csv.reader(f)
		header = next(reader)
		series = TimeSeries(header[1:])
		for row in reader:
			series.append(float(row[0]), {c: float(v) for c, v in zip(header[1:], row[1:])})
	return series


# error norms

def _closed_form(truth: Any, t: float):
	getter = getattr(truth, "closed_form", None)
	return getter(t) if getter is not None else None


def _as_field(truth: Any, t: float) -> Field:
	if isinstance(truth, Field):
		return truth
	return truth.sample(t)


def l2_error_vs_truth(u: Field, truth: Any, t: float) -> float:
	"""||u_h - w(t)||: closed-form truths are integrated with the degree-7 rule, discrete ones exactly."""
	exact = _closed_form(truth, t)
	if exact is not None:
		return l2_error(u, exact)
	return l2_norm(u - _as_field(truth, t))


def h1_error_vs_truth(u: Field, truth: Any, t: float) -> float:
	getter = getattr(truth, "closed_form_gradient", None)
	if getter is not None:
		return h1_error(u, getter(t))
	return h1_seminorm(u - _as_field(truth, t))


def velocity_norm(u: Field) -> float:
	return l2_norm(u)


def accumulated_h1_error(series: Sequence[float], dt: float) -> float:
	"""(dt * sum of squares)^(1/2) of per-step gradient errors."""
	a = np.asarray(series, dtype=float)
	return float(np.sqrt(dt * np.sum(a * a)))


# drag and lift

def _block_quadrature(u: Field, tag: Tag):
	mesh = u.dofmap.mesh
	tagged = np.array([t is tag for t in mesh.boundary_tags], dtype=bool)
	if not tagged.any():
		raise MeshValidationError(f"mesh has no {tag.value} boundary for drag/lift")
	edges = mesh.boundary_edges[tagged]
	owners = mesh.boundary_cells[tagged, 0]
	a = mesh.vertices[edges[:, 0]]
	b = mesh.vertices[edges[:, 1]]
	length = np.linalg.norm(b - a, axis=1)
	tangent = (b - a) / length[:, None]
	normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])
	# orient towards the fluid cell, i.e. out of the obstacle
	inward = np.einsum("ni,ni->n", normal, mesh.centroids[owners] - 0.5 * (a + b))
	normal[inward < 0] *= -1.0
	s, w = line_rule(3)
	points = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
	cells = np.repeat(owners, len(s))
	flat = points.reshape(-1, 2)
	bary = mesh.barycentric(cells, flat)
	weights = (length[:, None] * w[None, :]).ravel()
	normals = np.repeat(normal, len(s), axis=0)
	return cells, bary, weights, normals


def drag_lift(u: Field, p: Field, nu: float, rho: float = RHO, length: float = BLOCK_SIDE,
			  u_max: float = U_MAX, tag: Tag = Tag.BLOCK) -> Tuple[float, float]:
	"""Surface-integral drag and lift coefficients over the tagged obstacle boundary."""
	cells, bary, weights, n = _block_quadrature(u, tag)
	_, grad = evaluate_in_cells(u, cells, bary)
	pressure, _ = evaluate_in_cells(p, cells, bary)
	t = np.column_stack([n[:, 1], -n[:, 0]])
	dut_dn = np.einsum("nc,ncd,nd->n", t, grad, n)
	scale = 2.0 / (rho * length * u_max ** 2)
	c_d = scale * np.sum(weights * (rho * nu * dut_dn * n[:, 1] - pressure * n[:, 0]))
	c_l = -scale * np.sum(weights * (rho * nu * dut_dn * n[:, 0] + pressure * n[:, 1]))
	return float(c_d), float(c_l)


# sequence diagnostics

def dominant_frequency(times: Sequence[float], values: Sequence[float]) -> float:
	"""Frequency of the largest non-zero spectral peak of a uniformly sampled signal."""
	t = np.asarray(times, dtype=float)
	v = np.asarray(values, dtype=float)
	if len(v) < 4:
		raise ValueError("need at least four samples for a spectral estimate")
	dt = float(np.mean(np.diff(t)))
	spectrum = np.abs(np.fft.rfft(v - v.mean()))
	freqs = np.fft.rfftfreq(len(v), d=dt)
	k = int(np.argmax(spectrum[1:])) + 1
	return float(freqs[k])


def fit_geometric_decay(sequence: Sequence[float]) -> Tuple[float, float]:
	"""Least-squares fit of x_{n+1} = x_n / alpha + b; returns (alpha, limiting floor b alpha / (alpha - 1))."""
	x = np.asarray(sequence, dtype=float)
	if len(x) < 3:
		raise ValueError("need at least three terms to fit a decay")
	A = np.column_stack([x[:-1], np.ones(len(x) - 1)])
	(slope, intercept), *_ = np.linalg.lstsq(A, x[1:], rcond=None)
	if slope <= 0.0:
		return float("inf"), float(max(intercept, 0.0))
	alpha = 1.0 / slope
	if alpha <= 1.0:
		return float(alpha), float("inf")
	return float(alpha), float(intercept / (1.0 - slope))


class RunLogger:
	"""Writes one JSON object per stage or step.

	- <logs_dir>/events.log: every entry
	- <logs_dir>/errors.log: failed entries
	"""

	def __init__(self, logs_dir: Union[str, Path], run_name: str) -> None:
		self.logs_dir = str(logs_dir)
		self.run_name = run_name
		os.makedirs(self.logs_dir, exist_ok=True)
		self.event_log_path = os.path.join(self.logs_dir, "events.log")
		self.error_log_path = os.path.join(self.logs_dir, "errors.log")

	def log_stage(
		self,
		stage: str,
		success: bool,
		step: Optional[int] = None,
		time: Optional[float] = None,
		iterations: Optional[int] = None,
		residual: Optional[float] = None,
		errors: Optional[str] = None,
		metadata: Optional[Dict[str, Any]] = None,
	) -> Dict[str, Any]:
		entry: Dict[str, Any] = {
			"timestamp": datetime.now(timezone.utc).isoformat(),
			"run": self.run_name,
			"stage": stage,
			"success": success,
			"step": step,
			"time": time,
			"iterations": iterations,
			"residual": residual,
			"errors": errors,
			"metadata": metadata or {},
		}
		with open(self.event_log_path, "a", encoding="utf-8") as f:
			f.write(json.dumps(entry) + "\n")
		if not success or errors:
			with open(self.error_log_path, "a", encoding="utf-8") as f:
				f.write(json.dumps(entry) + "\n")
		return entry

	def log_step(self, state: Any) -> None:
		report = state.report
		self.log_stage(
			"step",
			True,
			step=state.n,
			time=state.t,
			iterations=report.iterations if report is not None else None,
			residual=report.residual if report is not None else None,
			metadata={"divergence": state.divergence},
		)
