from __future__ import annotations
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from typing import Any, Callable, Optional, Union
import logging

import numpy as np
from scipy import sparse

from .errors import ConfigError, DofMapError, InterpolantError, TruthCoverageError
from .fem import DofMap, Field, Kind, p2_values
from .mesh import CoarseGrid


logger = logging.getLogger(__name__)


class Mode(str, Enum):
	AVERAGE = "average"
	NODAL = "nodal"


def _quadrature_matrix(space: DofMap) -> sparse.csr_matrix:
	"""Bq[(c, q), j]: scalar P2 basis function j at quadrature point q of cell c."""
	tab = space.tables()
	nc, nq = tab.weights.shape
	dofs = space.cell_scalar_dofs
	rows = np.repeat(np.arange(nc * nq).reshape(nc, nq, 1), 6, axis=2)
	cols = np.broadcast_to(dofs[:, None, :], (nc, nq, 6))
	vals = np.broadcast_to(tab.phi2[None], (nc, nq, 6))
	return sparse.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(nc * nq, space.num_scalar))


@dataclass(frozen=True, eq=False)
class Interpolant:
	"""Coarse operator I_H acting on scalar P2 components.

	restriction maps fine scalar dofs to the coarse representation (box averages or
	coarse nodal values); prolongation maps the coarse representation to values at
	the fine quadrature points, so E R is I_H seen from the fine space.
	"""

	coarse: CoarseGrid
	mode: Mode
	space: DofMap
	restriction: sparse.csr_matrix
	prolongation: sparse.csr_matrix
	quadrature: sparse.csr_matrix

	@property
	def spacing(self) -> float:
		return self.coarse.spacing

	@property
	def size(self) -> int:
		return int(self.restriction.shape[0])

	@cached_property
	def _weights(self) -> np.ndarray:
		return self.space.tables().weights.ravel()

	@cached_property
	def scalar_matrix(self) -> sparse.csr_matrix:
		"""J_s with v^T J_s u = (I_H u, v) for scalar P2 functions."""
		W = sparse.diags(self._weights)
		J = (self.quadrature.T @ W @ self.prolongation @ self.restriction).tocsr()
		if self.mode is Mode.AVERAGE:
			J = 0.5 * (J + J.T)
		J = sparse.csr_matrix(J)
		J.sort_indices()
		return J

	def _check(self, field: Field) -> None:
		if field.kind is not Kind.VELOCITY or field.dofmap.mesh is not self.space.mesh:
			raise DofMapError("interpolant applies to velocity fields on its own fine mesh")

	def restrict(self, field: Field) -> np.ndarray:
		"""Coarse representation of I_H field, shape (size, 2)."""
		self._check(field)
		ux, uy = field.components()
		return np.column_stack([self.restriction @ ux, self.restriction @ uy])

	def restrict_quadrature(self, values: np.ndarray) -> np.ndarray:
		"""Coarse representation of data given at the fine quadrature points, (NC, Q, 2) -> (size, 2)."""
		flat = values.reshape(-1, 2)
		if self.mode is Mode.AVERAGE:
			W = self._weights
			area = self.prolongation.T @ W
			return (self.prolongation.T @ (W[:, None] * flat)) / area[:, None]
		raise InterpolantError("nodal mode restricts fine fields or functions, not quadrature data")

	def restrict_function(self, func: Callable) -> np.ndarray:
		"""Coarse representation of I_H applied to a closed-form func(x, y) -> (fx, fy)."""
		tab = self.space.tables()
		if self.mode is Mode.AVERAGE:
			fx, fy = func(tab.points[..., 0], tab.points[..., 1])
			values = np.stack([np.broadcast_to(fx, tab.weights.shape), np.broadcast_to(fy, tab.weights.shape)], axis=-1)
			return self.restrict_quadrature(values)
		nodes = self.coarse.mesh.vertices
		fx, fy = func(nodes[:, 0], nodes[:, 1])
		out = np.column_stack([np.broadcast_to(fx, (len(nodes),)), np.broadcast_to(fy, (len(nodes),))]).copy()
		out[~self._nodal_inside] = 0.0
		return out

	@cached_property
	def _nodal_inside(self) -> np.ndarray:
		return np.asarray(self.restriction.getnnz(axis=1) > 0)

	def prolong_to_quadrature(self, coarse_values: np.ndarray) -> np.ndarray:
		"""(size, 2) -> values of I_H at the fine quadrature points, (NC, Q, 2)."""
		shape = self.space.tables().weights.shape
		return np.stack([
			(self.prolongation @ coarse_values[:, 0]).reshape(shape),
			(self.prolongation @ coarse_values[:, 1]).reshape(shape),
		], axis=-1)

	def norm(self, coarse_values: np.ndarray) -> float:
		vals = self.prolong_to_quadrature(coarse_values)
		return float(np.sqrt(np.sum(self.space.tables().weights * (vals ** 2).sum(axis=-1))))

	def error(self, func: Callable) -> float:
		"""||I_H phi - phi|| for a closed-form phi, by fine quadrature."""
		tab = self.space.tables()
		vals = self.prolong_to_quadrature(self.restrict_function(func))
		fx, fy = func(tab.points[..., 0], tab.points[..., 1])
		diff = (vals[..., 0] - fx) ** 2 + (vals[..., 1] - fy) ** 2
		return float(np.sqrt(np.sum(tab.weights * diff)))


def _average_operators(space: DofMap, coarse: CoarseGrid, Bq: sparse.csr_matrix):
	tab = space.tables()
	nc, nq = tab.weights.shape
	owner = coarse.box_of(space.mesh.centroids)
	if np.any(owner < 0):
		raise InterpolantError(f"{int((owner < 0).sum())} fine cells lie outside the coarse grid")
	active, box = np.unique(owner, return_inverse=True)
	box = np.asarray(box).ravel()
	E = sparse.csr_matrix(
		(np.ones(nc * nq), (np.arange(nc * nq), np.repeat(box, nq))),
		shape=(nc * nq, len(active)),
	)
	W = sparse.diags(tab.weights.ravel())
	area = np.asarray(E.T @ tab.weights.ravel()).ravel()
	R = (sparse.diags(1.0 / area) @ E.T @ W @ Bq).tocsr()
	logger.debug("averaging interpolant: %d of %d boxes cover the domain", len(active), coarse.num_boxes)
	return R, E


def _nodal_operators(space: DofMap, coarse: CoarseGrid, Bq: sparse.csr_matrix):
	tab = space.tables()
	nodes = coarse.mesh.vertices
	nvc = len(nodes)
	cells, bary = space.mesh.locate(nodes, strict=False)
	inside = cells >= 0
	rows = np.repeat(np.flatnonzero(inside), 6)
	cols = space.cell_scalar_dofs[cells[inside]].ravel()
	vals = p2_values(bary[inside]).ravel()
	R = sparse.csr_matrix((vals, (rows, cols)), shape=(nvc, space.num_scalar))
	R.eliminate_zeros()

	qpoints = tab.points.reshape(-1, 2)
	try:
		ccells, cbary = coarse.mesh.locate(qpoints)
	except DofMapError as exc:
		raise InterpolantError(f"fine quadrature point outside the coarse grid: {exc}") from exc
	E = sparse.csr_matrix(
		(cbary.ravel(), (np.repeat(np.arange(len(qpoints)), 3), coarse.mesh.cells[ccells].ravel())),
		shape=(len(qpoints), nvc),
	)
	logger.debug("nodal interpolant: %d of %d coarse vertices inside the domain", int(inside.sum()), nvc)
	return R, E


def build_interpolant(fine: DofMap, coarse: CoarseGrid, mode: Union[Mode, str] = Mode.AVERAGE) -> Interpolant:
	mode = Mode(mode)
	points = fine.scalar_coordinates
	if np.any(coarse.box_of(points) < 0):
		raise InterpolantError("fine velocity dof located outside all coarse cells")
	Bq = _quadrature_matrix(fine)
	if mode is Mode.AVERAGE:
		R, E = _average_operators(fine, coarse, Bq)
	else:
		R, E = _nodal_operators(fine, coarse, Bq)
	return Interpolant(coarse=coarse, mode=mode, space=fine, restriction=R, prolongation=E, quadrature=Bq)


def nudging_matrix(itp: Interpolant, space: DofMap) -> sparse.csr_matrix:
	"""Velocity matrix J with v^T J u = (I_H u, v); the caller scales by mu."""
	if space.mesh is not itp.space.mesh:
		raise DofMapError("interpolant was built for a different mesh")
	return sparse.block_diag([itp.scalar_matrix, itp.scalar_matrix], format="csr")


def nudging_rhs(itp: Interpolant, w_true: Union[Field, np.ndarray, None], space: DofMap) -> np.ndarray:
	"""Load vector (I_H w, v) from a fine truth field or from its coarse samples (size, 2)."""
	if w_true is None:
		raise TruthCoverageError("no truth sample for the nudging term")
	if isinstance(w_true, Field):
		return nudging_matrix(itp, space) @ w_true.coefficients
	samples = np.asarray(w_true, dtype=float)
	if samples.shape != (itp.size, 2):
		raise DofMapError(f"expected coarse samples of shape ({itp.size}, 2), got {samples.shape}")
	W = sparse.diags(itp._weights)
	lift = itp.quadrature.T @ W @ itp.prolongation
	return np.concatenate([lift @ samples[:, 0], lift @ samples[:, 1]])


def random_smooth_field(rng: np.random.Generator, bbox, modes: int = 3) -> Callable:
	"""Random trigonometric velocity field on the bounding box."""
	x0, x1, y0, y1 = bbox
	k = np.arange(1, modes + 1)
	coef = rng.normal(size=(2, modes, modes)) / (k[:, None] * k[None, :])
	phase = rng.uniform(0.0, 2.0 * np.pi, size=(2, modes, modes))

	def field(x, y):
		sx = (np.asarray(x) - x0) / (x1 - x0)
		sy = (np.asarray(y) - y0) / (y1 - y0)
		out = []
		for c in range(2):
			v = np.zeros(np.broadcast(sx, sy).shape)
			for i in range(modes):
				for j in range(modes):
					v = v + coef[c, i, j] * np.sin(np.pi * k[i] * sx + phase[c, i, j]) * np.cos(np.pi * k[j] * sy)
			out.append(v)
		return out[0], out[1]

	return field


@lru_cache(maxsize=32)
def estimate_stability_constant(itp: Interpolant, samples: int = 50, seed: int = 0) -> float:
	"""Battery estimate of C_I in ||I_H phi|| <= C_I ||phi|| over random smooth fields."""
	rng = np.random.default_rng(seed)
	tab = itp.space.tables()
	worst = 0.0
	for _ in range(samples):
		phi = random_smooth_field(rng, itp.space.mesh.bbox)
		fx, fy = phi(tab.points[..., 0], tab.points[..., 1])
		phi_norm = float(np.sqrt(np.sum(tab.weights * (fx ** 2 + fy ** 2))))
		if phi_norm == 0.0:
			continue
		worst = max(worst, itp.norm(itp.restrict_function(phi)) / phi_norm)
	return worst


def interpolation_error_ratio(itp: Interpolant, func: Callable, gradient: Callable) -> float:
	"""||I_H phi - phi|| / (H ||grad phi||) for closed-form phi and its gradient [[dx fx, dy fx], [dx fy, dy fy]]."""
	tab = itp.space.tables()
	G = gradient(tab.points[..., 0], tab.points[..., 1])
	sq = sum(np.broadcast_to(G[c][d], tab.weights.shape) ** 2 for c in range(2) for d in range(2))
	grad_norm = float(np.sqrt(np.sum(tab.weights * sq)))
	return itp.error(func) / (itp.spacing * grad_norm)


def guard_violated(mu: float, nu: float, spacing: float, c_i: float) -> bool:
	"""True when mu H^2 exceeds nu / (2 C_I^2), the admissible nudging range of the convergence bound."""
	return mu > 0.0 and mu * spacing ** 2 > nu / (2.0 * c_i ** 2)


@dataclass(frozen=True, eq=False)
class NudgeConfig:
	mu: float
	interpolant: Interpolant
	source: Any

	def __post_init__(self) -> None:
		if not np.isfinite(self.mu) or self.mu < 0.0:
			raise ConfigError(f"nudging parameter mu must be a non-negative number, got {self.mu!r}")

	@property
	def active(self) -> bool:
		return self.mu > 0.0
