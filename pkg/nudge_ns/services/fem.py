from __future__ import annotations
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy import sparse

from .errors import BoundaryConditionError, DofMapError
from .mesh import LOCAL_EDGES, Mesh, Point, Tag
from .quadrature import QuadratureRule, triangle_rule


logger = logging.getLogger(__name__)

# gradients of the barycentric coordinates on the reference triangle
REF_BARY_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])

# 2 + 2 + 1: advector, test and differentiated trial function
FORM_DEGREE = 5
ERROR_DEGREE = 7


class Kind(str, Enum):
	VELOCITY = "velocity"
	PRESSURE = "pressure"


def p2_values(lam: np.ndarray) -> np.ndarray:
	"""P2 basis from barycentrics (..., 3) -> (..., 6); vertex functions first, then edge k opposite vertex k."""
	l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
	return np.stack([
		l0 * (2.0 * l0 - 1.0),
		l1 * (2.0 * l1 - 1.0),
		l2 * (2.0 * l2 - 1.0),
		4.0 * l1 * l2,
		4.0 * l2 * l0,
		4.0 * l0 * l1,
	], axis=-1)


def p2_gradients(lam: np.ndarray, dlam: np.ndarray) -> np.ndarray:
	"""Physical P2 gradients: lam (C|1, Q, 3), dlam (C, 3, 2) -> (C, Q, 6, 2)."""
	L = lam[..., :, None]
	D = dlam[:, None, :, :]
	vertex = (4.0 * L - 1.0) * D
	a, b = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
	edge = 4.0 * (L[..., a, :] * D[..., b, :] + L[..., b, :] * D[..., a, :])
	return np.concatenate([vertex, edge], axis=2)


@dataclass(frozen=True, eq=False)
class CellTables:
	"""Basis data at the quadrature points of every cell."""

	rule: QuadratureRule
	weights: np.ndarray   # (NC, Q) quadrature weight times cell area
	points: np.ndarray    # (NC, Q, 2)
	phi2: np.ndarray      # (Q, 6)
	dphi2: np.ndarray     # (NC, Q, 6, 2)
	phi1: np.ndarray      # (Q, 3)
	dphi1: np.ndarray     # (NC, 3, 2)


@dataclass(frozen=True, eq=False)
class DofMap:
	"""Taylor-Hood numbering: scalar P2 dofs are vertices then edges, velocity dofs are [ux | uy]."""

	mesh: Mesh
	_tables: Dict[int, CellTables] = field(default_factory=dict, init=False, repr=False)

	@property
	def num_scalar(self) -> int:
		return self.mesh.num_vertices + self.mesh.num_edges

	@property
	def num_velocity(self) -> int:
		return 2 * self.num_scalar

	@property
	def num_pressure(self) -> int:
		return self.mesh.num_vertices

	def num_dofs(self, kind: Kind) -> int:
		return self.num_velocity if Kind(kind) is Kind.VELOCITY else self.num_pressure

	@property
	def cell_scalar_dofs(self) -> np.ndarray:
		return np.hstack([self.mesh.cells, self.mesh.num_vertices + self.mesh.cell_edges])

	@property
	def cell_velocity_dofs(self) -> np.ndarray:
		s = self.cell_scalar_dofs
		return np.hstack([s, s + self.num_scalar])

	@property
	def cell_pressure_dofs(self) -> np.ndarray:
		return self.mesh.cells

	@property
	def scalar_coordinates(self) -> np.ndarray:
		"""Node of every scalar P2 dof: vertices, then edge midpoints."""
		v = self.mesh.vertices
		e = self.mesh.edges
		return np.vstack([v, 0.5 * (v[e[:, 0]] + v[e[:, 1]])])

	@property
	def barycentric_derivatives(self) -> np.ndarray:
		"""(NC, 3, 2) physical gradients of the barycentric coordinates."""
		inv = self.mesh.jacobians[2]
		return np.einsum("kr,cri->cki", REF_BARY_GRAD, inv)

	def tables(self, degree: int = FORM_DEGREE) -> CellTables:
		cached = self._tables.get(degree)
		if cached is not None:
			return cached
		rule = triangle_rule(degree)
		corners = self.mesh.vertices[self.mesh.cells]
		dlam = self.barycentric_derivatives
		tab = CellTables(
			rule=rule,
			weights=self.mesh.areas[:, None] * rule.weights[None, :],
			points=rule.physical_points(corners),
			phi2=p2_values(rule.points),
			dphi2=p2_gradients(rule.points[None], dlam),
			phi1=rule.points.copy(),
			dphi1=dlam,
		)
		self._tables[degree] = tab
		return tab

	def boundary_scalar_dofs(self, tag: Union[Tag, str]) -> np.ndarray:
		edges = self.mesh.edges_with_tag(tag)
		if len(edges) == 0:
			return np.empty(0, dtype=np.int64)
		mids = [self.mesh.num_vertices + self.mesh.edge_index(int(a), int(b)) for a, b in edges]
		return np.unique(np.concatenate([edges.ravel(), np.array(mids, dtype=np.int64)]))

	@property
	def boundary_dofs(self) -> Dict[Tag, np.ndarray]:
		"""Velocity dofs (both components) per boundary tag; corner dofs belong to every adjacent tag."""
		out = {}
		for tag in sorted(self.mesh.tags, key=lambda t: t.value):
			s = self.boundary_scalar_dofs(tag)
			out[tag] = np.concatenate([s, s + self.num_scalar])
		return out

	def boundary_velocity_dofs(self, tags: Optional[Iterable[Union[Tag, str]]] = None) -> np.ndarray:
		tags = self.mesh.tags if tags is None else {Tag(t) for t in tags}
		parts = [d for t, d in self.boundary_dofs.items() if t in tags]
		if not parts:
			return np.empty(0, dtype=np.int64)
		return np.unique(np.concatenate(parts))


def build_dofmap(mesh: Mesh) -> DofMap:
	return DofMap(mesh)


@dataclass(frozen=True, eq=False)
class Field:
	dofmap: DofMap
	kind: Kind
	coefficients: np.ndarray

	def __post_init__(self) -> None:
		kind = Kind(self.kind)
		coeffs = np.asarray(self.coefficients, dtype=float)
		expected = self.dofmap.num_dofs(kind)
		if coeffs.shape != (expected,):
			raise DofMapError(f"{kind.value} field needs {expected} coefficients, got shape {coeffs.shape}")
		object.__setattr__(self, "kind", kind)
		object.__setattr__(self, "coefficients", coeffs)

	def _check_compatible(self, other: "Field") -> None:
		if other.dofmap is not self.dofmap or other.kind is not self.kind:
			raise DofMapError("fields live on different spaces")

	def __add__(self, other: "Field") -> "Field":
		self._check_compatible(other)
		return Field(self.dofmap, self.kind, self.coefficients + other.coefficients)

	def __sub__(self, other: "Field") -> "Field":
		self._check_compatible(other)
		return Field(self.dofmap, self.kind, self.coefficients - other.coefficients)

	def __mul__(self, scale: float) -> "Field":
		return Field(self.dofmap, self.kind, scale * self.coefficients)

	__rmul__ = __mul__

	def components(self) -> Tuple[np.ndarray, np.ndarray]:
		if self.kind is not Kind.VELOCITY:
			raise DofMapError("pressure fields have a single component")
		n = self.dofmap.num_scalar
		return self.coefficients[:n], self.coefficients[n:]

	def cell_coefficients(self) -> np.ndarray:
		"""(NC, 6, 2) for velocity, (NC, 3) for pressure."""
		if self.kind is Kind.PRESSURE:
			return self.coefficients[self.dofmap.cell_pressure_dofs]
		ux, uy = self.components()
		s = self.dofmap.cell_scalar_dofs
		return np.stack([ux[s], uy[s]], axis=-1)

	def values_at(self, tab: CellTables) -> np.ndarray:
		"""Velocity (NC, Q, 2) or pressure (NC, Q)."""
		local = self.cell_coefficients()
		if self.kind is Kind.PRESSURE:
			return local @ tab.phi1.T
		return np.einsum("qj,cjd->cqd", tab.phi2, local)

	def gradients_at(self, tab: CellTables) -> np.ndarray:
		"""Velocity (NC, Q, 2, 2) indexed [component, direction], or pressure (NC, Q, 2)."""
		local = self.cell_coefficients()
		if self.kind is Kind.PRESSURE:
			g = np.einsum("ck,cki->ci", local, tab.dphi1)
			return np.repeat(g[:, None, :], len(tab.rule), axis=1)
		return np.einsum("cjd,cqji->cqdi", local, tab.dphi2)


def zeros(dofmap: DofMap, kind: Kind) -> Field:
	return Field(dofmap, kind, np.zeros(dofmap.num_dofs(kind)))


def _as_array(value, n: int) -> np.ndarray:
	return np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()


def interpolate(dofmap: DofMap, kind: Kind, func: Callable) -> Field:
	"""Nodal interpolation; func(x, y) returns (ux, uy) for velocity or p for pressure."""
	kind = Kind(kind)
	if kind is Kind.PRESSURE:
		v = dofmap.mesh.vertices
		return Field(dofmap, kind, _as_array(func(v[:, 0], v[:, 1]), len(v)))
	nodes = dofmap.scalar_coordinates
	ux, uy = func(nodes[:, 0], nodes[:, 1])
	n = len(nodes)
	return Field(dofmap, kind, np.concatenate([_as_array(ux, n), _as_array(uy, n)]))


# assembly

def _scatter(local: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape: Tuple[int, int]) -> sparse.csr_matrix:
	r = np.broadcast_to(rows[:, :, None], local.shape)
	c = np.broadcast_to(cols[:, None, :], local.shape)
	A = sparse.coo_matrix((local.ravel(), (r.ravel(), c.ravel())), shape=shape).tocsr()
	A.sum_duplicates()
	A.sort_indices()
	return A


def _symmetrize(A: sparse.csr_matrix) -> sparse.csr_matrix:
	S = (0.5 * (A + A.T)).tocsr()
	S.sort_indices()
	return S


def _scalar_mass(space: DofMap, kind: Kind) -> sparse.csr_matrix:
	tab = space.tables()
	if kind is Kind.PRESSURE:
		local = np.einsum("cq,qi,qj->cij", tab.weights, tab.phi1, tab.phi1)
		dofs, n = space.cell_pressure_dofs, space.num_pressure
	else:
		local = np.einsum("cq,qi,qj->cij", tab.weights, tab.phi2, tab.phi2)
		dofs, n = space.cell_scalar_dofs, space.num_scalar
	return _symmetrize(_scatter(local, dofs, dofs, (n, n)))


def _scalar_stiffness(space: DofMap, kind: Kind) -> sparse.csr_matrix:
	tab = space.tables()
	if kind is Kind.PRESSURE:
		area = space.mesh.areas
		local = area[:, None, None] * np.einsum("cid,cjd->cij", tab.dphi1, tab.dphi1)
		dofs, n = space.cell_pressure_dofs, space.num_pressure
	else:
		local = np.einsum("cq,cqid,cqjd->cij", tab.weights, tab.dphi2, tab.dphi2)
		dofs, n = space.cell_scalar_dofs, space.num_scalar
	return _symmetrize(_scatter(local, dofs, dofs, (n, n)))


def assemble_mass(space: DofMap, kind: Kind = Kind.VELOCITY) -> sparse.csr_matrix:
	kind = Kind(kind)
	M = _scalar_mass(space, kind)
	if kind is Kind.VELOCITY:
		return sparse.block_diag([M, M], format="csr")
	return M


def assemble_stiffness(space: DofMap, kind: Kind = Kind.VELOCITY) -> sparse.csr_matrix:
	kind = Kind(kind)
	K = _scalar_stiffness(space, kind)
	if kind is Kind.VELOCITY:
		return sparse.block_diag([K, K], format="csr")
	return K


def assemble_divergence(space: DofMap) -> sparse.csr_matrix:
	"""B[q, (c, j)] = integral of psi_q * d_c phi_j."""
	tab = space.tables()
	local = np.concatenate([
		np.einsum("cq,qk,cqj->ckj", tab.weights, tab.phi1, tab.dphi2[..., 0]),
		np.einsum("cq,qk,cqj->ckj", tab.weights, tab.phi1, tab.dphi2[..., 1]),
	], axis=2)
	return _scatter(local, space.cell_pressure_dofs, space.cell_velocity_dofs, (space.num_pressure, space.num_velocity))


def assemble_pressure_gradient(space: DofMap) -> sparse.csr_matrix:
	"""D[q, (c, j)] = integral of d_c psi_q * phi_j, so that D^T p is the load of (grad p, v)."""
	tab = space.tables()
	local = np.concatenate([
		np.einsum("cq,ck,qj->ckj", tab.weights, tab.dphi1[..., 0], tab.phi2),
		np.einsum("cq,ck,qj->ckj", tab.weights, tab.dphi1[..., 1], tab.phi2),
	], axis=2)
	return _scatter(local, space.cell_pressure_dofs, space.cell_velocity_dofs, (space.num_pressure, space.num_velocity))


def assemble_graddiv(space: DofMap) -> sparse.csr_matrix:
	tab = space.tables()
	dx, dy = tab.dphi2[..., 0], tab.dphi2[..., 1]
	block = lambda a, b: np.einsum("cq,cqi,cqj->cij", tab.weights, a, b)  # noqa: E731
	local = np.concatenate([
		np.concatenate([block(dx, dx), block(dx, dy)], axis=2),
		np.concatenate([block(dy, dx), block(dy, dy)], axis=2),
	], axis=1)
	dofs = space.cell_velocity_dofs
	n = space.num_velocity
	return _symmetrize(_scatter(local, dofs, dofs, (n, n)))


def _advector_check(advector: Field, space: DofMap) -> None:
	if advector.kind is not Kind.VELOCITY:
		raise DofMapError("advector must be a velocity field")
	if advector.dofmap.mesh is not space.mesh:
		raise DofMapError("advector lives on a different mesh")


def assemble_convection(advector: Field, space: DofMap) -> sparse.csr_matrix:
	"""C(a)[(c,i), (c,j)] = integral of (a . grad phi_j) phi_i, block-diagonal in the components."""
	_advector_check(advector, space)
	tab = space.tables()
	a = advector.values_at(tab)
	local = np.einsum("cq,qi,cqd,cqjd->cij", tab.weights, tab.phi2, a, tab.dphi2)
	dofs = space.cell_scalar_dofs
	C = _scatter(local, dofs, dofs, (space.num_scalar, space.num_scalar))
	return sparse.block_diag([C, C], format="csr")


def assemble_convection_skew(advector: Field, space: DofMap) -> sparse.csr_matrix:
	"""Matrix of 1/2 ((a.grad v, w) - (a.grad w, v)); exactly antisymmetric."""
	C = assemble_convection(advector, space)
	N = (0.5 * (C - C.T)).tocsr()
	N.sort_indices()
	return N


def assemble_load(space: DofMap, func: Callable, degree: int = FORM_DEGREE) -> np.ndarray:
	"""Load vector of (f, v) for a callable f(x, y) -> (fx, fy)."""
	tab = space.tables(degree)
	x, y = tab.points[..., 0], tab.points[..., 1]
	fx, fy = func(x, y)
	fx = np.broadcast_to(fx, x.shape)
	fy = np.broadcast_to(fy, x.shape)
	dofs = space.cell_scalar_dofs
	n = space.num_scalar
	out = np.zeros(space.num_velocity)
	np.add.at(out[:n], dofs, np.einsum("cq,cq,qi->ci", tab.weights, fx, tab.phi2))
	np.add.at(out[n:], dofs, np.einsum("cq,cq,qi->ci", tab.weights, fy, tab.phi2))
	return out


# boundary conditions

@dataclass(frozen=True, eq=False)
class DirichletBC:
	dofs: np.ndarray
	values: np.ndarray

	@classmethod
	def from_pairs(cls, pairs: Iterable[Tuple[int, float]]) -> "DirichletBC":
		pairs = list(pairs)
		if not pairs:
			return cls(np.empty(0, dtype=np.int64), np.empty(0))
		dofs, values = zip(*pairs)
		return merge_bcs([cls(np.asarray(dofs, dtype=np.int64), np.asarray(values, dtype=float))])


def merge_bcs(bcs: Sequence[DirichletBC]) -> DirichletBC:
	"""Combine constraints; a dof constrained twice must receive the same value."""
	if not bcs:
		return DirichletBC(np.empty(0, dtype=np.int64), np.empty(0))
	dofs = np.concatenate([np.asarray(b.dofs, dtype=np.int64) for b in bcs])
	values = np.concatenate([np.asarray(b.values, dtype=float) for b in bcs])
	order = np.argsort(dofs, kind="stable")
	dofs, values = dofs[order], values[order]
	unique, start = np.unique(dofs, return_index=True)
	first = np.repeat(values[start], np.diff(np.append(start, len(dofs))))
	clash = ~np.isclose(values, first, rtol=1e-12, atol=1e-14)
	if clash.any():
		i = int(np.flatnonzero(clash)[0])
		raise BoundaryConditionError(f"dof {dofs[i]} constrained to both {first[i]!r} and {values[i]!r}")
	return DirichletBC(unique, values[start])


def boundary_condition(space: DofMap, tags: Iterable[Union[Tag, str]], func: Callable) -> DirichletBC:
	"""Velocity constraints on the given tags from func(x, y) -> (ux, uy) at the P2 nodes."""
	parts = []
	nodes = space.scalar_coordinates
	for tag in tags:
		s = space.boundary_scalar_dofs(tag)
		if s.size == 0:
			continue
		ux, uy = func(nodes[s, 0], nodes[s, 1])
		parts.append(DirichletBC(
			np.concatenate([s, s + space.num_scalar]),
			np.concatenate([_as_array(ux, s.size), _as_array(uy, s.size)]),
		))
	return merge_bcs(parts)


def apply_dirichlet(A: sparse.spmatrix, rhs: np.ndarray,
					bcs: Union[DirichletBC, Iterable[Tuple[int, float]]]) -> Tuple[sparse.csr_matrix, np.ndarray]:
	"""Symmetric elimination: constrained rows and columns become identity, the rhs absorbs their coupling."""
	if not isinstance(bcs, DirichletBC):
		bcs = DirichletBC.from_pairs(bcs)
	n = A.shape[0]
	if bcs.dofs.size and (bcs.dofs.min() < 0 or bcs.dofs.max() >= n):
		raise BoundaryConditionError(f"constrained dof out of range [0, {n})")
	mask = np.zeros(n)
	mask[bcs.dofs] = 1.0
	lifted = np.zeros(n)
	lifted[bcs.dofs] = bcs.values
	keep = sparse.diags(1.0 - mask)
	A_bc = (keep @ A @ keep + sparse.diags(mask)).tocsr()
	A_bc.eliminate_zeros()
	A_bc.sort_indices()
	rhs_bc = np.asarray(rhs, dtype=float) - A @ lifted
	rhs_bc[bcs.dofs] = bcs.values
	return A_bc, rhs_bc


# norms and point evaluation

def l2_norm(f: Field) -> float:
	tab = f.dofmap.tables(ERROR_DEGREE)
	vals = f.values_at(tab)
	sq = vals ** 2 if f.kind is Kind.PRESSURE else (vals ** 2).sum(axis=-1)
	return float(np.sqrt(np.sum(tab.weights * sq)))


def h1_seminorm(f: Field) -> float:
	tab = f.dofmap.tables(ERROR_DEGREE)
	g = f.gradients_at(tab)
	sq = (g ** 2).sum(axis=-1) if f.kind is Kind.PRESSURE else (g ** 2).sum(axis=(-1, -2))
	return float(np.sqrt(np.sum(tab.weights * sq)))


def l2_error(f: Field, exact: Callable, degree: int = ERROR_DEGREE) -> float:
	"""L2 distance between a velocity field and a closed-form exact(x, y) -> (ux, uy)."""
	tab = f.dofmap.tables(degree)
	vals = f.values_at(tab)
	ex, ey = exact(tab.points[..., 0], tab.points[..., 1])
	diff = (vals[..., 0] - ex) ** 2 + (vals[..., 1] - ey) ** 2
	return float(np.sqrt(np.sum(tab.weights * diff)))


def h1_error(f: Field, exact_gradient: Callable, degree: int = ERROR_DEGREE) -> float:
	"""H1 seminorm distance; exact_gradient(x, y) returns the 2x2 nested [component][direction] arrays."""
	tab = f.dofmap.tables(degree)
	g = f.gradients_at(tab)
	G = exact_gradient(tab.points[..., 0], tab.points[..., 1])
	diff = np.zeros(tab.weights.shape)
	for c in range(2):
		for d in range(2):
			diff += (g[..., c, d] - np.broadcast_to(G[c][d], diff.shape)) ** 2
	return float(np.sqrt(np.sum(tab.weights * diff)))


def evaluate_in_cells(f: Field, cells: np.ndarray, bary: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
	"""Values and gradients of f at barycentric points of given cells."""
	local = f.cell_coefficients()[cells]
	dlam = f.dofmap.barycentric_derivatives[cells]
	if f.kind is Kind.PRESSURE:
		return np.einsum("nk,nk->n", local, bary), np.einsum("nk,nki->ni", local, dlam)
	phi = p2_values(bary)
	dphi = p2_gradients(bary[:, None, :], dlam)[:, 0]
	return np.einsum("nj,njd->nd", phi, local), np.einsum("njd,nji->ndi", local, dphi)


def evaluate(f: Field, p: Union[Point, Sequence[float], np.ndarray]) -> np.ndarray:
	"""Value of f at one point or an (n, 2) array of points; outside the domain raises DofMapError."""
	single = isinstance(p, Point) or np.ndim(p) == 1
	pts = p.as_array()[None] if isinstance(p, Point) else np.atleast_2d(np.asarray(p, dtype=float))
	cells, bary = f.dofmap.mesh.locate(pts)
	values, _ = evaluate_in_cells(f, cells, bary)
	return values[0] if single else values
