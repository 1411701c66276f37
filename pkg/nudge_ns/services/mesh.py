from __future__ import annotations
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import hashlib
import logging
import math

import numpy as np
from scipy.spatial import cKDTree

from .errors import DofMapError, MeshFormatError, MeshValidationError


logger = logging.getLogger(__name__)

# local edge k is opposite local vertex k
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]], dtype=np.int64)

CHANNEL_LENGTH = 2.2
CHANNEL_HEIGHT = 0.41
BLOCK_LOWER = (0.15, 0.15)
BLOCK_UPPER = (0.25, 0.25)


class Tag(str, Enum):
	WALL = "WALL"
	INFLOW = "INFLOW"
	OUTFLOW = "OUTFLOW"
	BLOCK = "BLOCK"


@dataclass(frozen=True)
class Point:
	x: float
	y: float

	def __post_init__(self) -> None:
		if not (math.isfinite(self.x) and math.isfinite(self.y)):
			raise ValueError(f"non-finite point ({self.x}, {self.y})")

	def as_array(self) -> np.ndarray:
		return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True, eq=False)
class Mesh:
	"""Conforming triangulation with tagged boundary edges.

	Arrays are frozen on construction; derived topology and geometry are cached.
	"""

	vertices: np.ndarray
	cells: np.ndarray
	boundary_edges: np.ndarray
	boundary_tags: Tuple[Tag, ...]

	def __post_init__(self) -> None:
		vertices = np.array(self.vertices, dtype=float).reshape(-1, 2)
		cells = np.array(self.cells, dtype=np.int64).reshape(-1, 3)
		edges = np.array(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
		tags = tuple(Tag(t) for t in self.boundary_tags)
		if len(tags) != len(edges):
			raise MeshValidationError(f"{len(edges)} boundary edges but {len(tags)} tags")
		for arr in (vertices, cells, edges):
			arr.setflags(write=False)
		object.__setattr__(self, "vertices", vertices)
		object.__setattr__(self, "cells", cells)
		object.__setattr__(self, "boundary_edges", edges)
		object.__setattr__(self, "boundary_tags", tags)

	@property
	def num_vertices(self) -> int:
		return int(self.vertices.shape[0])

	@property
	def num_cells(self) -> int:
		return int(self.cells.shape[0])

	@property
	def num_edges(self) -> int:
		return int(self.edges.shape[0])

	@cached_property
	def _topology(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
		local = np.sort(self.cells[:, LOCAL_EDGES], axis=2).reshape(-1, 2)
		edges, inverse, counts = np.unique(local, axis=0, return_inverse=True, return_counts=True)
		cell_edges = np.asarray(inverse).reshape(-1, 3)
		return edges, cell_edges, counts

	@property
	def edges(self) -> np.ndarray:
		"""Unique edges as sorted vertex pairs."""
		return self._topology[0]

	@property
	def cell_edges(self) -> np.ndarray:
		"""(NC, 3) global edge index of local edge k (opposite local vertex k)."""
		return self._topology[1]

	@property
	def edge_cell_counts(self) -> np.ndarray:
		return self._topology[2]

	@cached_property
	def _edge_lookup(self) -> Dict[Tuple[int, int], int]:
		return {(int(a), int(b)): i for i, (a, b) in enumerate(self.edges)}

	def edge_index(self, a: int, b: int) -> int:
		key = (min(a, b), max(a, b))
		try:
			return self._edge_lookup[key]
		except KeyError:
			raise MeshValidationError(f"({a}, {b}) is not an edge of the mesh") from None

	@cached_property
	def jacobians(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
		"""Affine maps of the reference triangle: J (NC,2,2), det J (NC,), J^-1 (NC,2,2)."""
		p = self.vertices[self.cells]
		jac = np.empty((self.num_cells, 2, 2))
		jac[:, :, 0] = p[:, 1] - p[:, 0]
		jac[:, :, 1] = p[:, 2] - p[:, 0]
		det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
		inv = np.empty_like(jac)
		with np.errstate(divide="ignore", invalid="ignore"):
			inv[:, 0, 0] = jac[:, 1, 1] / det
			inv[:, 0, 1] = -jac[:, 0, 1] / det
			inv[:, 1, 0] = -jac[:, 1, 0] / det
			inv[:, 1, 1] = jac[:, 0, 0] / det
		return jac, det, inv

	@property
	def signed_areas(self) -> np.ndarray:
		return 0.5 * self.jacobians[1]

	@property
	def areas(self) -> np.ndarray:
		return np.abs(self.signed_areas)

	@property
	def centroids(self) -> np.ndarray:
		return self.vertices[self.cells].mean(axis=1)

	@cached_property
	def diameters(self) -> np.ndarray:
		p = self.vertices[self.cells]
		lengths = np.linalg.norm(p[:, LOCAL_EDGES[:, 0]] - p[:, LOCAL_EDGES[:, 1]], axis=2)
		return lengths.max(axis=1)

	@property
	def h(self) -> float:
		return float(self.diameters.max())

	@property
	def bbox(self) -> Tuple[float, float, float, float]:
		lo = self.vertices.min(axis=0)
		hi = self.vertices.max(axis=0)
		return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])

	@property
	def tags(self) -> frozenset:
		return frozenset(self.boundary_tags)

	def edges_with_tag(self, tag: Union[Tag, str]) -> np.ndarray:
		tag = Tag(tag)
		mask = np.array([t is tag for t in self.boundary_tags], dtype=bool)
		return self.boundary_edges[mask]

	def tag_length(self, tag: Union[Tag, str]) -> float:
		e = self.edges_with_tag(tag)
		if len(e) == 0:
			return 0.0
		return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).sum())

	@cached_property
	def boundary_cells(self) -> np.ndarray:
		"""Cell adjacent to each boundary edge, and the local edge index inside it."""
		owner = {}
		for c, row in enumerate(self.cell_edges):
			for k, e in enumerate(row):
				if self.edge_cell_counts[e] == 1:
					owner[int(e)] = (c, k)
		out = np.empty((len(self.boundary_edges), 2), dtype=np.int64)
		for i, (a, b) in enumerate(self.boundary_edges):
			out[i] = owner[self.edge_index(int(a), int(b))]
		return out

	def fingerprint(self) -> str:
		"""sha256 over coordinates, connectivity and tags; used to pair archives with meshes."""
		digest = hashlib.sha256()
		digest.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
		digest.update(np.ascontiguousarray(self.cells, dtype="<i8").tobytes())
		digest.update(np.ascontiguousarray(self.boundary_edges, dtype="<i8").tobytes())
		digest.update(",".join(t.value for t in self.boundary_tags).encode("ascii"))
		return digest.hexdigest()

	def validate(self) -> "Mesh":
		nv = self.num_vertices
		if not np.all(np.isfinite(self.vertices)):
			raise MeshValidationError("non-finite vertex coordinates")
		if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= nv):
			raise MeshValidationError("cell references a vertex index out of range")
		if self.boundary_edges.size and (self.boundary_edges.min() < 0 or self.boundary_edges.max() >= nv):
			raise MeshValidationError("boundary edge references a vertex index out of range")
		bad = np.flatnonzero(self.signed_areas <= 0.0)
		if bad.size:
			raise MeshValidationError(f"{bad.size} cells with non-positive signed area (first: cell {bad[0]})")
		counts = self.edge_cell_counts
		if np.any(counts > 2):
			raise MeshValidationError("edge shared by more than two cells")
		topo_boundary = {tuple(e) for e in self.edges[counts == 1].tolist()}
		listed: Dict[Tuple[int, int], Tag] = {}
		for (a, b), tag in zip(self.boundary_edges.tolist(), self.boundary_tags):
			key = (min(a, b), max(a, b))
			if key in listed:
				raise MeshValidationError(f"boundary edge {key} tagged more than once")
			listed[key] = tag
		missing = topo_boundary - listed.keys()
		extra = listed.keys() - topo_boundary
		if missing:
			raise MeshValidationError(f"{len(missing)} topological boundary edges carry no tag (e.g. {sorted(missing)[0]})")
		if extra:
			raise MeshValidationError(f"{len(extra)} tagged edges are not on the boundary (e.g. {sorted(extra)[0]})")
		return self

	# point location

	@cached_property
	def _centroid_tree(self) -> cKDTree:
		return cKDTree(self.centroids)

	def barycentric(self, cells: np.ndarray, points: np.ndarray) -> np.ndarray:
		_, _, inv = self.jacobians
		origin = self.vertices[self.cells[cells, 0]]
		ref = np.einsum("nij,nj->ni", inv[cells], points - origin)
		return np.column_stack([1.0 - ref[:, 0] - ref[:, 1], ref[:, 0], ref[:, 1]])

	def locate(self, points: np.ndarray, tol: float = 1e-10, strict: bool = True) -> Tuple[np.ndarray, np.ndarray]:
		"""Find the containing cell and barycentric coordinates of each point.

		With strict=False, points outside the mesh get cell index -1.
		"""
		points = np.atleast_2d(np.asarray(points, dtype=float))
		npts = points.shape[0]
		found = np.full(npts, -1, dtype=np.int64)
		bary = np.zeros((npts, 3))
		k = min(12, self.num_cells)
		_, candidates = self._centroid_tree.query(points, k=k)
		candidates = np.asarray(candidates).reshape(npts, k)
		for j in range(k):
			todo = np.flatnonzero(found < 0)
			if todo.size == 0:
				break
			cand = candidates[todo, j]
			lam = self.barycentric(cand, points[todo])
			ok = lam.min(axis=1) >= -tol
			found[todo[ok]] = cand[ok]
			bary[todo[ok]] = lam[ok]
		for i in np.flatnonzero(found < 0):
			lam = self.barycentric(np.arange(self.num_cells), np.repeat(points[i:i + 1], self.num_cells, axis=0))
			hit = np.flatnonzero(lam.min(axis=1) >= -tol)
			if hit.size:
				found[i] = hit[0]
				bary[i] = lam[hit[0]]
		if strict and np.any(found < 0):
			first = points[np.flatnonzero(found < 0)[0]]
			raise DofMapError(f"point ({first[0]:.6g}, {first[1]:.6g}) lies outside the domain")
		return found, bary


@dataclass(frozen=True, eq=False)
class CoarseGrid:
	"""Structured N x N partition of a bounding box, each box split into two triangles."""

	mesh: Mesh
	spacing: float
	n: int
	bbox: Tuple[float, float, float, float]

	@property
	def box_size(self) -> Tuple[float, float]:
		x0, x1, y0, y1 = self.bbox
		return (x1 - x0) / self.n, (y1 - y0) / self.n

	@property
	def num_boxes(self) -> int:
		return self.n * self.n

	def box_of(self, points: np.ndarray) -> np.ndarray:
		"""Box index (row-major in x) of each point; -1 outside the bounding box."""
		x0, x1, y0, y1 = self.bbox
		dx, dy = self.box_size
		points = np.atleast_2d(points)
		eps = 1e-12 * max(x1 - x0, y1 - y0)
		ix = np.floor((points[:, 0] - x0) / dx).astype(np.int64)
		iy = np.floor((points[:, 1] - y0) / dy).astype(np.int64)
		ix = np.where(np.abs(points[:, 0] - x1) <= eps, self.n - 1, ix)
		iy = np.where(np.abs(points[:, 1] - y1) <= eps, self.n - 1, iy)
		inside = (ix >= 0) & (ix < self.n) & (iy >= 0) & (iy < self.n)
		return np.where(inside, iy * self.n + ix, -1)


def _structured_cells(nx: int, ny: int, keep: np.ndarray, alternate: bool) -> np.ndarray:
	"""Two triangles per kept rectangle of an (nx+1) x (ny+1) node grid, row-major node ids."""
	cells: List[Tuple[int, int, int]] = []
	for j in range(ny):
		for i in range(nx):
			if not keep[j, i]:
				continue
			v00 = j * (nx + 1) + i
			v10 = v00 + 1
			v01 = v00 + nx + 1
			v11 = v01 + 1
			if alternate and (i + j) % 2 == 1:
				cells.append((v00, v10, v01))
				cells.append((v10, v11, v01))
			else:
				cells.append((v00, v10, v11))
				cells.append((v00, v11, v01))
	return np.array(cells, dtype=np.int64).reshape(-1, 3)


def rectangle_mesh(x0: float, x1: float, y0: float, y1: float, nx: int, ny: int,
				   tags: Optional[Dict[str, Tag]] = None) -> Mesh:
	"""Uniform triangulation of [x0,x1] x [y0,y1]; `tags` maps side name (left/right/bottom/top) to a tag."""
	if nx < 1 or ny < 1:
		raise MeshValidationError("rectangle_mesh needs at least one subdivision per side")
	tags = {"left": Tag.WALL, "right": Tag.WALL, "bottom": Tag.WALL, "top": Tag.WALL, **(tags or {})}
	xs = np.linspace(x0, x1, nx + 1)
	ys = np.linspace(y0, y1, ny + 1)
	gx, gy = np.meshgrid(xs, ys)
	vertices = np.column_stack([gx.ravel(), gy.ravel()])
	cells = _structured_cells(nx, ny, np.ones((ny, nx), dtype=bool), alternate=False)
	node = lambda i, j: j * (nx + 1) + i  # noqa: E731
	edges: List[Tuple[int, int]] = []
	edge_tags: List[Tag] = []
	for i in range(nx):
		edges.append((node(i, 0), node(i + 1, 0)))
		edge_tags.append(tags["bottom"])
		edges.append((node(i + 1, ny), node(i, ny)))
		edge_tags.append(tags["top"])
	for j in range(ny):
		edges.append((node(nx, j), node(nx, j + 1)))
		edge_tags.append(tags["right"])
		edges.append((node(0, j + 1), node(0, j)))
		edge_tags.append(tags["left"])
	return Mesh(vertices, cells, np.array(edges), tuple(edge_tags)).validate()


def unit_square_mesh(n: int) -> Mesh:
	"""(n+1)^2 vertices, 2 n^2 cells, h = sqrt(2)/n, every boundary edge tagged WALL."""
	if int(n) != n or n < 1:
		raise MeshValidationError(f"unit_square_mesh needs a positive integer, got {n!r}")
	return rectangle_mesh(0.0, 1.0, 0.0, 1.0, int(n), int(n))


def _graded_axis(breaks: Sequence[float], target_h: float) -> Tuple[np.ndarray, List[int]]:
	"""Subdivide each interval between consecutive breaks into pieces no longer than target_h."""
	coords: List[float] = []
	positions = [0]
	for a, b in zip(breaks[:-1], breaks[1:]):
		pieces = max(1, int(math.ceil((b - a) / target_h - 1e-9)))
		coords.extend(np.linspace(a, b, pieces + 1)[:-1].tolist())
		positions.append(positions[-1] + pieces)
	coords.append(breaks[-1])
	return np.array(coords), positions


def channel_block_mesh(target_h: float) -> Mesh:
	"""2.2 x 0.41 channel minus the 0.1-wide block centred at (0.2, 0.2).

	Structured generator: grid lines pass through the block sides so the block
	perimeter is resolved exactly; rectangles are split along alternating diagonals.
	"""
	if not (0.0 < target_h < BLOCK_UPPER[0] - BLOCK_LOWER[0]):
		raise MeshValidationError(f"target_h={target_h} is too coarse to resolve the block (need 0 < h < 0.1)")
	xs, xpos = _graded_axis([0.0, BLOCK_LOWER[0], BLOCK_UPPER[0], CHANNEL_LENGTH], target_h)
	ys, ypos = _graded_axis([0.0, BLOCK_LOWER[1], BLOCK_UPPER[1], CHANNEL_HEIGHT], target_h)
	nx, ny = len(xs) - 1, len(ys) - 1
	ia, ib = xpos[1], xpos[2]
	ja, jb = ypos[1], ypos[2]

	keep = np.ones((ny, nx), dtype=bool)
	keep[ja:jb, ia:ib] = False
	gx, gy = np.meshgrid(xs, ys)
	grid_vertices = np.column_stack([gx.ravel(), gy.ravel()])
	grid_cells = _structured_cells(nx, ny, keep, alternate=True)

	node_inside = np.zeros((ny + 1, nx + 1), dtype=bool)
	node_inside[ja + 1:jb, ia + 1:ib] = True
	used = ~node_inside.ravel()
	renumber = np.full(grid_vertices.shape[0], -1, dtype=np.int64)
	renumber[used] = np.arange(int(used.sum()))
	node = lambda i, j: int(renumber[j * (nx + 1) + i])  # noqa: E731

	edges: List[Tuple[int, int]] = []
	edge_tags: List[Tag] = []

	def add(a: int, b: int, tag: Tag) -> None:
		edges.append((a, b))
		edge_tags.append(tag)

	for i in range(nx):
		add(node(i, 0), node(i + 1, 0), Tag.WALL)
		add(node(i + 1, ny), node(i, ny), Tag.WALL)
	for j in range(ny):
		add(node(nx, j), node(nx, j + 1), Tag.OUTFLOW)
		add(node(0, j + 1), node(0, j), Tag.INFLOW)
	for i in range(ia, ib):
		add(node(i, ja), node(i + 1, ja), Tag.BLOCK)
		add(node(i + 1, jb), node(i, jb), Tag.BLOCK)
	for j in range(ja, jb):
		add(node(ia, j), node(ia, j + 1), Tag.BLOCK)
		add(node(ib, j + 1), node(ib, j), Tag.BLOCK)

	mesh = Mesh(grid_vertices[used], renumber[grid_cells], np.array(edges), tuple(edge_tags)).validate()
	logger.debug("channel mesh: %d vertices, %d cells, h=%.4g", mesh.num_vertices, mesh.num_cells, mesh.h)
	return mesh


def barycentric_refine(m: Mesh) -> Mesh:
	"""Split every cell into three around its barycenter; boundary edges and tags are unchanged."""
	nv = m.num_vertices
	centers = nv + np.arange(m.num_cells, dtype=np.int64)
	a, b, c = m.cells[:, 0], m.cells[:, 1], m.cells[:, 2]
	cells = np.stack([
		np.column_stack([a, b, centers]),
		np.column_stack([b, c, centers]),
		np.column_stack([c, a, centers]),
	], axis=1).reshape(-1, 3)
	vertices = np.vstack([m.vertices, m.centroids])
	return Mesh(vertices, cells, m.boundary_edges.copy(), m.boundary_tags).validate()


def coarse_grid(mesh: Mesh, n: int) -> CoarseGrid:
	"""N x N coarse partition of the mesh bounding box."""
	if int(n) != n or n < 1:
		raise MeshValidationError(f"coarse grid needs a positive integer N, got {n!r}")
	n = int(n)
	x0, x1, y0, y1 = mesh.bbox
	coarse = rectangle_mesh(x0, x1, y0, y1, n, n)
	return CoarseGrid(mesh=coarse, spacing=coarse.h, n=n, bbox=(x0, x1, y0, y1))


def save_mesh(m: Mesh, path: Union[str, Path]) -> None:
	lines = [f"{m.num_vertices} {m.num_cells} {len(m.boundary_edges)}"]
	lines.extend(f"{x!r} {y!r}" for x, y in m.vertices.tolist())
	lines.extend(f"{i} {j} {k}" for i, j, k in m.cells.tolist())
	lines.extend(f"{i} {j} {t.value}" for (i, j), t in zip(m.boundary_edges.tolist(), m.boundary_tags))
	Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _records(text: str) -> Iterable[Tuple[int, List[str]]]:
	for lineno, raw in enumerate(text.splitlines(), start=1):
		tokens = raw.split()
		if tokens:
			yield lineno, tokens


def load_mesh(path: Union[str, Path], normalize_orientation: bool = False) -> Mesh:
	"""Read the ASCII mesh format; clockwise cells are rejected unless normalize_orientation is set."""
	text = Path(path).read_text(encoding="ascii")
	records = list(_records(text))
	if not records:
		raise MeshFormatError("empty mesh file", line=1)
	header_line, header = records[0]
	if len(header) != 3:
		raise MeshFormatError("header must be 'NV NC NB'", line=header_line)
	try:
		nv, nc, nb = (int(t) for t in header)
	except ValueError:
		raise MeshFormatError("header counts must be integers", line=header_line) from None
	if min(nv, nc, nb) < 0:
		raise MeshFormatError("header counts must be non-negative", line=header_line)
	body = records[1:]
	if len(body) < nv + nc + nb:
		last = body[-1][0] if body else header_line
		raise MeshFormatError(f"expected {nv + nc + nb} records after the header, found {len(body)}", line=last + 1)
	if len(body) > nv + nc + nb:
		raise MeshFormatError("unexpected trailing records", line=body[nv + nc + nb][0])

	vertices = np.empty((nv, 2))
	for idx, (lineno, tokens) in enumerate(body[:nv]):
		if len(tokens) != 2:
			raise MeshFormatError("vertex record must be 'x y'", line=lineno)
		try:
			vertices[idx] = [float(tokens[0]), float(tokens[1])]
		except ValueError:
			raise MeshFormatError("vertex coordinates must be real numbers", line=lineno) from None
		if not np.all(np.isfinite(vertices[idx])):
			raise MeshFormatError("vertex coordinates must be finite", line=lineno)

	def index_record(lineno: int, tokens: Sequence[str]) -> List[int]:
		try:
			values = [int(t) for t in tokens]
		except ValueError:
			raise MeshFormatError("vertex indices must be integers", line=lineno) from None
		for v in values:
			if v < 0 or v >= nv:
				raise MeshFormatError(f"vertex index {v} out of range [0, {nv})", line=lineno)
		return values

	cells = np.empty((nc, 3), dtype=np.int64)
	for idx, (lineno, tokens) in enumerate(body[nv:nv + nc]):
		if len(tokens) != 3:
			raise MeshFormatError("cell record must be 'i j k'", line=lineno)
		cells[idx] = index_record(lineno, tokens)

	edges = np.empty((nb, 2), dtype=np.int64)
	tags: List[Tag] = []
	for idx, (lineno, tokens) in enumerate(body[nv + nc:]):
		if len(tokens) != 3:
			raise MeshFormatError("boundary record must be 'i j TAG'", line=lineno)
		edges[idx] = index_record(lineno, tokens[:2])
		try:
			tags.append(Tag(tokens[2].upper()))
		except ValueError:
			raise MeshFormatError(f"unknown boundary tag {tokens[2]!r}", line=lineno) from None

	p = vertices[cells]
	signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
	clockwise = signed < 0
	if clockwise.any():
		if not normalize_orientation:
			first = int(np.flatnonzero(clockwise)[0])
			raise MeshValidationError(f"cell {first} has negative signed area")
		cells[clockwise] = cells[clockwise][:, [0, 2, 1]]
		logger.info("reoriented %d clockwise cells from %s", int(clockwise.sum()), path)
	return Mesh(vertices, cells, edges, tuple(tags)).validate()
