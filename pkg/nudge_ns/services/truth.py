from __future__ import annotations
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .errors import ArchiveError, ConfigError, TruthCoverageError
from .fem import DofMap, Field, Kind, interpolate
from .mesh import CHANNEL_HEIGHT, CHANNEL_LENGTH, Tag
from .metrics import TimeSeries
from .schemes import Problem, SchemeConfig, State, StateMetric, StateObserver, initial_state, run


logger = logging.getLogger(__name__)

CHANNEL_NU = 1e-3
SNAPSHOT_DTYPE = "<f8"


class SourceKind(str, Enum):
	ANALYTIC = "analytic"
	STORED = "stored"
	MEMORY = "memory"


class Policy(str, Enum):
	STRICT = "strict"
	LINEAR = "linear"


@dataclass(frozen=True)
class ManufacturedSolution:
	"""u = (e^t cos y, e^t sin x), p = (x - y)(1 + t); divergence-free for every t."""

	nu: float = 1.0

	def velocity(self, t: float):
		et = math.exp(t)
		return lambda x, y: (et * np.cos(y), et * np.sin(x))

	def velocity_gradient(self, t: float):
		et = math.exp(t)
		return lambda x, y: ((0.0 * x, -et * np.sin(y)), (et * np.cos(x), 0.0 * y))

	def pressure(self, t: float):
		return lambda x, y: (x - y) * (1.0 + t)

	def forcing(self, t: float):
		"""f = u_t + u.grad u + grad p - nu lap u in closed form."""
		et = math.exp(t)
		e2t = et * et
		nu = self.nu

		def f(x, y):
			fx = (1.0 + nu) * et * np.cos(y) - e2t * np.sin(x) * np.sin(y) + (1.0 + t)
			fy = (1.0 + nu) * et * np.sin(x) + e2t * np.cos(x) * np.cos(y) - (1.0 + t)
			return fx, fy

		return f


def analytic_solution(t: float, nu: float = 1.0):
	sol = ManufacturedSolution(nu)
	return sol.velocity(t), sol.pressure(t)


def analytic_forcing(t: float, nu: float = 1.0):
	return ManufacturedSolution(nu).forcing(t)


def inflow_profile(y):
	return 6.0 / CHANNEL_HEIGHT ** 2 * y * (CHANNEL_HEIGHT - y)


def manufactured_problem(space: DofMap, nu: float = 1.0, exact_initial: bool = False) -> Problem:
	sol = ManufacturedSolution(nu)
	return Problem(
		space=space,
		dirichlet_tags=tuple(sorted(space.mesh.tags, key=lambda t: t.value)),
		boundary=sol.velocity,
		forcing=sol.forcing,
		initial_velocity=sol.velocity(0.0) if exact_initial else None,
		initial_pressure=sol.pressure(0.0) if exact_initial else None,
		name="manufactured",
	)


def channel_problem(space: DofMap, nu: float = CHANNEL_NU) -> Problem:
	"""Parabolic profile on inflow and outflow, no-slip on walls and block, no forcing."""
	edge = 1e-9 * CHANNEL_LENGTH

	def boundary(t: float):
		def g(x, y):
			open_end = (x <= edge) | (x >= CHANNEL_LENGTH - edge)
			return np.where(open_end, inflow_profile(y), 0.0), np.zeros_like(y)
		return g

	return Problem(
		space=space,
		dirichlet_tags=(Tag.WALL, Tag.INFLOW, Tag.OUTFLOW, Tag.BLOCK),
		boundary=boundary,
		steady_boundary=True,
		name="channel",
	)


class MeasurementSource(ABC):
	kind: SourceKind

	def __init__(self, space: DofMap) -> None:
		self.space = space

	@abstractmethod
	def covers(self, t: float) -> bool:
		...

	@abstractmethod
	def sample(self, t: float) -> Field:
		...


class AnalyticSource(MeasurementSource):
	kind = SourceKind.ANALYTIC

	def __init__(self, space: DofMap, solution: Optional[ManufacturedSolution] = None) -> None:
		super().__init__(space)
		self.solution = solution or ManufacturedSolution()

	def covers(self, t: float) -> bool:
		return math.isfinite(t)

	def closed_form(self, t: float):
		return self.solution.velocity(t)

	def closed_form_gradient(self, t: float):
		return self.solution.velocity_gradient(t)

	def sample(self, t: float) -> Field:
		if not self.covers(t):
			raise TruthCoverageError(f"analytic truth undefined at t={t}")
		return interpolate(self.space, Kind.VELOCITY, self.solution.velocity(t))


def _is_multiple(value: float, base: float) -> bool:
	ratio = value / base
	return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, abs(ratio))


class SnapshotSource(MeasurementSource):
	"""Velocity snapshots every `interval` time units, starting at t=0.

	`step` is the time step of the run that produced the snapshots (`interval` when
	every step was kept). The linear policy interpolates between snapshots only at
	multiples of `step`; any other time is refused as under the strict policy.
	"""

	def __init__(self, space: DofMap, interval: float, policy: Union[Policy, str] = Policy.STRICT,
				 step: Optional[float] = None) -> None:
		super().__init__(space)
		if not interval > 0.0:
			raise ArchiveError(f"snapshot interval must be positive, got {interval}")
		self.interval = float(interval)
		self.step = self.interval if step is None else float(step)
		if not self.step > 0.0 or not _is_multiple(self.interval, self.step):
			raise ArchiveError(f"snapshot interval {self.interval:g} is not a multiple of the step {self.step:g}")
		self.policy = Policy(policy)

	@property
	@abstractmethod
	def count(self) -> int:
		...

	@abstractmethod
	def snapshot(self, k: int) -> np.ndarray:
		...

	def _position(self, t: float) -> Tuple[float, int, bool]:
		pos = t / self.interval
		k = int(round(pos))
		return pos, k, abs(pos - k) <= 1e-9 * max(1.0, abs(pos))

	def covers(self, t: float) -> bool:
		pos, k, exact = self._position(t)
		if exact:
			return 0 <= k < self.count
		return self.policy is Policy.LINEAR and _is_multiple(t, self.step) and 0.0 <= pos <= self.count - 1

	def check_step(self, dt: float) -> None:
		"""Refuse an assimilating dt whose step times are not all reference step times."""
		base = self.step if self.policy is Policy.LINEAR else self.interval
		if not _is_multiple(dt, base) or dt < base * (1.0 - 1e-9):
			raise TruthCoverageError(
				f"dt={dt:g} is not an integer multiple of {base:g}, the {self.policy.value} truth time grid"
			)

	def sample(self, t: float) -> Field:
		pos, k, exact = self._position(t)
		if exact and 0 <= k < self.count:
			return Field(self.space, Kind.VELOCITY, self.snapshot(k))
		if not self.covers(t):
			raise TruthCoverageError(
				f"no {self.policy.value} truth sample at t={t:.9g} "
				f"(snapshots every {self.interval:g} for t in [0, {(self.count - 1) * self.interval:g}])"
			)
		lo = int(math.floor(pos))
		theta = pos - lo
		coeffs = (1.0 - theta) * self.snapshot(lo) + theta * self.snapshot(lo + 1)
		return Field(self.space, Kind.VELOCITY, coeffs)


class InMemorySource(SnapshotSource):
	kind = SourceKind.MEMORY

	def __init__(self, space: DofMap, interval: float, snapshots: Optional[Sequence[np.ndarray]] = None,
				 policy: Union[Policy, str] = Policy.STRICT, step: Optional[float] = None) -> None:
		super().__init__(space, interval, policy, step)
		self._snapshots: List[np.ndarray] = [np.array(s, dtype=float) for s in (snapshots or [])]

	@property
	def count(self) -> int:
		return len(self._snapshots)

	def snapshot(self, k: int) -> np.ndarray:
		return self._snapshots[k]

	def append(self, coefficients: np.ndarray) -> None:
		self._snapshots.append(np.array(coefficients, dtype=float))

	def record(self, state: State) -> None:
		"""Observer storing the un-projected velocity of every step."""
		self.append(state.u.coefficients)


@dataclass(frozen=True)
class ArchiveMeta:
	mesh_hash: str
	dt: float
	stride: int
	count: int
	nu: float
	dofs: int

	@property
	def interval(self) -> float:
		return self.dt * self.stride

	def to_text(self) -> str:
		return (
			f"mesh_hash {self.mesh_hash}\n"
			f"dt {self.dt!r}\n"
			f"stride {self.stride}\n"
			f"count {self.count}\n"
			f"nu {self.nu!r}\n"
			f"dofs {self.dofs}\n"
		)

	@classmethod
	def from_text(cls, text: str) -> "ArchiveMeta":
		fields: Dict[str, str] = {}
		for lineno, raw in enumerate(text.splitlines(), start=1):
			parts = raw.split()
			if not parts:
				continue
			if len(parts) != 2:
				raise ArchiveError(f"meta line {lineno}: expected 'key value'")
			fields[parts[0]] = parts[1]
		try:
			return cls(
				mesh_hash=fields["mesh_hash"],
				dt=float(fields["dt"]),
				stride=int(fields["stride"]),
				count=int(fields["count"]),
				nu=float(fields["nu"]),
				dofs=int(fields["dofs"]),
			)
		except KeyError as exc:
			raise ArchiveError(f"meta lacks {exc.args[0]!r}") from None
		except ValueError as exc:
			raise ArchiveError(f"malformed meta value: {exc}") from None


def _snapshot_path(root: Path, k: int) -> Path:
	return root / f"snapshot_{k:06d}.bin"


@retry(retry=retry_if_exception_type(OSError), wait=wait_exponential(multiplier=0.5, min=0.5, max=4),
	   stop=stop_after_attempt(3), reraise=True)
def _write_bytes(path: Path, payload: bytes) -> None:
	tmp = path.with_suffix(path.suffix + ".tmp")
	tmp.write_bytes(payload)
	tmp.replace(path)


class ArchiveWriter:
	"""Appends little-endian float64 snapshots and keeps `meta` current."""

	def __init__(self, path: Union[str, Path], mesh_hash: str, dt: float, stride: int, nu: float, dofs: int) -> None:
		if stride < 1:
			raise ArchiveError(f"stride must be a positive integer, got {stride}")
		self.root = Path(path)
		self.root.mkdir(parents=True, exist_ok=True)
		self.mesh_hash = mesh_hash
		self.dt = float(dt)
		self.stride = int(stride)
		self.nu = float(nu)
		self.dofs = int(dofs)
		self.count = 0

	@property
	def meta(self) -> ArchiveMeta:
		return ArchiveMeta(self.mesh_hash, self.dt, self.stride, self.count, self.nu, self.dofs)

	def append(self, coefficients: np.ndarray) -> None:
		data = np.ascontiguousarray(coefficients, dtype=SNAPSHOT_DTYPE)
		if data.shape != (self.dofs,):
			raise ArchiveError(f"snapshot has shape {data.shape}, archive stores {self.dofs} dofs")
		_write_bytes(_snapshot_path(self.root, self.count), data.tobytes())
		self.count += 1
		_write_bytes(self.root / "meta", self.meta.to_text().encode("ascii"))


class StoredReference(SnapshotSource):
	kind = SourceKind.STORED

	def __init__(self, space: DofMap, root: Path, meta: ArchiveMeta, policy: Union[Policy, str] = Policy.STRICT) -> None:
		super().__init__(space, meta.interval, policy, step=meta.dt)
		self.root = root
		self.meta = meta
		self._cache: Dict[int, np.ndarray] = {}

	@classmethod
	def open(cls, path: Union[str, Path], space: DofMap, policy: Union[Policy, str] = Policy.STRICT) -> "StoredReference":
		root = Path(path)
		try:
			meta = ArchiveMeta.from_text((root / "meta").read_text(encoding="ascii"))
		except FileNotFoundError:
			raise ArchiveError(f"{root} is not a snapshot archive (no meta file)") from None
		mesh_hash = space.mesh.fingerprint()
		if meta.mesh_hash != mesh_hash:
			raise ArchiveError(f"archive {root} was written for mesh {meta.mesh_hash[:12]}, not {mesh_hash[:12]}")
		if meta.dofs != space.num_velocity:
			raise ArchiveError(f"archive stores {meta.dofs} dofs, space has {space.num_velocity}")
		return cls(space, root, meta, policy)

	@property
	def count(self) -> int:
		return self.meta.count

	def snapshot(self, k: int) -> np.ndarray:
		if k in self._cache:
			return self._cache[k]
		path = _snapshot_path(self.root, k)
		try:
			data = np.fromfile(path, dtype=SNAPSHOT_DTYPE)
		except FileNotFoundError:
			raise ArchiveError(f"missing snapshot {path.name}") from None
		if data.shape != (self.meta.dofs,):
			raise ArchiveError(f"snapshot {path.name} holds {data.size} values, expected {self.meta.dofs}")
		data = data.astype(float)
		if len(self._cache) >= 8:
			self._cache.pop(next(iter(self._cache)))
		self._cache[k] = data
		return data


def sample_truth(src: MeasurementSource, t: float) -> Field:
	return src.sample(t)


def generate_reference(space: DofMap, cfg: SchemeConfig, problem: Problem, path: Union[str, Path],
					   stride: int = 1, metrics: Optional[Mapping[str, StateMetric]] = None,
					   observers: Sequence[StateObserver] = ()) -> Tuple[StoredReference, TimeSeries]:
	"""Run a coupled scheme and archive the velocity at t=0 and every `stride` steps."""
	if cfg.kind.family != "coupled":
		raise ConfigError(f"references are generated with a coupled scheme, not {cfg.kind.value}")
	writer = ArchiveWriter(path, space.mesh.fingerprint(), cfg.dt, stride, cfg.nu, space.num_velocity)
	start = initial_state(problem)
	writer.append(start.u.coefficients)

	def archive(state: State) -> None:
		if state.n % stride == 0:
			writer.append(state.u.coefficients)

	series = run(cfg, problem, metrics=metrics, observers=[archive, *observers], initial=start,
				 metadata={"reference": str(path)})
	logger.info("reference archive %s: %d snapshots", path, writer.count)
	return StoredReference.open(path, space), series
