from __future__ import annotations
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union
import itertools
import logging

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from .cda import Mode
from .errors import ConfigError
from .schemes import SchemeKind
from .truth import CHANNEL_NU, Policy


logger = logging.getLogger(__name__)

SECTIONS = ("mesh", "scheme", "cda", "truth", "output", "sweep")
METRICS = ("l2_error", "h1_error", "u_l2", "divergence", "drag", "lift", "iterations", "residual")

Raw = Dict[str, Dict[str, Tuple[str, Optional[int]]]]


def parse_real(value: Any) -> Any:
	"""Accept plain numbers and fractions such as `1/32`."""
	if isinstance(value, str):
		text = value.strip()
		if "/" in text:
			try:
				return float(Fraction(text))
			except (ValueError, ZeroDivisionError):
				return value
		try:
			return float(text)
		except ValueError:
			return value
	return value


def parse_list(value: Any) -> Any:
	if isinstance(value, str):
		return [item.strip() for item in value.split(",") if item.strip()]
	return value


Real = Annotated[float, BeforeValidator(parse_real)]
Names = Annotated[List[str], BeforeValidator(parse_list)]
SweepSection = Dict[str, Names]


class Section(BaseModel):
	model_config = ConfigDict(extra="forbid", frozen=True)


class MeshSection(Section):
	generator: Literal["unit_square", "channel", "file"]
	n: Optional[int] = Field(default=None, ge=1)
	target_h: Optional[Real] = Field(default=None, gt=0.0)
	path: Optional[str] = None
	refine: bool = False
	normalize_orientation: bool = False

	@model_validator(mode="after")
	def _parameters(self) -> "MeshSection":
		needed = {"unit_square": "n", "channel": "target_h", "file": "path"}[self.generator]
		if getattr(self, needed) is None:
			raise ValueError(f"generator {self.generator} requires '{needed}'")
		if self.generator == "channel" and not self.target_h < 0.1:
			raise ValueError("target_h must be below 0.1 to resolve the block")
		if self.path is not None and not Path(self.path).is_file():
			raise ValueError(f"mesh file {self.path} does not exist")
		return self


class SchemeSection(Section):
	scheme: SchemeKind
	dt: Real = Field(gt=0.0)
	end_time: Real = Field(gt=0.0)
	nu: Optional[Real] = Field(default=None, gt=0.0)
	eps: Real = Field(default=1.0, gt=0.0)
	tol: Real = Field(default=1e-10, gt=0.0)
	maxit: int = Field(default=2000, ge=1)
	linear_solver: Literal["krylov", "direct"] = "krylov"
	problem: Optional[Literal["manufactured", "channel"]] = None

	@model_validator(mode="after")
	def _horizon(self) -> "SchemeSection":
		if self.end_time < self.dt * (1.0 - 1e-9):
			raise ValueError("end_time must cover at least one step")
		return self


class CdaSection(Section):
	mu: Real = Field(default=0.0, ge=0.0)
	H: Optional[Real] = Field(default=None, gt=0.0)
	N: Optional[int] = Field(default=None, ge=1)
	mode: Mode = Mode.AVERAGE
	override_guard: bool = False

	@model_validator(mode="after")
	def _grid(self) -> "CdaSection":
		if self.H is not None and self.N is not None:
			raise ValueError("give either H or N, not both")
		if self.mu > 0.0 and self.H is None and self.N is None:
			raise ValueError("nudging needs a coarse grid: set H or N")
		return self

	def coarse_n(self, extent: float) -> Optional[int]:
		if self.N is not None:
			return self.N
		if self.H is not None:
			return max(1, int(round(extent / self.H)))
		return None


class TruthSection(Section):
	source: Literal["analytic", "stored", "none"] = "analytic"
	path: Optional[str] = None
	policy: Policy = Policy.STRICT
	exact_initial: bool = False
	stride: int = Field(default=1, ge=1)

	@model_validator(mode="after")
	def _archive(self) -> "TruthSection":
		if self.source == "stored" and self.path is None:
			raise ValueError("stored truth requires 'path'")
		if self.source == "stored" and not Path(self.path).is_dir():
			raise ValueError(f"reference archive {self.path} does not exist")
		return self


class OutputSection(Section):
	directory: str = "runs"
	name: Optional[str] = None
	metrics: Names = Field(default_factory=list)

	@model_validator(mode="after")
	def _known(self) -> "OutputSection":
		unknown = [m for m in self.metrics if m not in METRICS]
		if unknown:
			raise ValueError(f"unknown metrics {unknown}; choose from {list(METRICS)}")
		return self


class RunSpec(BaseModel):
	model_config = ConfigDict(extra="forbid", frozen=True)

	mesh: MeshSection
	scheme: SchemeSection
	cda: CdaSection = CdaSection()
	truth: TruthSection = TruthSection()
	output: OutputSection = OutputSection()
	sweep: SweepSection = Field(default_factory=dict)

	@property
	def problem(self) -> str:
		if self.scheme.problem is not None:
			return self.scheme.problem
		return "channel" if self.mesh.generator == "channel" else "manufactured"

	@property
	def nu(self) -> float:
		if self.scheme.nu is not None:
			return self.scheme.nu
		return CHANNEL_NU if self.problem == "channel" else 1.0

	@property
	def metrics(self) -> List[str]:
		if self.output.metrics:
			return list(self.output.metrics)
		if self.problem == "channel":
			return ["drag", "lift", "u_l2", "divergence"]
		return ["l2_error", "h1_error", "u_l2", "divergence"]

	@property
	def run_name(self) -> str:
		if self.output.name:
			return self.output.name
		return f"{self.scheme.scheme.value}-mu{self.cda.mu:g}"

	def to_raw(self, include_sweep: bool = True) -> Dict[str, Dict[str, str]]:
		raw: Dict[str, Dict[str, str]] = {}
		for section in SECTIONS[:-1]:
			model = getattr(self, section)
			entries = {}
			for key, value in model.model_dump(exclude_none=True).items():
				entries[key] = _render(value)
			if entries or section in ("mesh", "scheme"):
				raw[section] = entries
		if include_sweep and self.sweep:
			raw["sweep"] = {key: ", ".join(values) for key, values in self.sweep.items()}
		return raw

	def to_config_text(self, include_sweep: bool = True) -> str:
		lines: List[str] = []
		for section, entries in self.to_raw(include_sweep).items():
			lines.append(f"[{section}]")
			lines.extend(f"{key} = {value}" for key, value in entries.items())
			lines.append("")
		return "\n".join(lines)


def _render(value: Any) -> str:
	if isinstance(value, bool):
		return "true" if value else "false"
	if isinstance(value, float):
		return repr(value)
	if isinstance(value, (list, tuple)):
		return ", ".join(_render(v) for v in value)
	if hasattr(value, "value"):
		return str(value.value)
	return str(value)


def read_raw(text: str) -> Raw:
	"""Split `[section]` / `key = value` text into entries that remember their line."""
	raw: Raw = {}
	headers: Dict[str, int] = {}
	section: Optional[str] = None
	for lineno, line in enumerate(text.splitlines(), start=1):
		content = line.split("#", 1)[0].strip()
		if not content:
			continue
		if content.startswith("[") and content.endswith("]"):
			section = content[1:-1].strip()
			if section not in SECTIONS:
				raise ConfigError(f"unknown section [{section}]", line=lineno)
			if section in headers:
				raise ConfigError(f"section [{section}] repeated", line=lineno, other_line=headers[section])
			headers[section] = lineno
			raw.setdefault(section, {})
			continue
		if "=" not in content:
			raise ConfigError(f"expected 'key = value', got {content!r}", line=lineno)
		if section is None:
			raise ConfigError("key outside of any section", line=lineno)
		key, value = (part.strip() for part in content.split("=", 1))
		if not key:
			raise ConfigError("empty key", line=lineno)
		if key in raw[section]:
			raise ConfigError(f"duplicate key '{key}' in [{section}]", line=lineno, other_line=raw[section][key][1])
		raw[section][key] = (value, lineno)
	raw["__headers__"] = {name: ("", line) for name, line in headers.items()}
	return raw


def _line_for(raw: Raw, loc: Tuple) -> Optional[int]:
	if not loc:
		return None
	section = str(loc[0])
	if len(loc) > 1 and section in raw and str(loc[1]) in raw[section]:
		return raw[section][str(loc[1])][1]
	header = raw.get("__headers__", {}).get(section)
	return header[1] if header else None


def validate_raw(raw: Raw) -> RunSpec:
	data = {
		section: {k: v for k, (v, _) in entries.items()}
		for section, entries in raw.items() if section != "__headers__"
	}
	try:
		return RunSpec.model_validate(data)
	except ValidationError as exc:
		err = exc.errors()[0]
		loc = tuple(err.get("loc", ()))
		where = ".".join(str(p) for p in loc) or "config"
		message = err.get("msg", "invalid value")
		if err.get("type") == "extra_forbidden":
			message = "unknown key"
		elif err.get("type") == "missing":
			message = "missing required key"
		raise ConfigError(f"{where}: {message}", line=_line_for(raw, loc)) from None


def parse_config_text(text: str) -> RunSpec:
	return validate_raw(read_raw(text))


def parse_config(path: Union[str, Path]) -> RunSpec:
	"""Read and validate a run configuration; every error names its line."""
	try:
		text = Path(path).read_text(encoding="utf-8")
	except OSError as exc:
		raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
	spec = parse_config_text(text)
	logger.debug("parsed %s: %s", path, spec.run_name)
	return spec


def _resolve_key(spec: RunSpec, key: str) -> Tuple[str, str]:
	if "." in key:
		section, name = key.split(".", 1)
		return section, name
	owners = [s for s in SECTIONS[:-1] if key in type(getattr(spec, s)).model_fields]
	if len(owners) != 1:
		raise ConfigError(f"sweep key '{key}' is {'ambiguous' if owners else 'unknown'}; use section.key")
	return owners[0], key


def expand_sweep(spec: RunSpec, vary: Optional[Dict[str, List[str]]] = None) -> List[Tuple[str, RunSpec]]:
	"""One (label, spec) per point of the cartesian product over `[sweep]` and `vary` values."""
	axes = dict(spec.sweep)
	axes.update(vary or {})
	if not axes:
		return [("", spec)]
	keys = list(axes)
	base = spec.to_raw(include_sweep=False)
	variants: List[Tuple[str, RunSpec]] = []
	for combo in itertools.product(*(axes[k] for k in keys)):
		raw = {section: {k: (v, None) for k, v in entries.items()} for section, entries in base.items()}
		labels = []
		for key, value in zip(keys, combo):
			section, name = _resolve_key(spec, key)
			raw.setdefault(section, {})[name] = (value, None)
			labels.append(f"{name}={value}")
		variant = validate_raw(raw)
		label = ",".join(labels)
		variants.append((label, variant))
	return variants


def parse_vary(items: List[str]) -> Dict[str, List[str]]:
	"""`key=v1,v2` command-line items into sweep axes."""
	out: Dict[str, List[str]] = {}
	for item in items:
		if "=" not in item:
			raise ConfigError(f"--vary expects key=v1,v2,..., got {item!r}")
		key, values = item.split("=", 1)
		out[key.strip()] = parse_list(values)
	return out
