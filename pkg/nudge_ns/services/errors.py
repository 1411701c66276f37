from __future__ import annotations
from typing import Any, Optional


class NudgeNSError(Exception):
	"""Base class for every error raised by the library."""


class MeshFormatError(NudgeNSError, ValueError):
	def __init__(self, message: str, line: Optional[int] = None) -> None:
		self.line = line
		prefix = f"line {line}: " if line is not None else ""
		super().__init__(prefix + message)


class MeshValidationError(NudgeNSError, ValueError):
	pass


class DofMapError(NudgeNSError, ValueError):
	pass


class BoundaryConditionError(NudgeNSError, ValueError):
	pass


class InterpolantError(NudgeNSError, ValueError):
	pass


class SolverError(NudgeNSError, RuntimeError):
	"""Linear solve failed; carries the solver report and the time-step context."""

	def __init__(self, message: str, report: Any = None, step: Optional[int] = None, time: Optional[float] = None) -> None:
		self.report = report
		self.step = step
		self.time = time
		context = ""
		if step is not None:
			context = f" (step {step}, t={time:.6g})" if time is not None else f" (step {step})"
		super().__init__(message + context)


class TruthCoverageError(NudgeNSError, LookupError):
	pass


class ArchiveError(NudgeNSError, OSError):
	pass


class ConfigError(NudgeNSError, ValueError):
	def __init__(self, message: str, line: Optional[int] = None, other_line: Optional[int] = None) -> None:
		self.line = line
		self.other_line = other_line
		prefix = ""
		if line is not None and other_line is not None:
			prefix = f"lines {other_line} and {line}: "
		elif line is not None:
			prefix = f"line {line}: "
		super().__init__(prefix + message)
