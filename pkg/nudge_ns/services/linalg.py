from __future__ import annotations
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Optional, Tuple, Union
import logging
import math

import numpy as np
from scipy import sparse
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, cg, gmres, spilu, splu

from .errors import DofMapError


logger = logging.getLogger(__name__)

SparseMatrix = sparse.csr_matrix
Operator = Union[sparse.spmatrix, LinearOperator]

DENSE_SADDLE_LIMIT = 3000
KRYLOV = "krylov"
DIRECT = "direct"


@dataclass
class SolveReport:
	iterations: int
	residual: float
	converged: bool
	method: str = KRYLOV

	def as_dict(self) -> Dict[str, Any]:
		return asdict(self)

	def __str__(self) -> str:
		state = "converged" if self.converged else "NOT converged"
		return f"{self.method}: {state} after {self.iterations} iterations, relative residual {self.residual:.3e}"


def as_csr(A: sparse.spmatrix) -> sparse.csr_matrix:
	"""Canonical compressed-row form: duplicates summed, column indices sorted per row."""
	out = sparse.csr_matrix(A, dtype=float)
	out.sum_duplicates()
	out.sort_indices()
	return out


def spmv(A: Operator, x: np.ndarray) -> np.ndarray:
	x = np.asarray(x, dtype=float)
	if x.ndim != 1 or A.shape[1] != x.shape[0]:
		raise DofMapError(f"cannot multiply a {A.shape[0]}x{A.shape[1]} matrix by a vector of shape {x.shape}")
	return np.asarray(A @ x).ravel()


def factorize(A: sparse.spmatrix) -> Callable[[np.ndarray], np.ndarray]:
	"""Sparse LU of A as a reusable solve callable."""
	lu = splu(sparse.csc_matrix(A))
	return lu.solve


def _deflate(v: np.ndarray) -> np.ndarray:
	return v - v.mean()


def _jacobi(A: Operator) -> Callable[[np.ndarray], np.ndarray]:
	diagonal = getattr(A, "diagonal", None)
	if diagonal is None:
		return lambda r: r
	d = np.asarray(diagonal(), dtype=float)
	d = np.where(np.abs(d) > 0.0, d, 1.0)
	inv = 1.0 / d
	return lambda r: inv * r


def _relative_residual(A: Operator, x: np.ndarray, b: np.ndarray, scale: float) -> float:
	return float(np.linalg.norm(b - spmv(A, x)) / scale)


def _direct_spd(A: sparse.spmatrix, b: np.ndarray, nullspace: bool) -> np.ndarray:
	if not nullspace:
		return factorize(A)(b)
	n = A.shape[0]
	ones = sparse.csr_matrix(np.ones((n, 1)))
	bordered = sparse.bmat([[A, ones], [ones.T, None]], format="csc")
	return splu(bordered).solve(np.append(b, 0.0))[:n]


def solve_spd(A: Operator, b: np.ndarray, tol: float = 1e-10, maxit: Optional[int] = None,
			  nullspace: bool = False, preconditioner: Optional[Callable[[np.ndarray], np.ndarray]] = None,
			  x0: Optional[np.ndarray] = None, method: str = KRYLOV) -> Tuple[np.ndarray, SolveReport]:
	"""Preconditioned conjugate gradients with ||Ax - b|| <= tol ||b|| as the contract.

	With nullspace=True the constant vector is deflated: b, the operator and the
	preconditioner all act on its complement, so every iterate stays mean-zero.
	"""
	b = np.asarray(b, dtype=float)
	n = b.shape[0]
	if A.shape != (n, n):
		raise DofMapError(f"system of shape {A.shape} does not match rhs of length {n}")
	if nullspace:
		b = _deflate(b)
	bnorm = float(np.linalg.norm(b))
	if bnorm == 0.0:
		return np.zeros(n), SolveReport(0, 0.0, True, method)

	if method == DIRECT and sparse.issparse(A):
		x = _direct_spd(A, b, nullspace)
		if nullspace:
			x = _deflate(x)
		res = _relative_residual(A, x, b, bnorm)
		return x, SolveReport(1, res, res <= tol, DIRECT)

	maxit = 10 * n if maxit is None else int(maxit)
	precond = preconditioner or _jacobi(A)
	project = _deflate if nullspace else (lambda v: v)
	op = LinearOperator((n, n), matvec=lambda v: project(spmv(A, project(v))), dtype=float)
	M = LinearOperator((n, n), matvec=lambda r: project(precond(project(r))), dtype=float)
	count = [0]

	def tick(_: np.ndarray) -> None:
		count[0] += 1

	x = np.zeros(n) if x0 is None else project(np.array(x0, dtype=float))
	res = _relative_residual(A, x, b, bnorm)
	# outer refinement: cg on the true residual until the unpreconditioned contract holds
	for _ in range(3):
		if res <= tol or count[0] >= maxit:
			break
		r = project(b - spmv(A, x))
		dx, info = cg(op, r, rtol=min(0.5, tol * bnorm / np.linalg.norm(r)), atol=0.0,
					  maxiter=max(1, maxit - count[0]), M=M, callback=tick)
		x = project(x + dx)
		res = _relative_residual(A, x, b, bnorm)
		if info < 0:
			logger.debug("cg breakdown (info=%d)", info)
			break
	report = SolveReport(count[0], res, res <= tol, KRYLOV)
	if not report.converged:
		logger.debug("solve_spd: %s", report)
	return x, report


def _ilu_preconditioner(A: sparse.spmatrix) -> LinearOperator:
	try:
		ilu = spilu(sparse.csc_matrix(A), drop_tol=1e-6, fill_factor=20)
		return LinearOperator(A.shape, matvec=ilu.solve)
	except RuntimeError:
		logger.debug("incomplete LU failed, falling back to Jacobi")
		jac = _jacobi(A)
		return LinearOperator(A.shape, matvec=jac)


def solve_nonsymmetric(A: sparse.spmatrix, b: np.ndarray, tol: float = 1e-10, maxit: int = 2000,
					   restart: int = 60, x0: Optional[np.ndarray] = None,
					   method: str = KRYLOV) -> Tuple[np.ndarray, SolveReport]:
	"""Restarted GMRES with incomplete-LU preconditioning and a true-residual recheck."""
	b = np.asarray(b, dtype=float)
	n = b.shape[0]
	if A.shape != (n, n):
		raise DofMapError(f"system of shape {A.shape} does not match rhs of length {n}")
	bnorm = float(np.linalg.norm(b))
	if bnorm == 0.0:
		return np.zeros(n), SolveReport(0, 0.0, True, method)
	if method == DIRECT:
		x = factorize(A)(b)
		res = _relative_residual(A, x, b, bnorm)
		return x, SolveReport(1, res, res <= tol, DIRECT)

	M = _ilu_preconditioner(A)
	count = [0]

	def tick(_: float) -> None:
		count[0] += 1

	x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
	res = _relative_residual(A, x, b, bnorm)
	# outer refinement: GMRES on the true residual until the unpreconditioned contract holds
	for _ in range(4):
		if res <= tol or count[0] >= maxit:
			break
		r = b - spmv(A, x)
		cycles = max(1, int(math.ceil((maxit - count[0]) / restart)))
		dx, info = gmres(A, r, rtol=min(0.5, tol * bnorm / np.linalg.norm(r)), atol=0.0, restart=restart,
						 maxiter=cycles, M=M, callback=tick, callback_type="pr_norm")
		if info < 0:
			logger.debug("gmres breakdown (info=%d)", info)
			break
		x = x + dx
		res = _relative_residual(A, x, b, bnorm)
	report = SolveReport(count[0], res, res <= tol, KRYLOV)
	if not report.converged:
		logger.debug("solve_nonsymmetric: %s", report)
	return x, report


def _gauge_vector(m: int, pressure_mass: Optional[sparse.spmatrix]) -> np.ndarray:
	if pressure_mass is None:
		return np.ones(m)
	return np.asarray(pressure_mass @ np.ones(m)).ravel()


def _saddle_residual(A, B, u, p, f, g, scale) -> float:
	ru = f - spmv(A, u) - spmv(B.T, p)
	rp = g - spmv(B, u)
	# the constant pressure mode is not determined; its compatibility component is dropped
	rp = rp - rp.mean()
	return float(np.sqrt(ru @ ru + rp @ rp) / scale)


def solve_saddle(A: sparse.spmatrix, B: sparse.spmatrix, f: np.ndarray, g: np.ndarray, tol: float = 1e-10,
				 maxit: int = 500, pressure_mass: Optional[sparse.spmatrix] = None,
				 method: str = KRYLOV) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
	"""Solve [A B^T; B 0][u; p] = [f; g] with the pressure gauge c^T p = 0.

	c is the row-sum vector of pressure_mass (zero integral) or ones (zero coefficient mean).
	Small systems are solved densely; larger ones by GMRES on the pressure Schur complement.
	"""
	f = np.asarray(f, dtype=float)
	g = np.asarray(g, dtype=float)
	m, n = B.shape
	if A.shape != (n, n) or f.shape != (n,) or g.shape != (m,):
		raise DofMapError("incompatible saddle-point block shapes")
	scale = float(np.linalg.norm(np.concatenate([f, g])))
	if scale == 0.0:
		return np.zeros(n), np.zeros(m), SolveReport(0, 0.0, True, method)
	c = _gauge_vector(m, pressure_mass)

	if n + m < DENSE_SADDLE_LIMIT:
		K = np.zeros((n + m + 1, n + m + 1))
		K[:n, :n] = A.toarray()
		Bd = B.toarray()
		K[:n, n:n + m] = Bd.T
		K[n:n + m, :n] = Bd
		K[n:n + m, -1] = c
		K[-1, n:n + m] = c
		sol = lu_solve(lu_factor(K), np.concatenate([f, g, [0.0]]))
		u, p = sol[:n], sol[n:n + m]
		res = _saddle_residual(A, B, u, p, f, g, scale)
		return u, p, SolveReport(1, res, res <= tol, "dense")

	solve_A = factorize(A)
	Bt = sparse.csr_matrix(B.T)

	def schur(q: np.ndarray) -> np.ndarray:
		return _deflate(spmv(B, solve_A(spmv(Bt, q))))

	S = LinearOperator((m, m), matvec=schur)
	if pressure_mass is not None:
		d = np.asarray(pressure_mass.diagonal(), dtype=float)
		P = LinearOperator((m, m), matvec=lambda r: _deflate(r / d))
	else:
		P = None
	count = [0]

	def tick(_: float) -> None:
		count[0] += 1

	rhs = _deflate(spmv(B, solve_A(f)) - g)
	p = np.zeros(m)
	u = solve_A(f)
	res = _saddle_residual(A, B, u, p, f, g, scale)
	for _ in range(3):
		if res <= tol or count[0] >= maxit:
			break
		r = rhs - schur(p)
		rnorm = float(np.linalg.norm(r))
		if rnorm == 0.0:
			break
		dp, info = gmres(S, r, rtol=min(0.5, 0.1 * tol * scale / rnorm), atol=0.0, restart=80,
						 maxiter=max(1, int(math.ceil((maxit - count[0]) / 80))), M=P,
						 callback=tick, callback_type="pr_norm")
		p = p + dp
		p = p - (c @ p) / c.sum()
		u = solve_A(f - spmv(Bt, p))
		res = _saddle_residual(A, B, u, p, f, g, scale)
		if info < 0:
			break
	report = SolveReport(count[0], res, res <= tol, "schur")
	if not report.converged:
		logger.debug("solve_saddle: %s", report)
	return u, p, report
