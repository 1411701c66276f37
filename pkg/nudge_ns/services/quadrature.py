from __future__ import annotations
from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np


@dataclass(frozen=True, eq=False)
class QuadratureRule:
	"""Barycentric points and weights on the reference triangle; weights sum to 1."""

	points: np.ndarray
	weights: np.ndarray
	degree: int

	def __len__(self) -> int:
		return int(self.weights.shape[0])

	def physical_points(self, corners: np.ndarray) -> np.ndarray:
		"""Map to every cell at once: corners (NC,3,2) -> (NC,nq,2)."""
		return np.einsum("qk,ckd->cqd", self.points, corners)


def _permutations(a: float) -> np.ndarray:
	b = 1.0 - 2.0 * a
	return np.array([[b, a, a], [a, b, a], [a, a, b]])


def _seven_point() -> QuadratureRule:
	s15 = math.sqrt(15.0)
	a1 = (6.0 - s15) / 21.0
	a2 = (6.0 + s15) / 21.0
	w1 = (155.0 - s15) / 1200.0
	w2 = (155.0 + s15) / 1200.0
	points = np.vstack([[1.0 / 3.0] * 3, _permutations(a1), _permutations(a2)])
	weights = np.array([9.0 / 40.0, w1, w1, w1, w2, w2, w2])
	return QuadratureRule(points, weights, 5)


def _collapsed_gauss(degree: int) -> QuadratureRule:
	n = int(math.ceil((degree + 2) / 2.0))
	x, w = np.polynomial.legendre.leggauss(n)
	x = 0.5 * (x + 1.0)
	w = 0.5 * w
	xi, eta = np.meshgrid(x, x, indexing="ij")
	wxi, weta = np.meshgrid(w, w, indexing="ij")
	rx = xi.ravel()
	ry = (eta * (1.0 - xi)).ravel()
	weights = 2.0 * (wxi * weta * (1.0 - xi)).ravel()
	points = np.column_stack([1.0 - rx - ry, rx, ry])
	return QuadratureRule(points, weights, 2 * n - 2)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
	"""Rule exact for polynomials up to `degree` on any triangle."""
	if degree <= 1:
		return QuadratureRule(np.array([[1.0 / 3.0] * 3]), np.array([1.0]), 1)
	if degree == 2:
		return QuadratureRule(_permutations(1.0 / 6.0), np.full(3, 1.0 / 3.0), 2)
	if degree <= 5:
		return _seven_point()
	return _collapsed_gauss(degree)


@lru_cache(maxsize=None)
def line_rule(n: int = 3):
	"""Gauss-Legendre points on [0, 1] with weights summing to 1."""
	x, w = np.polynomial.legendre.leggauss(n)
	return 0.5 * (x + 1.0), 0.5 * w
