"""Quadrature rules on the reference triangle and reference interval.

The reference triangle is {(x, y) : x, y >= 0, x + y <= 1} (measure 1/2);
the reference interval is [-1, 1] (measure 2).  Triangle rules are built as
conical products of Gauss-Legendre and Gauss-Jacobi rules, which gives exact
integration of all polynomials up to any requested total degree.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    """Points and positive weights exact up to ``exactness_degree``.

    ``points`` has shape (n, 2) for triangle rules and (n,) for interval
    rules; weights sum to the reference measure.
    """

    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]


@lru_cache(maxsize=None)
def triangle_rule(exactness_degree: int) -> QuadratureRule:
    """Conical-product rule on the reference triangle.

    Uses n-point Gauss-Legendre in the collapsed direction and n-point
    Gauss-Jacobi (weight 1-x) in the other, n = ceil((degree+1)/2), so all
    monomials x^a y^b with a + b <= degree integrate exactly.
    """
    if exactness_degree < 0:
        raise ValueError("exactness degree must be nonnegative")
    n = max(1, (exactness_degree + 2) // 2)
    xg, wg = np.polynomial.legendre.leggauss(n)
    # map to [0, 1]
    xg = 0.5 * (xg + 1.0)
    wg = 0.5 * wg
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    xj = 0.5 * (xj + 1.0)
    wj = 0.25 * wj  # 1/2 for the interval map, 1/2 for the (1-x) weight map
    pts = np.empty((n * n, 2))
    wts = np.empty(n * n)
    k = 0
    for i in range(n):
        for j in range(n):
            eta = xj[j]
            pts[k, 0] = xg[i] * (1.0 - eta)
            pts[k, 1] = eta
            wts[k] = wg[i] * wj[j]
            k += 1
    return QuadratureRule(pts, wts, 2 * n - 1)


@lru_cache(maxsize=None)
def interval_rule(exactness_degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [-1, 1] exact up to the requested degree."""
    if exactness_degree < 0:
        raise ValueError("exactness degree must be nonnegative")
    n = max(1, (exactness_degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(x, w, 2 * n - 1)
