"""Quadrature rules on the reference triangle and the unit interval."""

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = ["triangle_rule", "interval_rule"]


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Jacobi rule on the triangle (0,0), (1,0), (0,1).

    Exact for polynomials of total degree <= ``degree``. Weights sum to 1/2.
    """
    n = max(1, (degree + 2) // 2)
    xa, wa = roots_jacobi(n, 1.0, 0.0)
    xb, wb = roots_legendre(n)
    u = 0.5 * (xa + 1.0)
    v = 0.5 * (xb + 1.0)
    wu = 0.25 * wa
    wv = 0.5 * wb
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([U.ravel(), ((1.0 - U) * V).ravel()])
    wts = np.outer(wu, wv).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


@lru_cache(maxsize=None)
def interval_rule(npoints: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre on [0, 1]; exact to degree 2*npoints - 1."""
    x, w = roots_legendre(npoints)
    pts = 0.5 * (x + 1.0)
    wts = 0.5 * w
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts
