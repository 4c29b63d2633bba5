"""Broken polynomial spaces on triangles with an orthonormal modal basis.

Scalar dofs are laid out element by element (``e*m + j``); vector dofs put
the two components of element ``e`` next to each other
(``e*2m + c*m + j``), so both mass matrices are block diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache

import numpy as np

from .mesh import Mesh
from .quadrature import interval_rule, triangle_rule

__all__ = [
    "FieldKind",
    "FieldCoeffs",
    "DGSpace",
    "eval_basis",
    "eval_field",
    "l2_project",
    "l2_error",
    "reference_basis",
]

MAX_DEGREE = 4
# extra polynomial degree of the rule used to project and measure
# non-polynomial data; assembly integrands are polynomial and use 2p + 3
DATA_EXTRA_DEGREE = 12
_CENTER = 1.0 / 3.0


class FieldKind(Enum):
    SCALAR = "scalar"
    VECTOR = "vector"


def _monomial_exponents(p):
    return [(d - b, b) for d in range(p + 1) for b in range(d + 1)]


@lru_cache(maxsize=None)
def _basis_coefficients(p: int) -> np.ndarray:
    # Gram-Schmidt on monomials == inverse Cholesky factor of their Gram matrix
    exps = _monomial_exponents(p)
    pts, wts = triangle_rule(2 * p + 2)
    x, y = pts[:, 0] - _CENTER, pts[:, 1] - _CENTER
    V = np.column_stack([x**a * y**b for a, b in exps])
    G = (V * wts[:, None]).T @ V
    C = np.linalg.inv(np.linalg.cholesky(G))
    # second pass removes the rounding left by the first
    G2 = C @ G @ C.T
    C = np.linalg.inv(np.linalg.cholesky(G2)) @ C
    C.setflags(write=False)
    return C


def reference_basis(p: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis on the reference triangle.

    Returns values ``(npts, m)`` and gradients ``(npts, m, 2)``.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    x, y = pts[:, 0] - _CENTER, pts[:, 1] - _CENTER
    exps = _monomial_exponents(p)
    C = _basis_coefficients(p)
    mono = np.column_stack([x**a * y**b for a, b in exps])
    dx = np.column_stack([a * x ** max(a - 1, 0) * y**b for a, b in exps])
    dy = np.column_stack([b * x**a * y ** max(b - 1, 0) for a, b in exps])
    vals = mono @ C.T
    grads = np.stack([dx @ C.T, dy @ C.T], axis=-1)
    return vals, grads


class DGSpace:
    """Scalar space V_h and vector space W_h of uniform degree ``degree``.

    Volume quadrature is exact to degree ``2p + 3 + extra_degree``; edge
    quadrature uses ``p + 2`` Gauss points (plus ``extra_degree // 2``).
    Everything the assemblers need is precomputed here.
    """

    def __init__(self, mesh: Mesh, degree: int, extra_degree: int = 0):
        if int(degree) != degree or not 1 <= degree <= MAX_DEGREE:
            raise ValueError(f"degree must be an integer in [1, {MAX_DEGREE}], got {degree!r}")
        self.mesh = mesh
        self.degree = p = int(degree)
        self.m = (p + 1) * (p + 2) // 2
        self.n_scalar = mesh.n_elements * self.m
        self.n_vector = 2 * self.n_scalar
        # uniform degree: p_k = (p_i + p_j) / 2 == p on every edge
        self.edge_degree = np.full(mesh.n_edges, float(p))

        v = mesh.vertices[mesh.elements]
        self.origin = v[:, 0]
        self.jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)  # (K,2,2)
        self.detj = np.linalg.det(self.jac)
        self.jac_inv = np.linalg.inv(self.jac)
        scale = 1.0 / np.sqrt(self.detj)

        self.quad_degree = 2 * p + 3 + extra_degree
        ref_pts, ref_wts = triangle_rule(self.quad_degree)
        self.ref_quad = (ref_pts, ref_wts)
        self.qpoints = self.origin[:, None, :] + ref_pts @ self.jac.transpose(0, 2, 1)
        self.qweights = ref_wts[None, :] * self.detj[:, None]
        rv, rg = reference_basis(p, ref_pts)
        self.ref_values = rv
        # physical basis: values (K, nq, m), gradients (K, nq, m, 2)
        self.values = rv[None] * scale[:, None, None]
        self.grads = np.einsum("qmr,krc->kqmc", rg, self.jac_inv) * scale[:, None, None, None]

        t, w = interval_rule(p + 2 + extra_degree // 2)
        self.edge_ref_quad = (t, w)
        a = mesh.vertices[mesh.edge_vertices[:, 0]]
        b = mesh.vertices[mesh.edge_vertices[:, 1]]
        self.edge_points = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
        self.edge_weights = w[None, :] * mesh.edge_length[:, None]
        self.trace_left = self._traces(mesh.edge_left)
        inner = mesh.edge_right >= 0
        self.trace_right = np.zeros_like(self.trace_left)
        self.trace_right[inner] = self._traces(mesh.edge_right[inner], inner)

    def _traces(self, elems, mask=None):
        pts = self.edge_points if mask is None else self.edge_points[mask]
        ref = self.to_reference(elems, pts)
        ne, nq = ref.shape[:2]
        vals, _ = reference_basis(self.degree, ref.reshape(-1, 2))
        return vals.reshape(ne, nq, self.m) / np.sqrt(self.detj[elems])[:, None, None]

    def to_reference(self, elems, pts):
        """Map physical points ``(n, q, 2)`` of elements ``elems`` to the reference triangle."""
        d = pts - self.origin[elems][:, None, :]
        return np.einsum("nrc,nqc->nqr", self.jac_inv[elems], d)

    @cached_property
    def data_quadrature(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Points ``(K, nq, 2)``, weights ``(K, nq)`` and basis values ``(K, nq, m)``
        of the richer rule used for projections and error norms."""
        ref_pts, ref_wts = triangle_rule(self.quad_degree + DATA_EXTRA_DEGREE)
        pts = self.origin[:, None, :] + ref_pts @ self.jac.transpose(0, 2, 1)
        wts = ref_wts[None, :] * self.detj[:, None]
        rv, _ = reference_basis(self.degree, ref_pts)
        vals = rv[None] / np.sqrt(self.detj)[:, None, None]
        return pts, wts, vals

    def scalar_dofs(self, element: int) -> slice:
        return slice(element * self.m, (element + 1) * self.m)

    def vector_dofs(self, element: int) -> slice:
        return slice(2 * element * self.m, 2 * (element + 1) * self.m)

    def scalar_block(self, values):
        return np.asarray(values).reshape(self.mesh.n_elements, self.m)

    def vector_block(self, values):
        """View vector coefficients as ``(K, 2, m)``."""
        return np.asarray(values).reshape(self.mesh.n_elements, 2, self.m)


@dataclass
class FieldCoeffs:
    space: DGSpace
    kind: FieldKind
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = self.space.n_scalar if self.kind is FieldKind.SCALAR else self.space.n_vector
        if self.values.shape != (n,):
            raise ValueError(f"{self.kind.value} field needs {n} coefficients, got {self.values.shape}")

    @classmethod
    def zeros(cls, space: DGSpace, kind: FieldKind = FieldKind.SCALAR) -> "FieldCoeffs":
        n = space.n_scalar if kind is FieldKind.SCALAR else space.n_vector
        return cls(space, kind, np.zeros(n))

    def at_quadrature(self, values=None) -> np.ndarray:
        """Field values at volume quadrature points: ``(K, nq)`` or ``(K, nq, 2)``.

        ``values`` are basis values to use instead of the assembly rule's.
        """
        sp = self.space
        vals = sp.values if values is None else values
        if self.kind is FieldKind.SCALAR:
            return np.einsum("kqm,km->kq", vals, sp.scalar_block(self.values))
        return np.einsum("kqm,kcm->kqc", vals, sp.vector_block(self.values))


def eval_basis(space: DGSpace, element: int, point) -> tuple[np.ndarray, np.ndarray]:
    """Physical basis values ``(m,)`` and gradients ``(2, m)`` at a reference point."""
    if not 0 <= element < space.mesh.n_elements:
        raise IndexError(f"element {element} out of range [0, {space.mesh.n_elements})")
    xi = np.asarray(point, dtype=float).reshape(1, 2)
    if min(xi[0, 0], xi[0, 1], 1.0 - xi.sum()) < -1e-12:
        raise ValueError(f"point {point} lies outside the reference triangle")
    vals, grads = reference_basis(space.degree, xi)
    s = 1.0 / np.sqrt(space.detj[element])
    phys = grads[0] @ space.jac_inv[element]  # (m, 2)
    return vals[0] * s, (phys * s).T


def eval_field(coeffs: FieldCoeffs, element: int, point):
    vals, _ = eval_basis(coeffs.space, element, point)
    if coeffs.kind is FieldKind.SCALAR:
        return float(vals @ coeffs.values[coeffs.space.scalar_dofs(element)])
    c = coeffs.values[coeffs.space.vector_dofs(element)].reshape(2, -1)
    return c @ vals


def _sample(f, pts):
    x, y = pts[..., 0], pts[..., 1]
    out = np.asarray(f(x, y), dtype=float)
    if out.shape == x.shape:
        return out
    if out.shape == x.shape + (2,):
        return out
    if out.shape == (2,) + x.shape:
        return np.moveaxis(out, 0, -1)
    return np.broadcast_to(out, x.shape).copy()


def l2_project(space: DGSpace, f, kind: FieldKind | None = None) -> FieldCoeffs:
    """Elementwise L2 projection; ``f(x, y)`` returns scalars or ``(..., 2)`` vectors.

    The basis is orthonormal, so the projection coefficients are plain
    moments against the basis.
    """
    pts, wts, basis = space.data_quadrature
    vals = _sample(f, pts)
    if kind is None:
        kind = FieldKind.VECTOR if vals.ndim == 3 else FieldKind.SCALAR
    wv = wts[:, :, None] * basis
    if kind is FieldKind.SCALAR:
        c = np.einsum("kqm,kq->km", wv, vals)
    else:
        if vals.ndim != 3:
            raise ValueError("vector projection needs a field returning (..., 2)")
        c = np.einsum("kqm,kqc->kcm", wv, vals)
    return FieldCoeffs(space, kind, c.ravel())


interpolate = l2_project


def l2_error(coeffs: FieldCoeffs, exact) -> float:
    """``(sum_K int_K |exact - field|^2)^(1/2)`` on the data quadrature."""
    pts, wts, basis = coeffs.space.data_quadrature
    diff = _sample(exact, pts) - coeffs.at_quadrature(basis)
    if diff.ndim == 3:
        diff = np.einsum("kqc,kqc->kq", diff, diff)
    else:
        diff = diff * diff
    return float(np.sqrt(np.sum(wts * diff)))
