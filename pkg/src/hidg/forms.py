"""Sparse assembly of the mixed DG bilinear forms.

Sign conventions for an edge with unit normal ``n`` (pointing from the left
element into the right one): ``[[v]] = (v_L - v_R) n`` and
``[[w]] = (w_L - w_R) . n``; on boundary edges the right trace is absent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .dgspace import DGSpace

__all__ = [
    "AssemblyError",
    "ProblemCoefficients",
    "StabilizationConfig",
    "RateExponents",
    "REGIMES",
    "SystemMatrices",
    "stabilization_C11",
    "stabilization_C22",
    "edge_C11",
    "edge_C22",
    "assemble_masses",
    "assemble_A1",
    "assemble_A1_divergence_form",
    "assemble_penalties",
    "assemble_kernel_mass",
    "assemble_load",
    "assemble_system",
    "edge_fluxes",
    "KernelMass",
]


class AssemblyError(ValueError):
    pass


def _identity_matrix_field(x, y):
    out = np.zeros(np.shape(x) + (2, 2))
    out[..., 0, 0] = out[..., 1, 1] = 1.0
    return out


@dataclass
class ProblemCoefficients:
    """Data of ``u_tt - div(A grad u + int_0^t B grad u ds) = f``.

    ``A(x, y)`` and ``B(x, y, t, s)`` return ``(..., 2, 2)`` arrays. When the
    kernel is ``b(t - s) * I`` pass ``kernel_scalar=b``; ``B`` is then
    derived from it and the scalar fast paths are used everywhere.
    ``grad_u0`` is optional; without it the initial gradient is differenced.
    """

    A: Callable = _identity_matrix_field
    B: Optional[Callable] = None
    f: Callable = lambda x, y, t: np.zeros_like(x)
    u0: Callable = lambda x, y: np.zeros_like(x)
    u1: Callable = lambda x, y: np.zeros_like(x)
    kernel_scalar: Optional[Callable] = None
    grad_u0: Optional[Callable] = None
    B_stationary: bool = False
    A_is_identity: bool = False
    alpha_ellipticity: float = 1.0
    M_bound: float = 1.0

    def __post_init__(self):
        if self.kernel_scalar is not None:
            b = self.kernel_scalar
            self.B_stationary = True
            if self.B is None:
                def B(x, y, t, s, _b=b):
                    return float(_b(t - s)) * _identity_matrix_field(x, y)
                self.B = B
        if self.B is None:
            self.kernel_scalar = lambda tau: 0.0
            self.B_stationary = True
            self.B = lambda x, y, t, s: np.zeros(np.shape(x) + (2, 2))
        if self.A is _identity_matrix_field:
            self.A_is_identity = True
        if self.alpha_ellipticity <= 0:
            raise ValueError("alpha_ellipticity must be positive")


@dataclass(frozen=True)
class RateExponents:
    P: float
    D: float
    R: float
    S: float

    @property
    def u_order(self) -> float:
        return self.P + self.D

    @property
    def flux_order(self) -> float:
        return self.P


@dataclass(frozen=True)
class StabilizationConfig:
    """Parameters of C11 = zeta (h/p^2)^alpha and C22 = kappa (h/p^2)^beta."""

    zeta: float = 1.0
    kappa: float = 1.0
    alpha_exp: float = 0.0
    beta_exp: float = 0.0
    C12: tuple[float, float] = field(default=(0.5 / np.sqrt(2.0), 0.5 / np.sqrt(2.0)))

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError(f"zeta must be positive, got {self.zeta}")
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")
        if not -1.0 <= self.alpha_exp <= 0.0:
            raise ValueError(f"alpha_exp must lie in [-1, 0], got {self.alpha_exp}")
        if not 0.0 <= self.beta_exp <= 1.0:
            raise ValueError(f"beta_exp must lie in [0, 1], got {self.beta_exp}")
        object.__setattr__(self, "C12", tuple(float(c) for c in self.C12))

    @property
    def beta_hat(self) -> float:
        return 1.0 if self.kappa == 0 else float(self.beta_exp)

    @property
    def mu_upper(self) -> float:
        return max(-self.alpha_exp, self.beta_hat)

    @property
    def mu_lower(self) -> float:
        return min(-self.alpha_exp, self.beta_hat)

    def rates(self, p: int, r: float | None = None) -> RateExponents:
        """Exponents P, D, R, S of the semidiscrete error bounds (r defaults to p)."""
        r = p if r is None else r
        hi, lo = self.mu_upper, self.mu_lower
        return RateExponents(
            P=min(r + 0.5 * (1 + lo), p + 0.5 * (1 - hi)),
            D=0.5 * (1 + lo),
            R=r + min(lo, 1 - hi),
            S=min(0.5, lo),
        )

    @classmethod
    def from_regime(cls, name: str, **overrides) -> "StabilizationConfig":
        try:
            params = REGIMES[name]
        except KeyError:
            raise ValueError(f"unknown regime {name!r}; choose from {sorted(REGIMES)}") from None
        return cls(**{**params, **overrides})


# C11 in {O(1), O(p^2/h)} x C22 in {0, O(1), O(h/p^2)}
REGIMES = {
    "c11-one-c22-zero": dict(alpha_exp=0.0, kappa=0.0, beta_exp=0.0),
    "c11-one-c22-one": dict(alpha_exp=0.0, kappa=1.0, beta_exp=0.0),
    "c11-one-c22-h": dict(alpha_exp=0.0, kappa=1.0, beta_exp=1.0),
    "c11-inv-h-c22-zero": dict(alpha_exp=-1.0, kappa=0.0, beta_exp=0.0),
    "c11-inv-h-c22-one": dict(alpha_exp=-1.0, kappa=1.0, beta_exp=0.0),
    "c11-inv-h-c22-h": dict(alpha_exp=-1.0, kappa=1.0, beta_exp=1.0),
}


def _edge_scale(space: DGSpace, expo: float) -> np.ndarray:
    mesh = space.mesh
    p = float(space.degree)
    local = mesh.element_diameters**expo / p ** (2 * expo)
    s = local[mesh.edge_left]
    inner = mesh.edge_right >= 0
    s[inner] = np.minimum(s[inner], local[mesh.edge_right[inner]])
    return s


def edge_C11(space: DGSpace, cfg: StabilizationConfig) -> np.ndarray:
    return cfg.zeta * _edge_scale(space, cfg.alpha_exp)


def edge_C22(space: DGSpace, cfg: StabilizationConfig) -> np.ndarray:
    if cfg.kappa == 0:
        return np.zeros(space.mesh.n_edges)
    return cfg.kappa * _edge_scale(space, cfg.beta_exp)


def stabilization_C11(edge: int, cfg: StabilizationConfig, space: DGSpace) -> float:
    return float(edge_C11(space, cfg)[edge])


def stabilization_C22(edge: int, cfg: StabilizationConfig, space: DGSpace) -> float:
    return float(edge_C22(space, cfg)[edge])


@dataclass
class SystemMatrices:
    M_scalar: sp.csr_matrix
    M_vector: sp.csr_matrix
    A2: sp.csr_matrix
    A1: sp.csr_matrix
    J: sp.csr_matrix
    J1: sp.csr_matrix


# --- index helpers -------------------------------------------------------


def _scalar_idx(space, elems):
    return elems[:, None] * space.m + np.arange(space.m)[None, :]


def _vector_idx(space, elems):
    """(n, 2, m) global vector dofs."""
    m = space.m
    return (2 * m * elems)[:, None, None] + (np.arange(2)[:, None] * m + np.arange(m))[None]


def _coo(rows, cols, vals, shape):
    mat = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
    mat.sum_duplicates()
    return mat.tocsr()


def _block_pairs(rows, cols):
    """Broadcast row indices (n, a) and column indices (n, b) to (n, a, b)."""
    r = np.broadcast_to(rows[:, :, None], rows.shape + (cols.shape[1],))
    c = np.broadcast_to(cols[:, None, :], (cols.shape[0], rows.shape[1], cols.shape[1]))
    return r, c


# --- volume forms --------------------------------------------------------


def _weighted_vector_mass(space, tensor):
    """Assemble int T(x) p . w for a (K, nq, 2, 2) tensor field T."""
    K, m = space.mesh.n_elements, space.m
    loc = np.einsum("kq,kqcd,kqi,kqj->kcidj", space.qweights, tensor, space.values, space.values)
    loc = loc.reshape(K, 2 * m, 2 * m)
    idx = _vector_idx(space, np.arange(K)).reshape(K, 2 * m)
    r, c = _block_pairs(idx, idx)
    return _coo(r, c, loc, (space.n_vector, space.n_vector))


def _sample_tensor(fn, pts, *args):
    out = np.asarray(fn(pts[..., 0], pts[..., 1], *args), dtype=float)
    return np.broadcast_to(out, pts.shape[:-1] + (2, 2))


def assemble_masses(space: DGSpace, coeffs: ProblemCoefficients):
    """Scalar mass, vector mass (form A) and the A(x)-weighted vector mass."""
    K, m = space.mesh.n_elements, space.m
    loc = np.einsum("kq,kqi,kqj->kij", space.qweights, space.values, space.values)
    idx = _scalar_idx(space, np.arange(K))
    r, c = _block_pairs(idx, idx)
    Ms = _coo(r, c, loc, (space.n_scalar, space.n_scalar))

    vloc = np.zeros((K, 2, m, 2, m))
    vloc[:, 0, :, 0, :] = loc
    vloc[:, 1, :, 1, :] = loc
    vidx = _vector_idx(space, np.arange(K)).reshape(K, 2 * m)
    r, c = _block_pairs(vidx, vidx)
    Mv = _coo(r, c, vloc.reshape(K, 2 * m, 2 * m), (space.n_vector, space.n_vector))

    if coeffs.A_is_identity:
        return Ms, Mv, Mv.copy()
    A = _sample_tensor(coeffs.A, space.qpoints)
    if not np.allclose(A, np.swapaxes(A, -1, -2), atol=1e-12):
        raise AssemblyError("A(x) is not symmetric at some quadrature point")
    lam = np.linalg.eigvalsh(A)[..., 0]
    bad = np.argwhere(lam < coeffs.alpha_ellipticity * (1 - 1e-12))
    if bad.size:
        k, q = bad[0]
        x, y = space.qpoints[k, q]
        raise AssemblyError(
            f"ellipticity violated at ({x:.6g}, {y:.6g}) in element {k}: "
            f"min eigenvalue {lam[k, q]:.6g} < {coeffs.alpha_ellipticity:.6g}"
        )
    return Ms, Mv, _weighted_vector_mass(space, A)


def assemble_kernel_mass(space: DGSpace, coeffs: ProblemCoefficients, t: float, s: float):
    """B(x, t, s)-weighted vector mass matrix (general path, no scalar shortcut)."""
    B = _sample_tensor(coeffs.B, space.qpoints, t, s)
    return _weighted_vector_mass(space, B)


def assemble_load(space: DGSpace, coeffs: ProblemCoefficients, t: float) -> np.ndarray:
    pts = space.qpoints
    fv = np.broadcast_to(np.asarray(coeffs.f(pts[..., 0], pts[..., 1], t), dtype=float), pts.shape[:-1])
    return np.einsum("kq,kq,kqi->ki", space.qweights, fv, space.values).ravel()


# --- edge forms ----------------------------------------------------------


def _edge_products(space):
    """Trace products int_e phi_a,i phi_b,j for sides a, b in {L, R}: (4, E, m, m)."""
    w = space.edge_weights
    L, R = space.trace_left, space.trace_right
    return {
        ("L", "L"): np.einsum("eq,eqi,eqj->eij", w, L, L),
        ("L", "R"): np.einsum("eq,eqi,eqj->eij", w, L, R),
        ("R", "L"): np.einsum("eq,eqi,eqj->eij", w, R, L),
        ("R", "R"): np.einsum("eq,eqi,eqj->eij", w, R, R),
    }


_SIGN = {"L": 1.0, "R": -1.0}


def _side_elems(mesh, side, mask):
    return (mesh.edge_left if side == "L" else mesh.edge_right)[mask]


def _mixed_edge_block(space, edges, a, b, coef):
    """Scatter coef[e, d] * int_e v_a,i b_b,j into rows (scalar a) and cols (vector b, d)."""
    mesh = space.mesh
    prods = _edge_products(space)[(a, b)][edges]  # (n, m, m)
    loc = prods[:, :, None, :] * coef[:, None, :, None]  # (n, m, 2, m)
    rows = _scalar_idx(space, _side_elems(mesh, a, edges))
    cols = _vector_idx(space, _side_elems(mesh, b, edges)).reshape(-1, 2 * space.m)
    n = len(rows)
    r, c = _block_pairs(rows, cols)
    return r, c, loc.reshape(n, space.m, 2 * space.m)


def _a1_volume(space, divergence=False):
    K, m = space.mesh.n_elements, space.m
    if divergence:
        # -int v div(p): p = phi_j e_d -> -int phi_i d_d phi_j
        loc = -np.einsum("kq,kqi,kqjd->kidj", space.qweights, space.values, space.grads)
    else:
        # int p . grad v: p = phi_j e_d -> int phi_j d_d phi_i
        loc = np.einsum("kq,kqid,kqj->kidj", space.qweights, space.grads, space.values)
    rows = _scalar_idx(space, np.arange(K))
    cols = _vector_idx(space, np.arange(K)).reshape(K, 2 * m)
    r, c = _block_pairs(rows, cols)
    return r, c, loc.reshape(K, m, 2 * m)


def assemble_A1(space: DGSpace, cfg: StabilizationConfig):
    """A1(v, p) = sum_K int p.grad v - int_Gamma {{p}}.[[v]] + int_Gamma_I (C12.[[v]]) [[p]].

    Rows are scalar test functions, columns vector trial functions.
    """
    mesh = space.mesh
    n = mesh.edge_normal
    c12n = n @ np.asarray(cfg.C12)
    parts = [_a1_volume(space)]
    inner = mesh.edge_right >= 0
    bnd = ~inner
    for a in "LR":
        for b in "LR":
            sa, sb = _SIGN[a], _SIGN[b]
            coef = sa * n[inner] * (-0.5 + sb * c12n[inner])[:, None]
            parts.append(_mixed_edge_block(space, inner, a, b, coef))
    parts.append(_mixed_edge_block(space, bnd, "L", "L", -n[bnd]))
    return _stack(parts, (space.n_scalar, space.n_vector))


def assemble_A1_divergence_form(space: DGSpace, cfg: StabilizationConfig):
    """Same form written as -sum_K int v div p + int_Gamma_I ({{v}} + C12.[[v]]) [[p]]."""
    mesh = space.mesh
    n = mesh.edge_normal
    c12n = n @ np.asarray(cfg.C12)
    parts = [_a1_volume(space, divergence=True)]
    inner = mesh.edge_right >= 0
    for a in "LR":
        for b in "LR":
            sa, sb = _SIGN[a], _SIGN[b]
            coef = sb * n[inner] * (0.5 + sa * c12n[inner])[:, None]
            parts.append(_mixed_edge_block(space, inner, a, b, coef))
    return _stack(parts, (space.n_scalar, space.n_vector))


def _stack(parts, shape):
    r = np.concatenate([p[0].ravel() for p in parts])
    c = np.concatenate([p[1].ravel() for p in parts])
    v = np.concatenate([p[2].ravel() for p in parts])
    return _coo(r, c, v, shape)


def assemble_penalties(space: DGSpace, cfg: StabilizationConfig):
    """J over all edges (C11 [[u]].[[v]]) and J1 over interior edges (C22 [[p]][[w]])."""
    mesh = space.mesh
    m = space.m
    prods = _edge_products(space)
    c11 = edge_C11(space, cfg)
    c22 = edge_C22(space, cfg)
    inner = mesh.edge_right >= 0
    bnd = ~inner
    n = mesh.edge_normal

    jparts = []
    for a in "LR":
        for b in "LR":
            loc = _SIGN[a] * _SIGN[b] * c11[inner, None, None] * prods[(a, b)][inner]
            r, c = _block_pairs(
                _scalar_idx(space, _side_elems(mesh, a, inner)),
                _scalar_idx(space, _side_elems(mesh, b, inner)),
            )
            jparts.append((r, c, loc))
    loc = c11[bnd, None, None] * prods[("L", "L")][bnd]
    idx = _scalar_idx(space, mesh.edge_left[bnd])
    r, c = _block_pairs(idx, idx)
    jparts.append((r, c, loc))
    J = _stack(jparts, (space.n_scalar, space.n_scalar))

    j1parts = []
    nn = n[inner][:, :, None] * n[inner][:, None, :]  # (n, 2, 2)
    for a in "LR":
        for b in "LR":
            base = _SIGN[a] * _SIGN[b] * c22[inner, None, None] * prods[(a, b)][inner]
            loc = nn[:, :, None, :, None] * base[:, None, :, None, :]  # (n, c, i, d, j)
            rows = _vector_idx(space, _side_elems(mesh, a, inner)).reshape(-1, 2 * m)
            cols = _vector_idx(space, _side_elems(mesh, b, inner)).reshape(-1, 2 * m)
            r, c = _block_pairs(rows, cols)
            j1parts.append((r, c, loc.reshape(-1, 2 * m, 2 * m)))
    J1 = _stack(j1parts, (space.n_vector, space.n_vector))
    return J, J1


def assemble_system(space: DGSpace, coeffs: ProblemCoefficients, cfg: StabilizationConfig) -> SystemMatrices:
    Ms, Mv, A2 = assemble_masses(space, coeffs)
    J, J1 = assemble_penalties(space, cfg)
    return SystemMatrices(M_scalar=Ms, M_vector=Mv, A2=A2, A1=assemble_A1(space, cfg), J=J, J1=J1)


def edge_fluxes(space: DGSpace, cfg: StabilizationConfig, u: np.ndarray, sigma: np.ndarray):
    """Numerical fluxes at edge quadrature points.

    Returns ``u_hat`` with shape (E, nq) and ``sigma_hat`` with shape
    (E, nq, 2); boundary edges get ``u_hat = 0`` and
    ``sigma_hat = sigma - C11 u n``.
    """
    mesh = space.mesh
    inner = mesh.edge_right >= 0
    uc = space.scalar_block(u)
    sc = space.vector_block(sigma)
    uL = np.einsum("eqm,em->eq", space.trace_left, uc[mesh.edge_left])
    sL = np.einsum("eqm,ecm->eqc", space.trace_left, sc[mesh.edge_left])
    right = np.where(inner, mesh.edge_right, 0)
    uR = np.einsum("eqm,em->eq", space.trace_right, uc[right])
    sR = np.einsum("eqm,ecm->eqc", space.trace_right, sc[right])
    n = mesh.edge_normal[:, None, :]
    C12 = np.asarray(cfg.C12)
    c11 = edge_C11(space, cfg)[:, None]
    c22 = edge_C22(space, cfg)[:, None]

    jump_u = (uL - uR)[..., None] * n  # (E, q, 2)
    jump_s = np.einsum("eqc,eqc->eq", sL - sR, np.broadcast_to(n, sL.shape))
    u_hat = 0.5 * (uL + uR) + jump_u @ C12 - c22 * jump_s
    s_hat = 0.5 * (sL + sR) - c11[..., None] * jump_u - C12 * jump_s[..., None]

    bnd = ~inner
    u_hat[bnd] = 0.0
    s_hat[bnd] = sL[bnd] - c11[bnd][..., None] * uL[bnd][..., None] * n[bnd]
    return u_hat, s_hat


class KernelMass:
    """Memoized B(x, t, s)-weighted vector mass.

    ``scalar_weight(t, s)`` is not None exactly when B = b(t - s) I, in which
    case the matrix is ``b(t - s) * M_vector``. Stationary matrix kernels are
    cached by lag ``t - s``; others are reassembled per (t, s).
    """

    def __init__(self, space: DGSpace, coeffs: ProblemCoefficients, M_vector=None):
        self.space = space
        self.coeffs = coeffs
        self.M_vector = M_vector if M_vector is not None else assemble_masses(space, coeffs)[1]
        self._cache = {}

    @property
    def is_scalar(self) -> bool:
        return self.coeffs.kernel_scalar is not None

    @property
    def stationary(self) -> bool:
        return self.coeffs.B_stationary

    def scalar_weight(self, t: float, s: float) -> float | None:
        if not self.is_scalar:
            return None
        return float(self.coeffs.kernel_scalar(t - s))

    def __call__(self, t: float, s: float):
        w = self.scalar_weight(t, s)
        if w is not None:
            return w * self.M_vector
        if self.stationary:
            key = round((t - s) * 2**40)
            mat = self._cache.get(key)
            if mat is None:
                mat = self._cache[key] = assemble_kernel_mass(self.space, self.coeffs, t, s)
            return mat
        return assemble_kernel_mass(self.space, self.coeffs, t, s)
