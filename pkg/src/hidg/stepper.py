"""Implicit three-field time stepping for the fully discrete scheme.

Unknowns per step are the half-step coefficients ``[alpha; beta; gamma]`` of
U, Q = grad U and Z (the flux). The monolithic block system is

    [ c M + w J      0            w A1 ] [alpha]   [scalar rhs]
    [ -A1^T          M_v          J1   ] [beta ] = [0         ]
    [ 0              A2 + K_n    -M_v  ] [gamma]   [-memory   ]

with ``(c, w) = (4/k^2, 1)`` on the first step and ``(2/k^2, 1/2)`` after,
``K_n`` the implicit memory weight. Full-step values follow from
``alpha^{n+1} = 2 alpha^{n+1/2} - alpha^n``.

By default the block-diagonal vector mass is inverted exactly and the system
is condensed before the sparse LU (to alpha alone when J1 = 0, to
(alpha, gamma) otherwise); ``condense=False`` factors the full block matrix.
Either way the residual is checked on the full system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dgspace import DGSpace, FieldKind, l2_project
from .forms import KernelMass, ProblemCoefficients, StabilizationConfig, SystemMatrices, assemble_load, assemble_system
from .memory import History, TimeGrid, implicit_coefficient, memory_rhs

__all__ = ["SolverError", "TimeState", "Stepper", "init_state", "energy_norm", "dump_state"]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass
class TimeState:
    n: int
    alpha: np.ndarray
    alpha_prev: np.ndarray | None
    alpha_half: np.ndarray | None
    beta_half: np.ndarray | None
    gamma_half: np.ndarray | None
    beta0: np.ndarray
    gamma0: np.ndarray
    u1: np.ndarray
    history: History | None = None
    energy_log: list = field(default_factory=list)
    residual_log: list = field(default_factory=list)
    gamma_half_prev: np.ndarray | None = None


def init_state(space: DGSpace, matrices: SystemMatrices, coeffs: ProblemCoefficients) -> TimeState:
    """U^0 = P u0, Q^0 = P grad u0, Z^0 = P(A grad u0), velocity P u1 (P = L2 projection)."""
    alpha0 = l2_project(space, coeffs.u0, FieldKind.SCALAR).values
    u1 = l2_project(space, coeffs.u1, FieldKind.SCALAR).values

    def grad_u0(x, y, h=1e-6):
        # u0 is only given as a callable; central differences are exact enough
        # for initial fluxes, which the scheme never reuses
        gx = (coeffs.u0(x + h, y) - coeffs.u0(x - h, y)) / (2 * h)
        gy = (coeffs.u0(x, y + h) - coeffs.u0(x, y - h)) / (2 * h)
        return np.stack([np.broadcast_to(gx, np.shape(x)), np.broadcast_to(gy, np.shape(x))], axis=-1)

    grad = coeffs.grad_u0 or grad_u0
    beta0 = l2_project(space, grad, FieldKind.VECTOR).values

    def flux0(x, y):
        g = grad(x, y)
        A = np.broadcast_to(np.asarray(coeffs.A(x, y), dtype=float), np.shape(x) + (2, 2))
        return np.einsum("...cd,...d->...c", A, g)

    gamma0 = beta0.copy() if coeffs.A_is_identity else l2_project(space, flux0, FieldKind.VECTOR).values
    return TimeState(
        n=0,
        alpha=alpha0,
        alpha_prev=None,
        alpha_half=None,
        beta_half=None,
        gamma_half=None,
        beta0=beta0,
        gamma0=gamma0,
        u1=u1,
    )


def energy_norm(state: TimeState, matrices: SystemMatrices, k: float) -> float:
    """|||Phi^{n-1/2}||| for the most recent completed step (n = state.n)."""
    if state.n == 0:
        return 0.0
    dU = (state.alpha - state.alpha_prev) / k
    a, b, g = state.alpha_half, state.beta_half, state.gamma_half
    e2 = (
        dU @ (matrices.M_scalar @ dU)
        + b @ (matrices.A2 @ b)
        + g @ (matrices.J1 @ g)
        + a @ (matrices.J @ a)
    )
    return float(np.sqrt(max(e2, 0.0)))


class Stepper:
    """Owns the assembled operators, the block factorizations and the load cache."""

    def __init__(
        self,
        space: DGSpace,
        coeffs: ProblemCoefficients,
        cfg: StabilizationConfig,
        grid: TimeGrid,
        matrices: SystemMatrices | None = None,
        condense: bool = True,
    ):
        self.space = space
        self.coeffs = coeffs
        self.cfg = cfg
        self.grid = grid
        self.matrices = matrices if matrices is not None else assemble_system(space, coeffs, cfg)
        self.kernel = KernelMass(space, coeffs, self.matrices.M_vector)
        self._factors = {}
        self._loads = {}
        self.ns = space.n_scalar
        self.nv = space.n_vector
        self.condense = condense
        self.Mv_inv = block_diagonal_inverse(self.matrices.M_vector, 2 * space.m)
        self.J1_zero = self.matrices.J1.count_nonzero() == 0

    # -- assembly helpers ------------------------------------------------

    def load(self, t_index: float) -> np.ndarray:
        """Load vector at t = t_index * k, cached by index."""
        key = float(t_index)
        vec = self._loads.get(key)
        if vec is None:
            vec = assemble_load(self.space, self.coeffs, t_index * self.grid.k)
            if len(self._loads) > 8:
                self._loads.pop(next(iter(self._loads)))
            self._loads[key] = vec
        return vec

    def _coefficients(self, first: bool):
        k = self.grid.k
        return (4.0 / k**2, 1.0) if first else (2.0 / k**2, 0.5)

    def block_matrix(self, n: int, first: bool) -> sp.csc_matrix:
        """The monolithic 3x3 block operator of step n."""
        mat = self.matrices
        c, w = self._coefficients(first)
        implicit = implicit_coefficient(self.grid, n, self.kernel)
        return sp.bmat(
            [
                [c * mat.M_scalar + w * mat.J, None, w * mat.A1],
                [-mat.A1.T, mat.M_vector, mat.J1],
                [None, mat.A2 + implicit, -mat.M_vector],
            ],
            format="csc",
        )

    def _factorize(self, n: int, first: bool):
        mat = self.matrices
        c, w = self._coefficients(first)
        implicit = implicit_coefficient(self.grid, n, self.kernel)
        At = (mat.A2 + implicit).tocsr()
        if not self.condense:
            A = self.block_matrix(n, first)
            return _Factor(A, _splu(A, n), At, None)
        # beta = Mv^{-1}(r_i + A1^T alpha - J1 gamma) is eliminated exactly;
        # gamma as well when J1 vanishes (LDG fluxes)
        AtMi = At @ self.Mv_inv
        scalar = c * mat.M_scalar + w * mat.J
        if self.J1_zero:
            S = scalar + w * (mat.A1 @ self.Mv_inv @ AtMi @ mat.A1.T)
        else:
            S = sp.bmat(
                [[scalar, w * mat.A1], [AtMi @ mat.A1.T, -(mat.M_vector + AtMi @ mat.J1)]],
                format="csc",
            )
        return _Factor(None, _splu(S.tocsc(), n, symmetric_mode=True), At, AtMi)

    def _solver(self, n: int, first: bool):
        key = ("first",) if first else ("step", None if self.coeffs.B_stationary else n)
        entry = self._factors.get(key)
        if entry is None:
            if not first and not self.coeffs.B_stationary:
                self._factors = {k_: v for k_, v in self._factors.items() if k_[0] == "first"}
            entry = self._factors[key] = self._factorize(n, first)
        return entry

    def _apply(self, fac, first, x):
        """Full block operator times x, plus the norm of every term per block row."""
        mat = self.matrices
        c, w = self._coefficients(first)
        a, b, g = self._split(x)
        rows = [
            [c * (mat.M_scalar @ a), w * (mat.J @ a), w * (mat.A1 @ g)],
            [-(mat.A1.T @ a), mat.M_vector @ b, mat.J1 @ g],
            [fac.At @ b, -(mat.M_vector @ g)],
        ]
        Ax = np.concatenate([sum(terms) for terms in rows])
        scales = [sum(np.linalg.norm(t) for t in terms) for terms in rows]
        return Ax, scales

    def _condensed_solve(self, fac, first, rhs):
        if not self.condense:
            return fac.lu.solve(rhs)
        mat = self.matrices
        _, w = self._coefficients(first)
        r_s, r_i, r_ii = self._split(rhs)
        Mi = self.Mv_inv
        if self.J1_zero:
            g_src = fac.AtMi @ r_i - r_ii
            a = fac.lu.solve(r_s - w * (mat.A1 @ (Mi @ g_src)))
            g = Mi @ (fac.AtMi @ (mat.A1.T @ a) + g_src)
        else:
            y = fac.lu.solve(np.concatenate([r_s, r_ii - fac.AtMi @ r_i]))
            a, g = y[: self.ns], y[self.ns :]
        b = Mi @ (r_i + mat.A1.T @ a - mat.J1 @ g)
        return np.concatenate([a, b, g])

    def _solve(self, n: int, first: bool, rhs: np.ndarray):
        fac = self._solver(n, first)
        x = self._condensed_solve(fac, first, rhs)
        res, r = self._residual(fac, first, x, rhs)
        if res > 1e-12:
            x += self._condensed_solve(fac, first, r)  # one sweep of iterative refinement
            res, _ = self._residual(fac, first, x, rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite solution at step {n}")
        return x, res

    def _residual(self, fac, first, x, rhs):
        """Largest blockwise residual, relative to the size of that block's terms."""
        Ax, scales = self._apply(fac, first, x)
        r = rhs - Ax
        rel = []
        for sl, scale in zip(self._blocks(), scales):
            denom = scale + np.linalg.norm(rhs[sl])
            rel.append(float(np.linalg.norm(r[sl]) / denom) if denom > 0 else 0.0)
        return max(rel), r

    def _blocks(self):
        ns, nv = self.ns, self.nv
        return slice(0, ns), slice(ns, ns + nv), slice(ns + nv, ns + 2 * nv)

    def _split(self, x):
        ns, nv = self.ns, self.nv
        return x[:ns], x[ns : ns + nv], x[ns + nv :]

    # -- time levels -----------------------------------------------------

    def init_state(self) -> TimeState:
        state = init_state(self.space, self.matrices, self.coeffs)
        state.history = History(self.grid, self.nv)
        return state

    def first_step(self, state: TimeState) -> TimeState:
        if state.n != 0:
            raise SolverError("first_step needs a state at n = 0")
        mat, k = self.matrices, self.grid.k
        rhs = np.zeros(self.ns + 2 * self.nv)
        rhs[: self.ns] = (
            self.load(0.5)
            + (2.0 / k) * (mat.M_scalar @ state.u1)
            + (4.0 / k**2) * (mat.M_scalar @ state.alpha)
        )
        # memory at n = 0: empty history, only the implicit weight (in the matrix)
        x, res = self._solve(0, True, rhs)
        return self._advance(state, x, res)

    def step(self, state: TimeState) -> TimeState:
        n = state.n
        if n < 1:
            raise SolverError("step needs n >= 1; call first_step first")
        if n >= self.grid.N:
            raise SolverError(f"already at final step N={self.grid.N}")
        mat, k = self.matrices, self.grid.k
        f_quarter = 0.25 * (self.load(n + 1) + 2.0 * self.load(n) + self.load(n - 1))
        rhs = np.zeros(self.ns + 2 * self.nv)
        rhs[: self.ns] = (
            f_quarter
            + (mat.M_scalar @ (3.0 * state.alpha - state.alpha_prev)) / k**2
            - 0.5 * (mat.A1 @ state.gamma_half + mat.J @ state.alpha_half)
        )
        rhs[self.ns + self.nv :] = -memory_rhs(state.history, self.kernel, n)
        x, res = self._solve(n, False, rhs)
        return self._advance(state, x, res)

    def _advance(self, state: TimeState, x: np.ndarray, res: float) -> TimeState:
        a, b, g = self._split(x)
        new = TimeState(
            n=state.n + 1,
            alpha=2.0 * a - state.alpha,
            alpha_prev=state.alpha,
            alpha_half=a,
            beta_half=b,
            gamma_half=g,
            beta0=state.beta0,
            gamma0=state.gamma0,
            u1=state.u1,
            history=state.history,
            energy_log=state.energy_log,
            residual_log=state.residual_log,
            gamma_half_prev=state.gamma_half,
        )
        new.history.append(b)
        new.energy_log.append(energy_norm(new, self.matrices, self.grid.k))
        new.residual_log.append(res)
        return new

    def run(self, state: TimeState | None = None, until: int | None = None, callback=None) -> TimeState:
        """March from ``state`` (default: initial data) to step ``until`` (default N)."""
        state = self.init_state() if state is None else state
        until = self.grid.N if until is None else until
        while state.n < until:
            state = self.first_step(state) if state.n == 0 else self.step(state)
            if callback is not None:
                callback(state)
        log.debug("reached step %d (t=%g)", state.n, self.grid.t(state.n))
        return state


@dataclass
class _Factor:
    A: sp.csc_matrix | None
    lu: object
    At: sp.csr_matrix
    AtMi: sp.csr_matrix | None


def _splu(A, n, symmetric_mode=False):
    try:
        if symmetric_mode:
            # the condensed operators have a dominant, nonzero diagonal
            return spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        return spla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SolverError(f"factorization failed at step {n}: {exc}") from exc


def block_diagonal_inverse(mat, bs: int) -> sp.csr_matrix:
    """Inverse of a block-diagonal matrix with square blocks of size ``bs``."""
    coo = mat.tocoo()
    nb = mat.shape[0] // bs
    if np.any(coo.row // bs != coo.col // bs):
        raise SolverError("matrix is not block diagonal")
    blocks = np.zeros((nb, bs, bs))
    np.add.at(blocks, (coo.row // bs, coo.row % bs, coo.col % bs), coo.data)
    inv = np.linalg.inv(blocks)
    base = (np.arange(nb) * bs)[:, None, None]
    rows = np.broadcast_to(base + np.arange(bs)[None, :, None], inv.shape)
    cols = np.broadcast_to(base + np.arange(bs)[None, None, :], inv.shape)
    return sp.csr_matrix((inv.ravel(), (rows.ravel(), cols.ravel())), shape=mat.shape)


def dump_state(state: TimeState, grid: TimeGrid, path) -> None:
    """Plain-text snapshot: header ``step n t``, then one labelled vector per line."""
    rows = [f"step {state.n} {grid.t(state.n)!r}"]

    def vec(label, v):
        if v is not None:
            rows.append(label + " " + " ".join(repr(float(x)) for x in v))

    vec("alpha", state.alpha)
    vec("alpha_half", state.alpha_half)
    vec("beta_half", state.beta_half)
    vec("gamma_half", state.gamma_half)
    Path(path).write_text("\n".join(rows) + "\n")
