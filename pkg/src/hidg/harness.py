"""Manufactured-solution convergence studies and their CSV reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .dgspace import DGSpace, FieldCoeffs, FieldKind, l2_error
from .forms import REGIMES, ProblemCoefficients, RateExponents, StabilizationConfig
from .memory import TimeGrid
from .mesh import Mesh, build_uniform_triangulation
from .stepper import Stepper, TimeState, dump_state

__all__ = [
    "ManufacturedProblem",
    "build_manufactured",
    "manufactured_residual",
    "predicted_rates",
    "time_step_for",
    "LevelResult",
    "ErrorReport",
    "StudyConfig",
    "solve_level",
    "run_convergence_study",
    "run_study_grid",
    "stability_ratio",
    "temporal_study",
    "eoc",
    "CSV_COLUMNS",
    "write_report_csv",
]

log = logging.getLogger(__name__)

PI = math.pi


@dataclass
class ManufacturedProblem:
    exact_u: Callable
    exact_q: Callable
    exact_sigma: Callable
    source_f: Callable
    coefficients: ProblemCoefficients


def build_manufactured() -> ManufacturedProblem:
    """u = e^t sin(pi x) sin(pi y) with A = I and B = exp(t - s) I on the unit square."""

    def w(x, y):
        return np.sin(PI * x) * np.sin(PI * y)

    def grad_w(x, y):
        return np.stack([PI * np.cos(PI * x) * np.sin(PI * y), PI * np.sin(PI * x) * np.cos(PI * y)], axis=-1)

    def exact_u(x, y, t):
        return np.exp(t) * w(x, y)

    def exact_q(x, y, t):
        return np.exp(t) * grad_w(x, y)

    def exact_sigma(x, y, t):
        # grad u + int_0^t e^{t-s} e^s grad w ds = (1 + t) e^t grad w
        return (1.0 + t) * np.exp(t) * grad_w(x, y)

    def source_f(x, y, t):
        return np.exp(t) * w(x, y) * (1.0 + 2.0 * PI**2 * (1.0 + t))

    coeffs = ProblemCoefficients(
        f=source_f,
        u0=lambda x, y: exact_u(x, y, 0.0),
        u1=lambda x, y: w(x, y),
        kernel_scalar=np.exp,
        grad_u0=lambda x, y: exact_q(x, y, 0.0),
    )
    return ManufacturedProblem(exact_u, exact_q, exact_sigma, source_f, coeffs)


def manufactured_residual(problem: ManufacturedProblem, samples: int = 20, seed: int = 0) -> np.ndarray:
    """u_tt - div(sigma) - f at random space-time points.

    u_tt comes from a fourth-order finite-difference stencil in t, the memory
    integral from adaptive quadrature, and the spatial Laplacian from the
    analytic second derivatives of sin(pi x) sin(pi y).
    """
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(samples, 3))
    out = np.empty(samples)
    d = 1e-2
    for i, (x, y, t) in enumerate(pts):
        u = lambda tt: float(problem.exact_u(x, y, tt))  # noqa: E731
        u_tt = (-u(t + 2 * d) + 16 * u(t + d) - 30 * u(t) + 16 * u(t - d) - u(t - 2 * d)) / (12 * d**2)
        lap = lambda tt: -2.0 * PI**2 * u(tt)  # noqa: E731
        memory, _ = integrate.quad(lambda s: math.exp(t - s) * lap(s), 0.0, t, epsabs=1e-13, epsrel=1e-13)
        div_sigma = lap(t) + memory
        out[i] = u_tt - div_sigma - float(problem.source_f(x, y, t))
    return out


def predicted_rates(cfg: StabilizationConfig, p: int, r: float | None = None) -> RateExponents:
    return cfg.rates(p, r)


def time_step_for(h: float, p: int, T: float = 1.0) -> TimeGrid:
    """k = min(h/2, h^{(p+1)/2}), rounded down so that T/k is an integer."""
    k = min(0.5 * h, h ** ((p + 1) / 2))
    N = max(1, math.ceil(T / k - 1e-9))
    return TimeGrid.uniform(T, N)


@dataclass
class LevelResult:
    n: int
    h: float
    k: float
    N: int
    e_U: float
    e_Z: float
    wall_time: float
    max_residual: float


@dataclass
class ErrorReport:
    regime: str
    degree: int
    levels: list[LevelResult]
    expected: RateExponents

    @property
    def eoc_U(self) -> list[float]:
        return eoc([lv.e_U for lv in self.levels], [lv.h for lv in self.levels])

    @property
    def eoc_Z(self) -> list[float]:
        return eoc([lv.e_Z for lv in self.levels], [lv.h for lv in self.levels])


def eoc(errors: Sequence[float], hs: Sequence[float]) -> list[float]:
    """log(e_i / e_{i+1}) / log(h_i / h_{i+1}); log2 ratios under exact halving."""
    return [
        math.log(errors[i] / errors[i + 1]) / math.log(hs[i] / hs[i + 1])
        for i in range(len(errors) - 1)
    ]


@dataclass
class StudyConfig:
    regime: str = "c11-one-c22-zero"
    degree: int = 1
    levels: Sequence[int] = (4, 8, 16, 32)
    t_final: float = 1.0
    zeta: float = 1.0
    kappa: float | None = None
    k: float | None = None

    def stabilization(self) -> StabilizationConfig:
        over = {"zeta": self.zeta}
        if self.kappa is not None and REGIMES[self.regime]["kappa"] > 0:
            over["kappa"] = self.kappa
        return StabilizationConfig.from_regime(self.regime, **over)


def solve_level(
    problem: ManufacturedProblem,
    cfg: StabilizationConfig,
    p: int,
    mesh: Mesh | int,
    t_final: float = 1.0,
    k: float | None = None,
    dump_dir=None,
    dump_every: int = 0,
) -> tuple[LevelResult, TimeState, DGSpace]:
    """March the manufactured problem to ``t_final`` and measure both errors.

    e_U compares U^N with u(t_N); e_Z compares the last half-step flux
    Z^{N-1/2} with sigma(t_N - k/2).
    """
    start = time.perf_counter()
    n = mesh if isinstance(mesh, int) else None
    mesh = build_uniform_triangulation(mesh) if isinstance(mesh, int) else mesh
    h = mesh.mesh_size
    grid = time_step_for(h, p, t_final) if k is None else TimeGrid.uniform(t_final, max(1, math.ceil(t_final / k - 1e-9)))
    space = DGSpace(mesh, p)
    stepper = Stepper(space, problem.coefficients, cfg, grid)

    callback = None
    if dump_dir is not None and dump_every > 0:
        def callback(state):
            if state.n % dump_every == 0:
                dump_state(state, grid, f"{dump_dir}/step_{state.n:06d}.txt")

    state = stepper.run(callback=callback)
    if dump_dir is not None:
        dump_state(state, grid, f"{dump_dir}/state_final.txt")

    T = grid.T
    t_half = T - 0.5 * grid.k
    e_U = l2_error(FieldCoeffs(space, FieldKind.SCALAR, state.alpha), lambda x, y: problem.exact_u(x, y, T))
    e_Z = l2_error(FieldCoeffs(space, FieldKind.VECTOR, state.gamma_half), lambda x, y: problem.exact_sigma(x, y, t_half))
    result = LevelResult(
        n=n if n is not None else -1,
        h=h,
        k=grid.k,
        N=grid.N,
        e_U=e_U,
        e_Z=e_Z,
        wall_time=time.perf_counter() - start,
        max_residual=max(state.residual_log),
    )
    log.info("p=%d h=%.4g k=%.4g: e_U=%.3e e_Z=%.3e (%.1fs)", p, h, grid.k, e_U, e_Z, result.wall_time)
    return result, state, space


def run_convergence_study(config: StudyConfig, problem: ManufacturedProblem | None = None) -> ErrorReport:
    problem = problem or build_manufactured()
    cfg = config.stabilization()
    levels = []
    for n in config.levels:
        try:
            res, _, _ = solve_level(problem, cfg, config.degree, int(n), config.t_final, config.k)
        except Exception as exc:
            raise type(exc)(f"[{config.regime}, p={config.degree}, n={n}] {exc}") from exc
        levels.append(res)
    return ErrorReport(config.regime, config.degree, levels, predicted_rates(cfg, config.degree))


def run_study_grid(regimes: Sequence[str], degrees: Sequence[int], **kwargs) -> list[ErrorReport]:
    problem = build_manufactured()
    return [
        run_convergence_study(StudyConfig(regime=r, degree=p, **kwargs), problem)
        for r in regimes
        for p in degrees
    ]


def stability_ratio(regime: str, p: int, n: int, k: float, T: float = 1.0) -> tuple[float, list[float]]:
    """max_n |||Phi^{n+1/2}||| / |||Phi^{1/2}||| for f = 0, u0 = sin sin, u1 = 0."""
    base = build_manufactured().coefficients
    coeffs = ProblemCoefficients(
        u0=base.u0,
        u1=lambda x, y: np.zeros_like(x),
        kernel_scalar=base.kernel_scalar,
        grad_u0=base.grad_u0,
    )
    grid = TimeGrid.uniform(T, max(1, math.ceil(T / k - 1e-9)))
    space = DGSpace(build_uniform_triangulation(n), p)
    state = Stepper(space, coeffs, StabilizationConfig.from_regime(regime), grid).run()
    energies = state.energy_log
    return max(energies) / energies[0], energies


def temporal_study(p: int = 3, n: int = 16, ks: Sequence[float] = (1 / 8, 1 / 16, 1 / 32), regime: str = "c11-one-c22-zero"):
    """Errors e_U(T) on a fixed mesh for a sequence of time steps, and their observed orders."""
    problem = build_manufactured()
    cfg = StabilizationConfig.from_regime(regime)
    mesh = build_uniform_triangulation(n)
    errs = [solve_level(problem, cfg, p, mesh, 1.0, k)[0].e_U for k in ks]
    return errs, eoc(errs, list(ks))


CSV_COLUMNS = [
    "regime",
    "p",
    "level",
    "h",
    "k",
    "e_U",
    "eoc_U",
    "e_Z",
    "eoc_Z",
    "predicted_u_order",
    "predicted_flux_order",
    "wall_time_s",
]

CSV_NOTE = "# e_U at t_N = T; e_Z is the half-step flux Z^(N-1/2) against sigma(T - k/2)"


def _g(x: float) -> str:
    return f"{x:.6g}"


def write_report_csv(reports: Sequence[ErrorReport], stream=None, timing: bool = False) -> str:
    """Render reports as CSV; wall times are left blank unless ``timing``.

    Without timing the output depends only on the configuration.
    """
    buf = io.StringIO()
    buf.write(CSV_NOTE + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in reports:
        eu, ez = rep.eoc_U, rep.eoc_Z
        for i, lv in enumerate(rep.levels):
            writer.writerow(
                [
                    rep.regime,
                    rep.degree,
                    i,
                    _g(lv.h),
                    _g(lv.k),
                    _g(lv.e_U),
                    _g(eu[i - 1]) if i else "",
                    _g(lv.e_Z),
                    _g(ez[i - 1]) if i else "",
                    _g(rep.expected.u_order),
                    _g(rep.expected.flux_order),
                    f"{lv.wall_time:.3f}" if timing else "",
                ]
            )
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text
