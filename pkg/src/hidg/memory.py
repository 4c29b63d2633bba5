"""Midpoint quadrature of the Volterra memory term and its history store."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forms import KernelMass

__all__ = ["TimeGrid", "History", "HistoryError", "eps_quadrature", "memory_rhs", "implicit_coefficient"]


class HistoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    k: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if not self.k > 0:
            raise ValueError(f"time step must be positive, got {self.k!r}")

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        return cls(k=T / N, N=int(N))

    @property
    def T(self) -> float:
        return self.N * self.k

    def t(self, n) -> float:
        return n * self.k

    def half(self, j) -> float:
        """t_{j+1/2}."""
        return (j + 0.5) * self.k


def eps_quadrature(phi, n: int, grid: TimeGrid):
    """k * sum_{j<n} phi(t_{j+1/2}), the midpoint approximation of int_0^{t_n} phi."""
    if not 0 <= n <= grid.N:
        raise ValueError(f"n={n} outside [0, {grid.N}]")
    if n == 0:
        return 0.0
    total = phi(grid.half(0))
    total = np.array(total, dtype=float, copy=True) if np.ndim(total) else float(total)
    for j in range(1, n):
        total = total + phi(grid.half(j))
    return grid.k * total


class History:
    """Append-only store of the half-step gradient coefficients beta^{j+1/2}."""

    def __init__(self, grid: TimeGrid, size: int):
        self.grid = grid
        self._data = np.empty((grid.N, size))
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def append(self, beta_half: np.ndarray) -> None:
        if self._len >= self.grid.N:
            raise HistoryError("history is full")
        self._data[self._len] = beta_half
        self._len += 1

    def __getitem__(self, j) -> np.ndarray:
        if not -self._len <= j < self._len:
            raise IndexError(j)
        row = self._data[j % self._len]
        view = row.view()
        view.setflags(write=False)
        return view

    @property
    def beta_halves(self) -> np.ndarray:
        view = self._data[: self._len].view()
        view.setflags(write=False)
        return view

    @property
    def nbytes(self) -> int:
        return self._data.nbytes


def memory_rhs(history: History, kernel_mass: KernelMass, n: int) -> np.ndarray:
    """Explicit part of the averaged memory quadrature at step n.

    (k/2) sum_{i<n} [B(t_{n+1}, t_{i+1/2}) + B(t_n, t_{i+1/2})] beta^{i+1/2};
    the i = n term belongs to :func:`implicit_coefficient`.
    """
    if len(history) < n:
        raise HistoryError(f"memory term at step {n} needs {n} stored half-steps, have {len(history)}")
    grid = history.grid
    size = history._data.shape[1]
    if n == 0:
        return np.zeros(size)
    k = grid.k
    t_next, t_now = grid.t(n + 1), grid.t(n)
    H = history.beta_halves[:n]
    if kernel_mass.is_scalar:
        s = grid.half(np.arange(n))
        b = kernel_mass.coeffs.kernel_scalar
        w = 0.5 * k * (np.vectorize(b, otypes=[float])(t_next - s) + np.vectorize(b, otypes=[float])(t_now - s))
        return kernel_mass.M_vector @ (H.T @ w)
    out = np.zeros(size)
    for i in range(n):
        s = grid.half(i)
        out += 0.5 * k * (kernel_mass(t_next, s) @ H[i] + kernel_mass(t_now, s) @ H[i])
    return out


def implicit_coefficient(grid: TimeGrid, n: int, kernel_mass: KernelMass):
    """(k/2) B(t_{n+1}, t_{n+1/2}): weight of the unknown beta^{n+1/2} in the memory sum."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    return 0.5 * grid.k * kernel_mass(grid.t(n + 1), grid.half(n))
