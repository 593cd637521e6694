"""Fixed-step RK4 integration of density-matrix equations (the reference solution)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linops import as_operator, dagger


class IntegrationError(RuntimeError):
    pass


@dataclass
class DensityMatrixTrajectory:
    grid: np.ndarray
    rho: np.ndarray  # (n_times, D, D)

    def expectation(self, a) -> np.ndarray:
        """``tr(A rho(t))`` on the grid."""
        return np.einsum("ij,tji->t", np.asarray(a), self.rho)

    def element(self, i: int, j: int) -> np.ndarray:
        return self.rho[:, i, j]


def integrate_master(rhs, rho0, grid, dt: float | None = None) -> DensityMatrixTrajectory:
    """Classical RK4 for ``d rho/dt = rhs(t, rho)``, sampled on a uniform ``grid``.

    ``dt`` must divide the grid spacing. ``rho`` is re-Hermitized after every
    step. Raises :class:`IntegrationError` on overflow or NaN.
    """
    rho = np.array(as_operator(rho0), dtype=complex)
    grid = np.asarray(grid, dtype=float)
    if grid.size > 1:
        h = np.diff(grid)
        if np.any(h <= 0) or not np.allclose(h, h[0], rtol=1e-9, atol=1e-12):
            raise ValueError("grid must be uniform and increasing")
        spacing = h[0]
        dt = spacing if dt is None else dt
        sub = int(round(spacing / dt))
        if sub < 1 or abs(sub * dt - spacing) > 1e-9 * spacing:
            raise ValueError(f"dt={dt} does not divide the grid spacing {spacing}")
    else:
        sub = 0
    out = np.empty((grid.size,) + rho.shape, dtype=complex)
    out[0] = rho
    t0 = grid[0]
    step = 0
    for k in range(1, grid.size):
        for _ in range(sub):
            t = t0 + step * dt
            k1 = rhs(t, rho)
            k2 = rhs(t + 0.5 * dt, rho + 0.5 * dt * k1)
            k3 = rhs(t + 0.5 * dt, rho + 0.5 * dt * k2)
            k4 = rhs(t + dt, rho + dt * k3)
            rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            rho = 0.5 * (rho + dagger(rho))
            step += 1
            if not np.all(np.isfinite(rho)) or np.max(np.abs(rho)) > 1e150:
                raise IntegrationError(f"integration became unstable at t={t + dt:.6g}")
        out[k] = rho
    return DensityMatrixTrajectory(grid, out)


def model_rhs(model):
    """Adapt a pseudo-Lindblad model to the ``rhs(t, rho)`` signature."""
    return lambda t, rho: model.master_rhs(rho, t)
