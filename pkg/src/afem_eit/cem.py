"""Forward and adjoint solves of the complete electrode model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import CemSystem, assemble_current_rhs, is_zero_mean


@dataclass
class CemSolution:
    """Potential(s) ``u`` of shape (N,) or (J, N) and voltages ``U`` of shape (L,) or (J, L)."""

    potential: np.ndarray
    voltages: np.ndarray


def trigonometric_battery(n_electrodes: int = 16, n_patterns: int = 10) -> np.ndarray:
    """Cosine current patterns I^(j)_l = cos(2 pi j l / L), j = 1..J, l = 1..L.

    Returns an array of shape (J, L).
    """
    if not 1 <= n_patterns <= n_electrodes - 1:
        raise ValueError(f"pattern count must lie in [1, {n_electrodes - 1}], got {n_patterns}")
    j = np.arange(1, n_patterns + 1)[:, None]
    l = np.arange(1, n_electrodes + 1)[None, :]
    return np.cos(2.0 * np.pi * j * l / n_electrodes)


def solve_forward(system: CemSystem, current) -> CemSolution:
    rhs = assemble_current_rhs(current, system.basis, system.n_nodes)
    u, U = system.split(system.solve(rhs))
    return CemSolution(u, U)


def solve_adjoint(system: CemSystem, voltage_misfit) -> CemSolution:
    """Adjoint state (p, P) driven by the voltage misfit.

    The adjoint problem has the same operator as the forward one with the
    misfit in place of the current.  The misfit is projected to zero mean first.
    """
    misfit = np.asarray(voltage_misfit, dtype=float)
    misfit = misfit - misfit.mean(axis=-1, keepdims=True)
    return solve_forward(system, misfit)


def measure(system: CemSystem, battery) -> np.ndarray:
    """Electrode voltages for each pattern of the battery, shape (J, L)."""
    battery = np.atleast_2d(battery)
    if not is_zero_mean(battery):
        raise ValueError("every current pattern must have zero mean")
    return solve_forward(system, battery).voltages


def measurement_matrix(voltages, battery) -> np.ndarray:
    """M_ij = <U(I^(i)), I^(j)>; symmetric by reciprocity."""
    return np.asarray(voltages) @ np.asarray(battery).T


def reciprocity_error(voltages, battery) -> float:
    m = measurement_matrix(voltages, battery)
    scale = np.max(np.abs(m))
    return float(np.max(np.abs(m - m.T)) / scale) if scale > 0 else 0.0
