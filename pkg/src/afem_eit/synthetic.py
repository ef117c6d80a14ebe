"""Ground-truth conductivities, fine-mesh electrode data and measurement noise."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cem import measure, solve_forward
from .estimator import forward_indicators, mark
from .fem import assemble_system
from .mesh import Mesh, build_initial_mesh, refine_times

log = logging.getLogger(__name__)

OMEGA_PRIME = (0.25, 0.75, 0.0, 0.5)
BACKGROUND = 1.0


def _blob1(x, y):
    return BACKGROUND + np.exp(-8.0 * (x**2 + (y - 0.55) ** 2))


def _blob2(x, y):
    return (BACKGROUND + np.exp(-20.0 * ((x + 0.7) ** 2 + y**2))
            + np.exp(-20.0 * (x**2 + (y - 0.7) ** 2)))


def _patch(x, y):
    x0, x1, y0, y1 = OMEGA_PRIME
    # background on the interface itself, see truth_field
    inside = (x > x0) & (x < x1) & (y > y0) & (y < y1)
    return BACKGROUND + np.where(inside, x / 2.0 + y, 0.0)


@dataclass(frozen=True)
class TruthSpec:
    example: int
    function: object
    support: tuple | None

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.function(points[..., 0], points[..., 1])


TRUTHS = {
    1: TruthSpec(1, _blob1, None),
    2: TruthSpec(2, _blob2, None),
    3: TruthSpec(3, _patch, OMEGA_PRIME),
}


def truth_spec(example: int) -> TruthSpec:
    try:
        return TRUTHS[int(example)]
    except (KeyError, ValueError, TypeError):
        raise ValueError(f"unknown example id {example!r}; expected 1, 2 or 3") from None


def truth_field(example: int, mesh: Mesh) -> np.ndarray:
    """Nodal interpolant of the true conductivity.

    For the piecewise example the jump factor is 1 only at vertices strictly
    inside the patch, so vertices on its boundary carry the background value.
    """
    return truth_spec(example)(mesh.vertices)


@dataclass
class ExactData:
    voltages: np.ndarray  # (J, L)
    mesh: Mesh
    levels: int


def generate_exact_data(example: int, battery, dof_target: int, mesh0: Mesh | None = None,
                        theta: float = 0.7, impedances=None) -> ExactData:
    """Electrode voltages of the true conductivity on an adaptively refined fine mesh.

    The mesh is refined with forward-only indicators at the true conductivity
    until it has at least ``dof_target`` vertices.  Its refinement history is
    unrelated to the inversion, which keeps the data free of inverse crime.
    """
    battery = np.atleast_2d(battery)
    mesh = build_initial_mesh(8) if mesh0 is None else mesh0
    levels = 0
    while True:
        sigma = truth_field(example, mesh)
        system = assemble_system(mesh, sigma, impedances)
        if mesh.n_vertices >= dof_target:
            voltages = measure(system, battery)
            return ExactData(voltages, mesh, levels)
        state = solve_forward(system, battery)
        eta = forward_indicators(mesh, sigma, state.potential, state.voltages, impedances)
        mesh, _ = refine_times(mesh, mark(eta, theta), bisections=2)
        levels += 1
        log.debug("data mesh level %d: %d vertices", levels, mesh.n_vertices)


@dataclass
class NoisySet:
    exact: np.ndarray
    noisy: np.ndarray
    draws: np.ndarray
    epsilon: float
    seed: int


def add_noise(exact, epsilon: float, seed: int) -> NoisySet:
    """U^delta_l = U_l + epsilon * max_l |U_l| * xi_l, independently per pattern.

    The maximum is taken over the electrodes of each pattern.  Pattern j draws
    from its own child of ``SeedSequence(seed)``.
    """
    if epsilon < 0:
        raise ValueError("noise level must be nonnegative")
    exact = np.atleast_2d(np.asarray(exact, dtype=float))
    children = np.random.SeedSequence(seed).spawn(len(exact))
    draws = np.stack([np.random.default_rng(c).standard_normal(exact.shape[1]) for c in children])
    scale = epsilon * np.max(np.abs(exact), axis=1, keepdims=True)
    noisy = exact + scale * draws
    return NoisySet(exact, noisy, draws, float(epsilon), int(seed))
