"""The SOLVE, ESTIMATE, MARK, REFINE loop and the uniform-refinement baseline."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .cem import reciprocity_error
from .estimator import EstimatorField, compute_estimator, mark
from .fem import LAMBDA, mass_matrix, prolong, stiffness_matrix
from .inversion import InversionProblem, OptimizerState, box_masks, eval_gradient, minimize
from .mesh import Mesh, ParentMap, refine_times

log = logging.getLogger(__name__)

MAX_LEVELS = 15
DOF_BUDGET = 20000
BISECTIONS = 1


@dataclass(frozen=True)
class LevelRecord:
    level: int
    dof: int
    elements: int
    objective: float
    misfit: float
    penalty: float
    eta1: float
    eta2: float
    eta3: float
    eta: float
    max_marked: float
    n_marked: int
    iterations: int
    gap: float
    reciprocity: float

    @classmethod
    def columns(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def row(self) -> tuple:
        return tuple(getattr(self, name) for name in self.columns())


@dataclass
class RunResult:
    """Everything produced by one adaptive or uniform run.

    ``parent_maps[k]`` links ``meshes[k]`` to ``meshes[k + 1]``; the run stops
    before solving on a mesh, so there is one map fewer than meshes.
    """

    kind: str
    records: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    parent_maps: list = field(default_factory=list)
    estimators: list = field(default_factory=list)
    marked: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    final_state: OptimizerState | None = None
    stop_reason: str = ""

    @property
    def n_levels(self) -> int:
        return len(self.records)

    @property
    def dofs(self) -> np.ndarray:
        return np.array([r.dof for r in self.records])


@dataclass
class ProblemSpec:
    """Mesh-independent description of the inverse problem."""

    mesh0: Mesh
    data: np.ndarray
    battery: np.ndarray
    alpha: float
    lam: float = LAMBDA
    impedances: np.ndarray | None = None
    support: tuple | None = None

    def on(self, mesh: Mesh) -> InversionProblem:
        return InversionProblem(mesh, self.data, self.battery, self.alpha, self.lam,
                                self.impedances, self.support)


def _solve_level(spec: ProblemSpec, mesh: Mesh, sigma0, optimizer: dict):
    problem = spec.on(mesh)
    state = minimize(problem, sigma0, **optimizer)
    ev = state.evaluation
    if ev.p is None:
        # converged at the initial iterate before any gradient was needed
        eval_gradient(problem, ev.sigma, ev)
    support = None if spec.support is None else box_masks(mesh, spec.support)[0]
    est = compute_estimator(mesh, ev.sigma, ev.u, ev.U, ev.p, ev.P, spec.alpha,
                            problem.impedances, support)
    return problem, state, est


def _record(level, mesh, state, est: EstimatorField, marked, battery) -> LevelRecord:
    e1, e2, e3 = est.totals
    per = np.sqrt(est.per_element)
    return LevelRecord(
        level=level,
        dof=mesh.n_vertices,
        elements=mesh.n_elements,
        objective=state.objective,
        misfit=state.misfit,
        penalty=state.penalty,
        eta1=float(np.sqrt(e1)),
        eta2=float(np.sqrt(e2)),
        eta3=float(np.sqrt(e3)),
        eta=float(np.sqrt(e1 + e2 + e3)),
        max_marked=float(per[marked].max()),
        n_marked=int(len(marked)),
        iterations=state.iterations,
        gap=state.gap,
        reciprocity=reciprocity_error(state.evaluation.U, battery),
    )


def _run(spec: ProblemSpec, kind: str, theta: float, max_levels: int, dof_budget: float,
         estimator_floor: float | None, optimizer: dict | None, bisections: int) -> RunResult:
    optimizer = dict(optimizer or {})
    result = RunResult(kind)
    mesh = spec.mesh0
    sigma = None
    for level in range(max_levels):
        t0 = time.perf_counter()
        _, state, est = _solve_level(spec, mesh, sigma, optimizer)
        if not state.converged:
            log.warning("%s level %d: optimizer stopped with '%s' (gap %.3e)",
                        kind, level, state.message, state.gap)
        marked = mark(est, theta)
        record = _record(level, mesh, state, est, marked, spec.battery)
        result.records.append(record)
        result.meshes.append(mesh)
        result.sigmas.append(state.sigma)
        result.estimators.append(est)
        result.marked.append(marked)
        result.traces.append(state.trace)
        result.final_state = state
        log.info("%s level %d: N=%d J=%.6e eta=%.3e iters=%d", kind, level, record.dof,
                 record.objective, record.eta, record.iterations)

        if estimator_floor is not None and record.eta <= estimator_floor:
            result.stop_reason = "estimator floor"
        elif level + 1 >= max_levels:
            result.stop_reason = "max levels"
        if result.stop_reason:
            result.timings.append(time.perf_counter() - t0)
            break
        new_mesh, pmap = refine_times(mesh, marked, bisections=bisections)
        result.timings.append(time.perf_counter() - t0)
        if new_mesh.n_vertices > dof_budget:
            result.stop_reason = "dof budget"
            break
        result.parent_maps.append(pmap)
        mesh = new_mesh
        # midpoint values of an admissible field stay admissible
        sigma = prolong(state.sigma, pmap)
    return result


def afem_run(spec: ProblemSpec, theta: float = 0.7, max_levels: int = MAX_LEVELS,
             dof_budget: float = DOF_BUDGET, estimator_floor: float | None = None,
             optimizer: dict | None = None, bisections: int = BISECTIONS) -> RunResult:
    """Adaptive loop with Doerfler marking.

    Level 0 starts from the background conductivity 1; each further level is
    warm-started from the prolonged previous minimizer.  The loop stops after
    ``max_levels`` solved levels, when the next mesh would exceed
    ``dof_budget`` vertices, or when the total estimator falls to
    ``estimator_floor``.  Every marked element is bisected ``bisections``
    times before closure.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    return _run(spec, "adaptive", theta, max_levels, dof_budget, estimator_floor, optimizer, bisections)


def uniform_run(spec: ProblemSpec, levels: int, optimizer: dict | None = None,
                bisections: int = BISECTIONS) -> RunResult:
    """Same pipeline with every element marked: ``levels`` solved meshes."""
    return _run(spec, "uniform", 1.0, levels, np.inf, None, optimizer, bisections)


# -- errors against the finest recovery ----------------------------------------

@dataclass
class ErrorTable:
    dof: np.ndarray
    l2: np.ndarray
    h1: np.ndarray
    rate_l2: float
    rate_h1: float


def fit_rate(dof, errors) -> float:
    """r in e ~ C N^(-r) by least squares in log-log; NaN if any error is zero."""
    dof = np.asarray(dof, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(dof) < 2 or np.any(errors <= 0) or not np.all(np.isfinite(errors)):
        return float("nan")
    slope = np.polyfit(np.log(dof), np.log(errors), 1)[0]
    return float(-slope)


def fit_window(n_levels: int) -> slice:
    """Levels used for rate fitting: the last max(3, n - 2) before the final one."""
    pre = n_levels - 1
    count = min(pre, max(3, n_levels - 2))
    return slice(pre - count, pre)


def error_vs_dof(run: RunResult, support=None) -> ErrorTable:
    """L2 and H1 errors of each level's sigma against the run's finest sigma.

    All fields are prolonged to the finest mesh, which refines every earlier
    one, and the norms are evaluated exactly there over the penalty support.
    """
    n = run.n_levels
    if n < 4:
        raise ValueError(f"need at least 4 levels for rates, run has {n}")
    fine = run.meshes[-1]
    mask = None if support is None else box_masks(fine, support)[0].astype(float)
    M = mass_matrix(fine, element_mask=mask)
    K = stiffness_matrix(fine, element_mask=mask)
    reference = run.sigmas[-1]
    l2, h1 = [], []
    for k in range(n):
        s = run.sigmas[k]
        for pmap in run.parent_maps[k:n - 1]:
            s = prolong(s, pmap)
        e = s - reference
        m2 = max(float(e @ (M @ e)), 0.0)
        k2 = max(float(e @ (K @ e)), 0.0)
        l2.append(np.sqrt(m2))
        h1.append(np.sqrt(m2 + k2))
    dof = run.dofs
    window = fit_window(n)
    l2, h1 = np.array(l2), np.array(h1)
    return ErrorTable(dof, l2, h1, fit_rate(dof[window], l2[window]), fit_rate(dof[window], h1[window]))


def boundary_touching(mesh: Mesh) -> np.ndarray:
    """Elements with at least one vertex on the boundary."""
    return mesh.boundary_vertex_mask[mesh.elements].any(axis=1)
