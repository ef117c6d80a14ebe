"""Tikhonov-regularized output least squares on a fixed mesh."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cem import solve_adjoint, solve_forward
from .fem import LAMBDA, CemSystem, assemble_system, mass_matrix, stiffness_matrix, zero_mean_basis
from .mesh import Mesh

log = logging.getLogger(__name__)

TRACE_HEADER = ("iter", "objective", "misfit", "penalty", "proj_grad_norm", "step")
# a line search that stalls with the optimality gap below this is roundoff, not failure
STALL_GAP = 1e-6
# switch from Gauss-Newton to exact Hessian steps once a full step contracts less than this
NEWTON_SWITCH = 0.2


def box_masks(mesh: Mesh, box):
    """Support masks for a rectangle ``(x0, x1, y0, y1)``.

    Returns ``(element_mask, vertex_mask)``: elements whose centroid lies in the
    open box, vertices in the closed box.  ``box=None`` means the whole domain.
    """
    if box is None:
        return np.ones(mesh.n_elements, dtype=bool), np.ones(mesh.n_vertices, dtype=bool)
    x0, x1, y0, y1 = box
    c = mesh.centroids
    elem = (c[:, 0] > x0) & (c[:, 0] < x1) & (c[:, 1] > y0) & (c[:, 1] < y1)
    v = mesh.vertices
    eps = 1e-12
    vert = (v[:, 0] >= x0 - eps) & (v[:, 0] <= x1 + eps) & (v[:, 1] >= y0 - eps) & (v[:, 1] <= y1 + eps)
    return elem, vert


@dataclass(eq=False)
class InversionProblem:
    """Discrete Tikhonov problem on one mesh.

    ``data`` holds the measured voltages, one row per current pattern; it is
    re-centred to zero mean on construction.  ``support`` is ``None`` for a
    penalty over the whole domain, or a box ``(x0, x1, y0, y1)``; in that case
    the conductivity is frozen at 1 outside the closed box.
    """

    mesh: Mesh
    data: np.ndarray
    battery: np.ndarray
    alpha: float
    lam: float = LAMBDA
    impedances: np.ndarray = None
    support: tuple = None

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        self.data = self.data - self.data.mean(axis=1, keepdims=True)
        self.battery = np.atleast_2d(np.asarray(self.battery, dtype=float))
        if self.impedances is None:
            self.impedances = np.ones(self.mesh.n_electrodes)
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.lam < 1:
            raise ValueError("lambda must lie in (0, 1)")
        if self.data.shape != self.battery.shape:
            raise ValueError(f"data shape {self.data.shape} does not match battery {self.battery.shape}")

    @cached_property
    def support_masks(self):
        return box_masks(self.mesh, self.support)

    @property
    def element_support(self) -> np.ndarray:
        return self.support_masks[0]

    @property
    def free(self) -> np.ndarray:
        """Vertices whose conductivity is an unknown."""
        return self.support_masks[1]

    @cached_property
    def penalty_matrix(self) -> sp.csr_matrix:
        """Laplace stiffness over the penalty support, (grad s, grad t)_support."""
        mask = None if self.support is None else self.element_support.astype(float)
        return stiffness_matrix(self.mesh, element_mask=mask)

    @cached_property
    def metric(self):
        """H1 Riesz map on the free vertices, identity on frozen ones.

        Returns ``(G, solve)`` with ``solve(g)`` applying G^{-1}.
        """
        G = stiffness_matrix(self.mesh) + mass_matrix(self.mesh)
        if not self.free.all():
            keep = sp.diags(self.free.astype(float))
            G = keep @ G @ keep + sp.diags((~self.free).astype(float))
        G = sp.csc_matrix(G)
        lu = spla.splu(G, permc_spec="COLAMD")
        return G, lu.solve

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        return np.asarray(mass_matrix(self.mesh).sum(axis=1)).ravel()

    @cached_property
    def lumping(self) -> sp.csr_matrix:
        """(N, M) vertex-element incidence, used to scatter element densities."""
        m = self.mesh
        rows = m.elements.ravel()
        cols = np.repeat(np.arange(m.n_elements), 3)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(m.n_vertices, m.n_elements))

    def shifted_penalty_factor(self, fixed: np.ndarray):
        """LU of alpha (K_s + M_s) on unfixed vertices plus identity on fixed ones, cached per mask."""
        cache = self.__dict__.setdefault("_shifted_cache", {})
        key = np.packbits(fixed).tobytes()
        if key not in cache:
            mask = None if self.support is None else self.element_support.astype(float)
            A = self.alpha * (self.penalty_matrix + mass_matrix(self.mesh, element_mask=mask))
            keep = sp.diags((~fixed).astype(float))
            A = keep @ A @ keep + sp.diags(fixed.astype(float))
            cache.clear()
            cache[key] = spla.splu(sp.csc_matrix(A), permc_spec="COLAMD")
        return cache[key]

    def project(self, sigma) -> np.ndarray:
        return project(sigma, self.lam, self.free)

    def initial_guess(self) -> np.ndarray:
        return np.ones(self.mesh.n_vertices)


@dataclass(eq=False)
class Evaluation:
    """Objective value at one conductivity plus the states that produced it."""

    sigma: np.ndarray
    objective: float
    misfit: float
    penalty: float
    system: CemSystem
    u: np.ndarray
    U: np.ndarray
    p: np.ndarray = None
    P: np.ndarray = None
    gradient: np.ndarray = None


def project(sigma, lam: float = LAMBDA, free=None) -> np.ndarray:
    """Clamp to [lam, 1/lam]; vertices outside ``free`` are reset to 1."""
    out = np.clip(np.asarray(sigma, dtype=float), lam, 1.0 / lam)
    if free is not None:
        out = np.where(free, out, 1.0)
    return out


def eval_objective(problem: InversionProblem, sigma) -> Evaluation:
    """J = 1/2 sum_j |U_j(sigma) - U^delta_j|^2 + alpha/2 |grad sigma|^2_support."""
    sigma = np.asarray(sigma, dtype=float)
    system = assemble_system(problem.mesh, sigma, problem.impedances, problem.lam)
    state = solve_forward(system, problem.battery)
    residual = state.voltages - problem.data
    misfit = 0.5 * float(np.sum(residual**2))
    penalty = 0.5 * problem.alpha * float(sigma @ (problem.penalty_matrix @ sigma))
    return Evaluation(sigma, misfit + penalty, misfit, penalty, system, state.potential, state.voltages)


def eval_gradient(problem: InversionProblem, sigma, evaluation: Evaluation | None = None) -> np.ndarray:
    """Nodal gradient g_i = J'(sigma)[phi_i].

    g_i = alpha (grad sigma, grad phi_i)_support - sum_j (phi_i grad u_j, grad p_j).
    The second term is exact: grad u_j . grad p_j is constant per element and
    the integral of phi_i over T is |T|/3.  Entries for frozen vertices are
    returned as computed; the optimizer masks them.
    """
    if evaluation is None or not (evaluation.sigma is sigma or np.array_equal(evaluation.sigma, sigma)):
        evaluation = eval_objective(problem, sigma)
    if evaluation.gradient is not None:
        return evaluation.gradient
    mesh = problem.mesh
    adj = solve_adjoint(evaluation.system, evaluation.U - problem.data)
    evaluation.p, evaluation.P = adj.potential, adj.voltages
    gu = mesh.gradient(evaluation.u)
    gp = mesh.gradient(evaluation.p)
    density = np.einsum("jmk,jmk->m", gu, gp) * mesh.areas / 3.0
    source = np.bincount(mesh.elements.ravel(), weights=np.repeat(density, 3), minlength=mesh.n_vertices)
    g = problem.alpha * (problem.penalty_matrix @ evaluation.sigma) - source
    evaluation.gradient = g
    return g


def variational_inequality(problem: InversionProblem, evaluation: Evaluation, mu) -> np.ndarray:
    """alpha (grad s, grad(mu - s)) - ((mu - s) grad u, grad p) for test field(s) mu."""
    g = eval_gradient(problem, evaluation.sigma, evaluation)
    return (np.atleast_2d(mu) - evaluation.sigma) @ g


def sensitivity(problem: InversionProblem, evaluation: Evaluation) -> np.ndarray:
    """Jacobian of the electrode voltages, shape (J*(L-1), N).

    Row (j, k) holds d(b_k . U_j)/d sigma_i for the orthonormal zero-mean
    basis b_k.  By reciprocity this is -sum_T (grad u_j . grad w_k)|T|/3 over
    the elements around vertex i, where w_k is the potential for current b_k.
    """
    mesh = problem.mesh
    basis = zero_mean_basis(mesh.n_electrodes)
    w = solve_forward(evaluation.system, basis.T).potential
    gu = mesh.gradient(evaluation.u)
    gw = mesh.gradient(w)
    density = np.einsum("jmk,lmk->jlm", gu, gw).reshape(-1, mesh.n_elements) * (mesh.areas / 3.0)
    return -(problem.lumping @ density.T).T


def hessian_vector(problem: InversionProblem, evaluation: Evaluation, delta) -> np.ndarray:
    """Exact second derivative of J at ``evaluation.sigma`` applied to ``delta``.

    The state and adjoint derivatives (u', U') and (p', P') solve the forward
    operator with right-hand sides -(delta grad u, grad v) and
    <U', V> - (delta grad p, grad v); then
    H delta = alpha K_s delta - sum_j (phi_i grad u'_j, grad p_j) + (phi_i grad u_j, grad p'_j).
    """
    mesh = problem.mesh
    system = evaluation.system
    if evaluation.p is None:
        eval_gradient(problem, evaluation.sigma, evaluation)
    delta = np.asarray(delta, dtype=float)
    Kd = stiffness_matrix(mesh, delta)
    n = system.n_nodes
    rhs = np.zeros((len(evaluation.u), system.size))
    rhs[:, :n] = -(Kd @ evaluation.u.T).T
    du, dU = system.split(system.solve(rhs))
    rhs = np.zeros_like(rhs)
    rhs[:, :n] = -(Kd @ evaluation.p.T).T
    rhs[:, n:] = dU @ system.basis
    dp, _ = system.split(system.solve(rhs))
    gu, gp = mesh.gradient(evaluation.u), mesh.gradient(evaluation.p)
    density = (np.einsum("jmk,jmk->m", mesh.gradient(du), gp)
               + np.einsum("jmk,jmk->m", gu, mesh.gradient(dp))) * (mesh.areas / 3.0)
    return problem.alpha * (problem.penalty_matrix @ delta) - problem.lumping @ density


def worst_case_gap(problem: InversionProblem, sigma, g) -> float:
    """-min over admissible mu of g.(mu - sigma); zero exactly at a discrete KKT point."""
    lo, hi = problem.lam, 1.0 / problem.lam
    gap = np.minimum((lo - sigma) * g, (hi - sigma) * g)
    return float(-np.sum(gap[problem.free]))


class _GaussNewtonMetric:
    """Riesz map of alpha K_s + S'S on the unfixed vertices, identity on fixed ones.

    Applied by conjugate gradients, preconditioned with the exact inverse of
    alpha (K_s + M_s) + S'S obtained from one sparse factorization and the
    Woodbury identity.
    """

    def __init__(self, problem: InversionProblem, evaluation: Evaluation, fixed: np.ndarray):
        self.keep = (~fixed).astype(float)
        self.K = problem.penalty_matrix
        self.alpha = problem.alpha
        self.S = sensitivity(problem, evaluation) * self.keep
        self.fixed = fixed
        lu = problem.shifted_penalty_factor(fixed)
        self.AinvSt = lu.solve(np.ascontiguousarray(self.S.T))
        cap = np.eye(self.S.shape[0]) + self.S @ self.AinvSt
        self._cap = np.linalg.cholesky(cap)
        self._lu = lu

    def matvec(self, v):
        v = v * self.keep
        out = self.alpha * (self.K @ v) + self.S.T @ (self.S @ v)
        return out * self.keep + v * (1.0 - self.keep)

    def _precondition(self, v):
        x = self._lu.solve(v)
        y = np.linalg.solve(self._cap.T, np.linalg.solve(self._cap, self.S @ x))
        return x - self.AinvSt @ y

    def solve(self, g, rtol: float = 1e-8, maxiter: int = 200):
        n = g.shape[0]
        H = spla.LinearOperator((n, n), matvec=self.matvec, dtype=float)
        P = spla.LinearOperator((n, n), matvec=self._precondition, dtype=float)
        x, _ = spla.cg(H, g, x0=self._precondition(g), rtol=rtol, atol=0.0, maxiter=maxiter, M=P)
        return x


class _NewtonMetric(_GaussNewtonMetric):
    """Exact Hessian on the unfixed vertices, inverted by truncated PCG.

    The Gauss-Newton inverse serves as preconditioner.  On negative curvature
    the iteration stops with the last positive-curvature iterate, or with the
    Gauss-Newton direction if that happens in the first step.
    """

    def __init__(self, problem, evaluation, fixed):
        super().__init__(problem, evaluation, fixed)
        self.problem = problem
        self.evaluation = evaluation

    def matvec(self, v):
        v = v * self.keep
        out = hessian_vector(self.problem, self.evaluation, v)
        return out * self.keep + v * (1.0 - self.keep)

    def solve(self, g, rtol: float = 1e-6, maxiter: int = 50):
        x = np.zeros_like(g)
        r = g.copy()
        z = self._precondition(r)
        d = z.copy()
        rz = float(r @ z)
        stop = rtol * np.sqrt(max(rz, 0.0))
        for k in range(maxiter):
            Hd = self.matvec(d)
            curvature = float(d @ Hd)
            if curvature <= 0.0:
                return z if k == 0 else x
            step = rz / curvature
            x = x + step * d
            r = r - step * Hd
            z = self._precondition(r)
            rz_new = float(r @ z)
            if np.sqrt(max(rz_new, 0.0)) <= stop:
                break
            d = z + (rz_new / rz) * d
            rz = rz_new
        return x


@dataclass
class OptimizerState:
    sigma: np.ndarray
    objective: float
    misfit: float
    penalty: float
    gradient: np.ndarray
    direction: np.ndarray
    iterations: int
    proj_grad_norm: float
    gap: float
    converged: bool
    message: str
    evaluation: Evaluation = field(repr=False, default=None)
    trace: list = field(repr=False, default_factory=list)


def projected_gradient_norm(problem: InversionProblem, sigma, g) -> float:
    """Norm of sigma - P(sigma - M_l^{-1} g) in the lumped L2 metric M_l.

    The lumped mass matrix is diagonal, so the box projection commutes with
    it and the measure vanishes exactly at discrete KKT points.
    """
    m = problem.lumped_mass
    pg = sigma - problem.project(sigma - g / m)
    return float(np.sqrt(np.sum(m * pg**2)))


def _active_set(problem, sigma, g, width):
    lo, hi = problem.lam, 1.0 / problem.lam
    active = ((sigma <= lo + width) & (g > 0)) | ((sigma >= hi - width) & (g < 0))
    return active | ~problem.free


def minimize(problem: InversionProblem, sigma0=None, max_iters: int = 500, grad_tol: float = 1e-8,
             gap_tol: float = 1e-8, c1: float = 1e-4, max_backtracks: int = 40, restart: int = 50,
             metric: str = "gauss-newton") -> OptimizerState:
    """Projected nonlinear conjugate gradient (Polak-Ribiere+) for the discrete problem.

    Search directions are built from the Riesz representative of the gradient
    in a variable metric: ``"gauss-newton"`` uses alpha K_s + S'S at the current
    iterate (S the voltage Jacobian), ``"h1"`` the fixed H1 inner product, and
    ``"newton"`` starts like ``"gauss-newton"`` and moves to the exact Hessian
    once full steps stop contracting the projected gradient by 1/NEWTON_SWITCH.
    Vertices at a bound with the gradient pointing outward are held fixed for
    the step.  Steps are projected onto the admissible box and accepted by
    Armijo backtracking (halving) along the projected path.

    Stops when the lumped L2 norm of the projected gradient is below
    ``grad_tol * (1 + |J|)`` and the worst-case variational inequality gap
    over all admissible test fields is below ``gap_tol``.  If the line
    search then can no longer resolve a decrease of J and the gap is already
    below ``STALL_GAP``, the iterate is reported as converged.
    """
    if metric not in ("newton", "gauss-newton", "h1"):
        raise ValueError(f"unknown metric {metric!r}")
    sigma = problem.project(problem.initial_guess() if sigma0 is None else sigma0)
    G, Ginv = problem.metric

    def stationary(pgn, gap, objective):
        return pgn <= grad_tol * (1.0 + abs(objective)) and gap <= gap_tol

    ev = eval_objective(problem, sigma)
    g = np.where(problem.free, eval_gradient(problem, sigma, ev), 0.0)
    pgn = projected_gradient_norm(problem, sigma, g)
    gap = worst_case_gap(problem, sigma, g)
    trace = [(0, ev.objective, ev.misfit, ev.penalty, pgn, 0.0)]
    converged = stationary(pgn, gap, ev.objective)
    message = "converged" if converged else "max_iters reached"
    d = r = fixed = None
    t_prev = s_prev = y_prev = None
    use_hessian = False
    since_restart = 0
    it = 0
    while not converged and it < max_iters:
        it += 1
        new_fixed = _active_set(problem, sigma, g, min(1e-3, pgn))
        if metric in ("newton", "gauss-newton"):
            cls = _NewtonMetric if use_hessian else _GaussNewtonMetric
            r_new = cls(problem, ev, new_fixed).solve(np.where(new_fixed, 0.0, g))
        else:
            r_new = np.where(new_fixed, 0.0, Ginv(np.where(new_fixed, 0.0, g)))
        beta = 0.0
        if d is not None and since_restart < restart - 1 and np.array_equal(fixed, new_fixed):
            denom = float(r @ g_prev)
            if denom > 0:
                beta = max(0.0, float(r_new @ (g - g_prev)) / denom)
        since_restart = since_restart + 1 if beta > 0 else 0
        d = -r_new + beta * (d if d is not None else 0.0)
        d = np.where(new_fixed, 0.0, d)
        slope = float(g @ d)
        if slope >= 0.0:
            d, beta, since_restart = -r_new, 0.0, 0
            slope = float(g @ d)
        r, fixed = r_new, new_fixed

        if metric != "h1":
            t = 1.0
        elif s_prev is not None and float(s_prev @ y_prev) > 0:
            t = float(s_prev @ (G @ s_prev)) / float(s_prev @ y_prev) * (-slope) / float(d @ (G @ d))
        elif t_prev is not None:
            t = t_prev
        else:
            t = min(1.0, 0.5 / max(np.max(np.abs(d)), 1e-300))

        accepted = None
        for _ in range(max_backtracks + 1):
            trial = problem.project(sigma + t * d)
            step = trial - sigma
            predicted = float(g @ step)
            if predicted < 0:
                trial_ev = eval_objective(problem, trial)
                if trial_ev.objective <= ev.objective + c1 * predicted:
                    accepted = trial_ev
                    break
            t *= 0.5
        if accepted is None:
            it -= 1
            if gap <= STALL_GAP:
                converged = True
                message = "converged (objective at roundoff)"
            else:
                message = f"line search failed after {max_backtracks} backtracks"
                log.warning("iteration %d: %s (gap %.3e)", it + 1, message, gap)
            break

        g_prev = g
        g = np.where(problem.free, eval_gradient(problem, accepted.sigma, accepted), 0.0)
        s_prev, y_prev, t_prev = accepted.sigma - sigma, g - g_prev, t
        sigma, ev = accepted.sigma, accepted
        pgn_prev, pgn = pgn, projected_gradient_norm(problem, sigma, g)
        gap = worst_case_gap(problem, sigma, g)
        if metric == "newton" and t == 1.0 and pgn > NEWTON_SWITCH * pgn_prev:
            # full steps no longer contract fast: the residual curvature matters
            use_hessian = True
        trace.append((it, ev.objective, ev.misfit, ev.penalty, pgn, t))
        if stationary(pgn, gap, ev.objective):
            converged = True
            message = "converged"

    return OptimizerState(
        sigma=sigma,
        objective=ev.objective,
        misfit=ev.misfit,
        penalty=ev.penalty,
        gradient=g,
        direction=d if d is not None else np.zeros_like(sigma),
        iterations=it,
        proj_grad_norm=pgn,
        gap=gap,
        converged=converged,
        message=message,
        evaluation=ev,
        trace=trace,
    )
