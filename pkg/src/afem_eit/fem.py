"""P1 finite element assembly for the complete electrode model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, ParentMap

LAMBDA = 0.1
SOLVER_RTOL = 1e-10


class AdmissibilityError(ValueError):
    """Conductivity or contact impedance outside the admissible set."""


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def zero_mean_basis(n_electrodes: int) -> np.ndarray:
    """Orthonormal (L, L-1) basis of the zero-mean subspace of R^L.

    Obtained by orthonormalizing e_l - e_L, l = 1..L-1.
    """
    raw = np.zeros((n_electrodes, n_electrodes - 1))
    raw[np.arange(n_electrodes - 1), np.arange(n_electrodes - 1)] = 1.0
    raw[-1, :] = -1.0
    q, _ = np.linalg.qr(raw)
    return q


def is_zero_mean(values, tol: float = 1e-12) -> bool:
    values = np.asarray(values, dtype=float)
    scale = np.maximum(1.0, np.max(np.abs(values), axis=-1))
    return bool(np.all(np.abs(values.sum(axis=-1)) <= tol * scale))


def check_admissible(sigma, lam: float = LAMBDA, slack: float = 1e-12) -> None:
    sigma = np.asarray(sigma)
    lo, hi = lam, 1.0 / lam
    if sigma.min() < lo - slack or sigma.max() > hi + slack:
        raise AdmissibilityError(
            f"conductivity range [{sigma.min():.3g}, {sigma.max():.3g}] outside [{lo}, {hi}]"
        )


def _scatter(mesh: Mesh, local: np.ndarray, n: int | None = None) -> sp.csr_matrix:
    n = mesh.n_vertices if n is None else n
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def local_stiffness(mesh: Mesh) -> np.ndarray:
    """(M, 3, 3) element Laplace stiffness matrices |T| grad(phi_i).grad(phi_j)."""
    g = mesh.basis_gradients
    return mesh.areas[:, None, None] * np.einsum("mik,mjk->mij", g, g)


def stiffness_matrix(mesh: Mesh, sigma=None, element_mask=None) -> sp.csr_matrix:
    """Assemble (sigma grad u, grad v) for P1 sigma.

    With sigma linear on each element and constant gradients, the element
    integral is exactly mean(sigma|T) * |T| * grad(phi_i).grad(phi_j).
    """
    weight = np.ones(mesh.n_elements)
    if sigma is not None:
        weight = np.asarray(sigma)[mesh.elements].mean(axis=1)
    if element_mask is not None:
        weight = weight * element_mask
    return _scatter(mesh, weight[:, None, None] * local_stiffness(mesh))


def mass_matrix(mesh: Mesh, element_mask=None) -> sp.csr_matrix:
    """Consistent P1 mass matrix, optionally restricted to a subset of elements."""
    weight = mesh.areas / 12.0
    if element_mask is not None:
        weight = weight * element_mask
    local = weight[:, None, None] * (np.ones((3, 3)) + np.eye(3))[None]
    return _scatter(mesh, local)


def electrode_blocks(mesh: Mesh, impedances):
    """Electrode coupling terms of sum_l z_l^{-1} (u - U_l, v - V_l)_{L^2(e_l)}.

    Returns ``(A_uu, C, D)`` with A_uu (N x N), C (N x L), and D (L,) such that
    the form equals u'A_uu v + u'C V + U'C'v + sum_l D_l U_l V_l.
    """
    n = mesh.n_vertices
    L = mesh.n_electrodes
    z = np.asarray(impedances, dtype=float)
    on = mesh.labels > 0
    faces = mesh.boundary[on]
    lab = mesh.labels[on]
    length = mesh.face_lengths(faces)
    w = length / z[lab - 1]
    a, b = faces[:, 0], faces[:, 1]
    rows = np.concatenate([a, a, b, b])
    cols = np.concatenate([a, b, a, b])
    vals = np.concatenate([w / 3.0, w / 6.0, w / 6.0, w / 3.0])
    A_uu = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    C = sp.csr_matrix(
        (np.concatenate([-w / 2.0, -w / 2.0]), (np.concatenate([a, b]), np.concatenate([lab, lab]) - 1)),
        shape=(n, L),
    )
    D = np.bincount(lab - 1, weights=w, minlength=L)
    return A_uu, C, D


@dataclass(eq=False)
class CemSystem:
    """Discrete CEM operator on V_T x R^L_0 for a fixed conductivity.

    The unknown is ``x = (u, w)`` with nodal values ``u`` and reduced electrode
    coordinates ``w``; electrode voltages are ``U = basis @ w``.
    """

    mesh: Mesh
    sigma: np.ndarray
    impedances: np.ndarray
    matrix: sp.csc_matrix
    basis: np.ndarray
    _lu: object = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_vertices

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def split(self, x: np.ndarray):
        """Map coupled coordinates (..., n) to ``(u, U)``."""
        u = x[..., : self.n_nodes]
        U = x[..., self.n_nodes:] @ self.basis.T
        return u, U

    def join(self, u, U) -> np.ndarray:
        return np.concatenate([u, np.asarray(U) @ self.basis], axis=-1)

    def form(self, x, y) -> float:
        """Quadratic/bilinear form a(sigma, x, y) in coupled coordinates."""
        return float(x @ (self.matrix @ y))

    def factorize(self):
        if self._lu is None:
            # COLAMD beats minimum-degree orderings here: the electrode
            # columns are dense over the electrode nodes
            self._lu = spla.splu(self.matrix, permc_spec="COLAMD")
        return self._lu

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for one (n,) or several (J, n) right-hand sides."""
        rhs = np.asarray(rhs, dtype=float)
        single = rhs.ndim == 1
        b = np.atleast_2d(rhs)
        x = self.factorize().solve(np.ascontiguousarray(b.T)).T
        r = b - (self.matrix @ x.T).T
        bnorm = np.linalg.norm(b, axis=1)
        rel = np.linalg.norm(r, axis=1) / np.where(bnorm > 0, bnorm, 1.0)
        if np.any(rel > SOLVER_RTOL):
            # one step of iterative refinement before giving up
            x = x + self.factorize().solve(np.ascontiguousarray(r.T)).T
            r = b - (self.matrix @ x.T).T
            rel = np.linalg.norm(r, axis=1) / np.where(bnorm > 0, bnorm, 1.0)
            if np.any(rel > SOLVER_RTOL):
                raise SolverError(f"linear solve reached relative residual {rel.max():.2e}", rel.max())
        return x[0] if single else x


def assemble_system(mesh: Mesh, sigma, impedances=None, lam: float = LAMBDA) -> CemSystem:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_vertices,):
        raise ValueError(f"sigma must have one value per vertex ({mesh.n_vertices})")
    check_admissible(sigma, lam)
    if impedances is None:
        impedances = np.ones(mesh.n_electrodes)
    impedances = np.asarray(impedances, dtype=float)
    if impedances.shape != (mesh.n_electrodes,) or np.any(impedances <= 0):
        raise AdmissibilityError("contact impedances must be L positive numbers")

    K = stiffness_matrix(mesh, sigma)
    A_uu, C, D = electrode_blocks(mesh, impedances)
    B = zero_mean_basis(mesh.n_electrodes)
    CB = sp.csr_matrix(C @ B)
    BDB = sp.csr_matrix(B.T @ (D[:, None] * B))
    matrix = sp.bmat([[K + A_uu, CB], [CB.T, BDB]], format="csc")
    return CemSystem(mesh, sigma, impedances, matrix, B)


def assemble_current_rhs(current, basis: np.ndarray, n_nodes: int) -> np.ndarray:
    """Right-hand side of <I, V> in coupled coordinates (nodal block zero)."""
    current = np.asarray(current, dtype=float)
    if not is_zero_mean(current):
        raise ValueError("current pattern must have zero mean")
    w = current @ basis
    nodal = np.zeros(current.shape[:-1] + (n_nodes,))
    return np.concatenate([nodal, w], axis=-1)


def prolong(values, pmap: ParentMap) -> np.ndarray:
    """Interpolate a P1 field onto the refined mesh of ``pmap``.

    Surviving vertices keep their values, each new vertex takes the mean of its
    parent edge's endpoints.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != pmap.n_parent_vertices:
        raise ValueError(
            f"field has {values.shape[-1]} values, parent mesh has {pmap.n_parent_vertices} vertices"
        )
    out = np.empty(values.shape[:-1] + (pmap.n_vertices,))
    out[..., : pmap.n_parent_vertices] = values
    start = pmap.n_parent_vertices
    batches = pmap.batches or [len(pmap.vertex_parents)]
    offset = 0
    for count in batches:
        vp = pmap.vertex_parents[offset: offset + count]
        out[..., start + offset: start + offset + count] = 0.5 * (out[..., vp[:, 0]] + out[..., vp[:, 1]])
        offset += count
    return out
