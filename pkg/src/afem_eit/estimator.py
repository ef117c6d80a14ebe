"""Residual a posteriori error estimator and bulk marking.

All discrete fields are P1, so gradients are elementwise constant and every
integrand below is a polynomial of degree <= 2; the L2 norms are exact.
Several current patterns are handled by stacking fields along a leading axis:
the state/adjoint indicators are summed over patterns and the element residual
of the conductivity indicator uses sum_j grad(u_j).grad(p_j), the density of
the gradient of the multi-pattern misfit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, classify_faces, mesh_size

# 2-point Gauss-Legendre on [0, 1]
_GAUSS_T = 0.5 + np.array([-0.5, 0.5]) / np.sqrt(3.0)
_GAUSS_W = np.array([0.5, 0.5])


@dataclass
class EstimatorField:
    """Per-element squared indicators."""

    eta1_sq: np.ndarray
    eta2_sq: np.ndarray
    eta3_sq: np.ndarray

    @property
    def per_element(self) -> np.ndarray:
        return self.eta1_sq + self.eta2_sq + self.eta3_sq

    @property
    def totals(self) -> tuple[float, float, float]:
        return float(self.eta1_sq.sum()), float(self.eta2_sq.sum()), float(self.eta3_sq.sum())

    @property
    def total(self) -> float:
        return float(self.per_element.sum())


@dataclass
class FaceJumps:
    """Face residuals sampled at the two endpoints of each edge.

    ``flux_u``/``flux_p`` have shape (J, E, 2): J_{F,1} is linear along every
    face.  ``penalty`` (E,) is the constant J_{F,2}.
    """

    flux_u: np.ndarray
    flux_p: np.ndarray
    penalty: np.ndarray


def _face_l2_sq(endpoint_values: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """||f||^2_{L2(F)} for f linear on F, from its endpoint values (..., E, 2)."""
    a = endpoint_values[..., 0]
    b = endpoint_values[..., 1]
    vals = a[..., None] * (1.0 - _GAUSS_T) + b[..., None] * _GAUSS_T
    return lengths * np.einsum("...q,q->...", vals**2, _GAUSS_W)


def element_residuals(mesh: Mesh, sigma, u, p):
    """Element residuals R_{T,1}(sigma, u), R_{T,1}(sigma, p) and R_{T,2}(u, p).

    Since u is P1, div(sigma grad u) = grad(sigma).grad(u) on each element.
    ``u``/``p`` may be (N,) or (J, N); R_{T,2} is summed over patterns.
    """
    gs = mesh.gradient(sigma)
    gu = mesh.gradient(np.atleast_2d(u))
    gp = mesh.gradient(np.atleast_2d(p))
    r1u = np.einsum("mk,jmk->jm", gs, gu)
    r1p = np.einsum("mk,jmk->jm", gs, gp)
    r2 = np.einsum("jmk,jmk->m", gu, gp)
    return r1u, r1p, r2


def _flux_jump(mesh: Mesh, faces, sigma, w, V, impedances) -> np.ndarray:
    """J_{F,1} at edge endpoints for every pattern, shape (J, E, 2)."""
    edges = mesh.edges
    inc = faces.incident
    n = faces.normals
    grad = mesh.gradient(w)  # (J, M, 2)
    s_end = sigma[edges]  # (E, 2)
    g0 = np.einsum("jek,ek->je", grad[:, inc[:, 0]], n)
    interior = inc[:, 1] >= 0
    g1 = np.zeros_like(g0)
    g1[:, interior] = np.einsum("jek,ek->je", grad[:, inc[interior, 1]], n[interior])
    # interior: [sigma grad w . n]; boundary: sigma grad w . n (outward)
    jump = np.where(interior[None, :], g0 - g1, g0)
    out = jump[..., None] * s_end[None]
    lab = faces.edge_label
    elec = np.flatnonzero(lab > 0)
    if elec.size:
        z = np.asarray(impedances, dtype=float)[lab[elec] - 1]
        Vl = V[:, lab[elec] - 1]  # (J, k)
        out[:, elec, :] += (w[:, edges[elec]] - Vl[..., None]) / z[None, :, None]
    return out


def face_jumps(mesh: Mesh, sigma, u, U, p, P, alpha: float, impedances=None,
               support=None, faces=None) -> FaceJumps:
    """Face residuals J_{F,1} (state and adjoint) and J_{F,2}.

    ``support`` is an optional element mask: outside it the penalty flux
    alpha grad(sigma) is taken as zero, so faces on the support boundary carry
    the one-sided flux.
    """
    faces = classify_faces(mesh) if faces is None else faces
    sigma = np.asarray(sigma, dtype=float)
    if impedances is None:
        impedances = np.ones(mesh.n_electrodes)
    u, U = np.atleast_2d(u), np.atleast_2d(U)
    p, P = np.atleast_2d(p), np.atleast_2d(P)
    flux_u = _flux_jump(mesh, faces, sigma, u, U, impedances)
    flux_p = _flux_jump(mesh, faces, sigma, p, P, impedances)

    w = alpha * mesh.gradient(sigma)
    if support is not None:
        w = w * np.asarray(support, dtype=float)[:, None]
    inc = faces.incident
    n = faces.normals
    w0 = np.einsum("ek,ek->e", w[inc[:, 0]], n)
    interior = inc[:, 1] >= 0
    w1 = np.zeros_like(w0)
    w1[interior] = np.einsum("ek,ek->e", w[inc[interior, 1]], n[interior])
    penalty = np.where(interior, w0 - w1, w0)
    return FaceJumps(flux_u, flux_p, penalty)


def _to_elements(mesh: Mesh, face_values: np.ndarray, element_mask=None) -> np.ndarray:
    """Add each face contribution to every incident element."""
    out = np.zeros(mesh.n_elements)
    inc = mesh.edge2elem
    np.add.at(out, inc[:, 0], face_values)
    interior = inc[:, 1] >= 0
    np.add.at(out, inc[interior, 1], face_values[interior])
    if element_mask is not None:
        out = out * element_mask
    return out


def compute_estimator(mesh: Mesh, sigma, u, U, p, P, alpha: float, impedances=None,
                      support=None) -> EstimatorField:
    """Squared indicators eta_{T,1}^2, eta_{T,2}^2 and eta_{T,3}^2 per element.

    Parameters
    ----------
    mesh : Mesh
    sigma : (N,) conductivity
    u, U : forward potentials (J, N) and voltages (J, L)
    p, P : adjoint potentials and voltages, same shapes
    alpha : regularization weight
    impedances : (L,) contact impedances, default all ones
    support : optional (M,) boolean mask of the penalty support.  When given,
        eta_{T,3} is evaluated only on support elements.
    """
    h_T, h_F = mesh_size(mesh)
    area = mesh.areas
    r1u, r1p, r2 = element_residuals(mesh, sigma, u, p)
    jumps = face_jumps(mesh, sigma, u, U, p, P, alpha, impedances, support)

    # ||R||^2_{L2(T)} = R^2 |T| for constant residuals
    elem1 = h_T**2 * area * np.sum(r1u**2, axis=0)
    elem2 = h_T**2 * area * np.sum(r1p**2, axis=0)
    elem3 = h_T**4 * area * r2**2

    face1 = h_F * _face_l2_sq(jumps.flux_u, h_F).sum(axis=0)
    face2 = h_F * _face_l2_sq(jumps.flux_p, h_F).sum(axis=0)
    face3 = h_F**3 * h_F * jumps.penalty**2

    mask = None if support is None else np.asarray(support, dtype=float)
    eta3 = elem3 + _to_elements(mesh, face3)
    if mask is not None:
        eta3 = eta3 * mask
    return EstimatorField(
        eta1_sq=elem1 + _to_elements(mesh, face1),
        eta2_sq=elem2 + _to_elements(mesh, face2),
        eta3_sq=eta3,
    )


def forward_indicators(mesh: Mesh, sigma, u, U, impedances=None) -> np.ndarray:
    """State part eta_{T,1}^2 only, for refinement driven by forward solves."""
    zero_u = np.zeros_like(np.atleast_2d(u))
    zero_U = np.zeros_like(np.atleast_2d(U))
    return compute_estimator(mesh, sigma, u, U, zero_u, zero_U, 0.0, impedances).eta1_sq


def mark(indicators, theta: float) -> np.ndarray:
    """Minimal set M with sum_M eta_T^2 >= theta^2 sum_T eta_T^2.

    ``indicators`` is an :class:`EstimatorField` or an array of squared
    per-element indicators.  Elements are taken in decreasing order (ties by
    element id), so the element with the largest indicator is always marked.
    ``theta = 1`` marks every element.  Returns sorted element ids.
    """
    if isinstance(indicators, EstimatorField):
        indicators = indicators.per_element
    eta_sq = np.asarray(indicators, dtype=float)
    if eta_sq.size == 0:
        raise ValueError("cannot mark on an empty mesh")
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if theta == 1.0:
        return np.arange(eta_sq.size)
    order = np.lexsort((np.arange(eta_sq.size), -eta_sq))
    cumulative = np.cumsum(eta_sq[order])
    target = theta**2 * cumulative[-1]
    count = int(np.argmax(cumulative >= target)) + 1
    return np.sort(order[:count])
