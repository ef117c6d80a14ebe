"""Figures written next to the CSV outputs (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

from .mesh import Mesh  # noqa: E402


def _triangulation(mesh: Mesh) -> mtri.Triangulation:
    return mtri.Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.elements)


def plot_errors(path, tables: dict) -> None:
    """Log-log error curves; ``tables`` maps a label to ``(dof, l2, h1)``.

    The final level of each run is its own reference and is left out.
    """
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8))
    for ax, norm, col in ((axes[0], "L2", 1), (axes[1], "H1", 2)):
        for label, table in tables.items():
            dof, err = np.asarray(table[0])[:-1], np.asarray(table[col])[:-1]
            keep = err > 0
            ax.loglog(dof[keep], err[keep], "o-", ms=3, label=label)
        ax.set_xlabel("degrees of freedom")
        ax.set_ylabel(f"{norm} error")
        ax.grid(True, which="both", lw=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def plot_field(path, mesh: Mesh, values, title: str = "", show_mesh: bool = False) -> None:
    tri = _triangulation(mesh)
    fig, ax = plt.subplots(figsize=(4.4, 3.8))
    im = ax.tripcolor(tri, np.asarray(values), shading="gouraud", cmap="viridis")
    if show_mesh:
        ax.triplot(tri, lw=0.2, color="k")
    fig.colorbar(im, ax=ax)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def plot_mesh(path, mesh: Mesh, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.triplot(_triangulation(mesh), lw=0.25, color="k")
    on = mesh.labels > 0
    for a, b in mesh.boundary[on]:
        ax.plot(*mesh.vertices[[a, b]].T, color="tab:red", lw=2)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
