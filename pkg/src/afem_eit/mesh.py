"""Conforming triangulations of the square (-1, 1)^2 with newest vertex bisection.

Elements are stored with their newest vertex first, so the refinement edge of
``elements[t] = (v0, v1, v2)`` is always the edge ``(v1, v2)``.  Local edge ``i``
of an element is the edge opposite local vertex ``i``.

Boundary faces are oriented counterclockwise (domain on the left) and carry an
integer label: ``0`` for insulated boundary, ``l >= 1`` for electrode ``e_l``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

INSULATED = 0
N_ELECTRODES = 16
ELECTRODE_LENGTH = 0.25
ELECTRODE_PERIOD = 0.5
DOMAIN_AREA = 4.0
MAX_CLOSURE_DEPTH = 64

# local edge i is opposite local vertex i
_LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


class MeshError(ValueError):
    """Invalid mesh data or refinement request."""


def perimeter_coordinate(points: np.ndarray) -> np.ndarray:
    """Counterclockwise arclength along the boundary, starting at (-1, -1).

    Points must lie on the boundary of the square.  Corners are assigned to the
    side that starts there.
    """
    x, y = np.asarray(points, dtype=float).T
    s = np.full(x.shape, np.nan)
    bottom = np.isclose(y, -1.0) & (x < 1.0)
    right = np.isclose(x, 1.0) & (y < 1.0) & ~bottom
    top = np.isclose(y, 1.0) & (x > -1.0) & ~right
    left = np.isclose(x, -1.0) & ~bottom & ~top
    s[bottom] = x[bottom] + 1.0
    s[right] = 2.0 + y[right] + 1.0
    s[top] = 4.0 + 1.0 - x[top]
    s[left] = 6.0 + 1.0 - y[left]
    return s


def electrode_label(points: np.ndarray) -> np.ndarray:
    """Electrode number (1..16) of boundary points, or ``INSULATED``.

    Layout: starting at the corner (-1, -1) and going counterclockwise, the
    boundary alternates electrode (length 1/4) and gap (length 1/4), four
    electrodes per side.  Intended for face midpoints.
    """
    s = perimeter_coordinate(points)
    k = np.floor(s / ELECTRODE_PERIOD)
    inside = (s - k * ELECTRODE_PERIOD) < ELECTRODE_LENGTH
    return np.where(inside, k.astype(int) + 1, INSULATED)


def _pair_keys(a: np.ndarray, b: np.ndarray, base: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return np.minimum(a, b) * base + np.maximum(a, b)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangulation snapshot.

    Attributes
    ----------
    vertices : (N, 2) float array
    elements : (M, 3) int array, newest vertex first, counterclockwise
    boundary : (B, 2) int array of counterclockwise boundary faces
    labels : (B,) int array, 0 = insulated, l = electrode e_l
    generation : (M,) int array, bisection depth of each element
    """

    vertices: np.ndarray
    elements: np.ndarray
    boundary: np.ndarray
    labels: np.ndarray
    generation: np.ndarray = None
    n_electrodes: int = N_ELECTRODES

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        boundary = np.ascontiguousarray(self.boundary, dtype=np.int64).reshape(-1, 2)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).ravel()
        generation = self.generation
        if generation is None:
            generation = np.zeros(len(elements), dtype=np.int64)
        generation = np.ascontiguousarray(generation, dtype=np.int64)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "generation", generation)

        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (N, 2)")
        if elements.ndim != 2 or elements.shape[1] != 3:
            raise MeshError("elements must have shape (M, 3)")
        if len(labels) != len(boundary) or len(generation) != len(elements):
            raise MeshError("labels/generation length mismatch")
        if elements.size and (elements.min() < 0 or elements.max() >= len(vertices)):
            raise MeshError("element references unknown vertex")
        if np.any(np.abs(vertices) > 1.0 + 1e-12):
            raise MeshError("vertex outside [-1, 1]^2")
        if np.any(self.signed_areas <= 0.0):
            bad = np.flatnonzero(self.signed_areas <= 0.0)[:5]
            raise MeshError(f"degenerate or clockwise elements: {bad.tolist()}")

    # -- basic geometry ---------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def refinement_edge(self) -> np.ndarray:
        """Local index of the refinement edge; always 0 by storage convention."""
        return np.zeros(self.n_elements, dtype=np.int64)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(M, 3, 2) gradients of the three P1 hat functions on each element."""
        p = self.vertices[self.elements]
        # grad phi_i = rot90(p_{i+2} - p_{i+1}) / (2|T|)
        e = p[:, [2, 0, 1]] - p[:, [1, 2, 0]]
        grads = np.stack([-e[..., 1], e[..., 0]], axis=-1)
        return grads / (2.0 * self.areas)[:, None, None]

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Elementwise constant gradient of P1 field(s).

        ``values`` of shape (N,) gives (M, 2); shape (J, N) gives (J, M, 2).
        """
        values = np.asarray(values)
        local = values[..., self.elements]
        return np.einsum("...mi,mik->...mk", local, self.basis_gradients)

    # -- topology ---------------------------------------------------------

    @cached_property
    def _edge_data(self):
        local = self.elements[:, _LOCAL_EDGES].reshape(-1, 2)
        keys = _pair_keys(local[:, 0], local[:, 1], self.n_vertices)
        uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        edges = np.sort(local[first], axis=1)
        elem2edge = inverse.reshape(-1, 3)
        counts = np.bincount(inverse, minlength=len(uniq))
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two elements")
        edge2elem = np.full((len(uniq), 2), -1, dtype=np.int64)
        owner = np.repeat(np.arange(self.n_elements), 3)
        order = np.argsort(inverse, kind="stable")
        sorted_edges = inverse[order]
        starts = np.searchsorted(sorted_edges, np.arange(len(uniq)))
        edge2elem[:, 0] = owner[order[starts]]
        two = counts == 2
        edge2elem[two, 1] = owner[order[starts[two] + 1]]
        return edges, elem2edge, edge2elem, uniq

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) vertex pairs, each sorted ascending."""
        return self._edge_data[0]

    @property
    def elem2edge(self) -> np.ndarray:
        """(M, 3) edge ids; column i is the edge opposite local vertex i."""
        return self._edge_data[1]

    @property
    def edge2elem(self) -> np.ndarray:
        """(E, 2) incident elements, second entry -1 on the boundary."""
        return self._edge_data[2]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_ids(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Edge ids for vertex pairs (either orientation); -1 if absent."""
        keys = _pair_keys(a, b, self.n_vertices)
        table = self._edge_data[3]
        idx = np.searchsorted(table, keys)
        idx = np.minimum(idx, len(table) - 1)
        return np.where(table[idx] == keys, idx, -1)

    @cached_property
    def adjacency(self) -> np.ndarray:
        """(M, 3) neighbor across local edge i, or -1 on the boundary."""
        e2e = self.edge2elem[self.elem2edge]
        me = np.arange(self.n_elements)[:, None]
        return np.where(e2e[..., 0] == me, e2e[..., 1], e2e[..., 0])

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Edge id of every boundary face."""
        ids = self.edge_ids(self.boundary[:, 0], self.boundary[:, 1])
        if np.any(ids < 0):
            raise MeshError("boundary face is not a mesh edge")
        return ids

    @cached_property
    def boundary_elements(self) -> np.ndarray:
        return self.edge2elem[self.boundary_edges, 0]

    @cached_property
    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary.ravel()] = True
        return mask

    def face_lengths(self, faces: np.ndarray) -> np.ndarray:
        d = self.vertices[faces[:, 1]] - self.vertices[faces[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        return self.face_lengths(self.edges)

    def electrode_lengths(self) -> np.ndarray:
        """Total length |e_l| for l = 1..L."""
        lengths = self.face_lengths(self.boundary)
        return np.bincount(self.labels, weights=lengths, minlength=self.n_electrodes + 1)[1:]

    # -- checks -----------------------------------------------------------

    def min_angle(self) -> float:
        """Smallest interior angle over all elements, in radians."""
        p = self.vertices[self.elements]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cos = np.einsum("mk,mk->m", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
        return float(np.min(angles))

    def is_conforming(self) -> bool:
        """Exhaustive edge scan.

        Every edge must have one or two incident elements, single-element edges
        must be exactly the boundary faces, and no vertex may sit in the
        interior of another element's edge (hanging node).
        """
        counts = np.bincount(self.elem2edge.ravel(), minlength=self.n_edges)
        single = np.flatnonzero(counts == 1)
        if np.any(counts > 2) or set(single.tolist()) != set(self.boundary_edges.tolist()):
            return False
        if len(self.boundary_edges) != len(np.unique(self.boundary_edges)):
            return False
        # hanging node: an edge midpoint coinciding with a mesh vertex
        mids = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        scale = 2.0**40
        vkeys = {tuple(v) for v in np.round(self.vertices * scale).astype(np.int64)}
        mkeys = np.round(mids * scale).astype(np.int64)
        return not any(tuple(m) in vkeys for m in mkeys)


@dataclass
class ParentMap:
    """Links a refined mesh to its parent.

    ``element_parent[c]`` is the parent-mesh element containing child ``c``.
    New vertices are numbered from ``n_parent_vertices`` on in creation order;
    ``vertex_parents[k]`` holds the endpoints of the edge bisected to create
    vertex ``n_parent_vertices + k``.  Endpoints may themselves be new vertices
    created earlier in the same map, but always with a smaller index.
    """

    n_parent_vertices: int
    n_parent_elements: int
    element_parent: np.ndarray
    vertex_parents: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    batches: list = field(default_factory=list)

    @property
    def n_vertices(self) -> int:
        return self.n_parent_vertices + len(self.vertex_parents)

    def then(self, other: "ParentMap") -> "ParentMap":
        """Compose with a map applied afterwards to the child mesh."""
        if other.n_parent_vertices != self.n_vertices:
            raise MeshError("parent maps do not chain")
        return ParentMap(
            n_parent_vertices=self.n_parent_vertices,
            n_parent_elements=self.n_parent_elements,
            element_parent=self.element_parent[other.element_parent],
            vertex_parents=np.vstack([self.vertex_parents, other.vertex_parents]),
            batches=self.batches + other.batches,
        )


def build_initial_mesh(n_per_side: int = 8) -> Mesh:
    """Uniform grid on (-1, 1)^2, every square cut along the same diagonal.

    The diagonals are the refinement edges, which makes the initial mesh
    compatibly divisible.
    """
    if not isinstance(n_per_side, (int, np.integer)) or n_per_side <= 0 or n_per_side % 8:
        raise MeshError(f"n_per_side must be a positive multiple of 8, got {n_per_side!r}")
    n = int(n_per_side)
    t = np.linspace(-1.0, 1.0, n + 1)
    xx, yy = np.meshgrid(t, t)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    lower = np.column_stack([b, c, a])
    upper = np.column_stack([d, a, c])
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    k = np.arange(n)
    bottom = np.column_stack([vid(k, 0), vid(k + 1, 0)])
    right = np.column_stack([vid(n, k), vid(n, k + 1)])
    top = np.column_stack([vid(n - k, n), vid(n - k - 1, n)])
    left = np.column_stack([vid(0, n - k), vid(0, n - k - 1)])
    boundary = np.vstack([bottom, right, top, left])
    mids = 0.5 * (vertices[boundary[:, 0]] + vertices[boundary[:, 1]])
    labels = electrode_label(mids)
    return Mesh(vertices, elements, boundary, labels)


def refine(mesh: Mesh, marked) -> tuple[Mesh, ParentMap]:
    """Bisect every marked element once across its refinement edge.

    Neighbours are bisected recursively until the mesh is conforming again.
    Returns the new mesh and the parent map.
    """
    marked = np.unique(np.asarray(list(marked) if isinstance(marked, (set, frozenset)) else marked,
                                  dtype=np.int64).ravel())
    if marked.size == 0:
        raise MeshError("refine needs a nonempty set of marked elements")
    if marked[0] < 0 or marked[-1] >= mesh.n_elements:
        raise MeshError("marked set contains unknown element ids")

    elem2edge = mesh.elem2edge
    ref = elem2edge[:, 0]
    cut = np.zeros(mesh.n_edges, dtype=bool)
    cut[ref[marked]] = True
    for _ in range(MAX_CLOSURE_DEPTH):
        need = cut[elem2edge].any(axis=1) & ~cut[ref]
        if not need.any():
            break
        cut[ref[need]] = True
    else:
        raise MeshError(f"closure did not terminate within {MAX_CLOSURE_DEPTH} sweeps")

    nv = mesh.n_vertices
    cut_ids = np.flatnonzero(cut)
    vertex_parents = mesh.edges[cut_ids]
    new_vertices = 0.5 * (mesh.vertices[vertex_parents[:, 0]] + mesh.vertices[vertex_parents[:, 1]])
    cut_keys = mesh._edge_data[3][cut_ids]  # sorted, same base as mesh edge keys
    mid_of = nv + np.arange(len(cut_ids))

    def midpoint(a, b):
        keys = _pair_keys(a, b, nv)
        # pairs involving new vertices never match an old edge key
        keys = np.where((a >= nv) | (b >= nv), -1, keys)
        idx = np.minimum(np.searchsorted(cut_keys, keys), max(len(cut_keys) - 1, 0))
        hit = cut_keys[idx] == keys
        return np.where(hit, mid_of[idx], -1)

    elements = [mesh.elements.copy()]
    generation = [mesh.generation.copy()]
    parent = [np.arange(mesh.n_elements)]
    elems = elements[0]
    gen = generation[0]
    par = parent[0]
    while True:
        mids = midpoint(elems[:, 1], elems[:, 2])
        idx = np.flatnonzero(mids >= 0)
        if idx.size == 0:
            break
        v0, v1, v2 = elems[idx].T
        m = mids[idx]
        child2 = np.column_stack([m, v2, v0])
        elems[idx] = np.column_stack([m, v0, v1])
        gen[idx] += 1
        elems = np.vstack([elems, child2])
        gen = np.concatenate([gen, gen[idx]])
        par = np.concatenate([par, par[idx]])

    boundary = mesh.boundary.copy()
    labels = mesh.labels.copy()
    bm = midpoint(boundary[:, 0], boundary[:, 1])
    bidx = np.flatnonzero(bm >= 0)
    tail = np.column_stack([bm[bidx], boundary[bidx, 1]])
    boundary[bidx, 1] = bm[bidx]
    boundary = np.vstack([boundary, tail])
    labels = np.concatenate([labels, labels[bidx]])

    new_mesh = Mesh(
        np.vstack([mesh.vertices, new_vertices]),
        elems,
        boundary,
        labels,
        gen,
        mesh.n_electrodes,
    )
    pmap = ParentMap(
        n_parent_vertices=nv,
        n_parent_elements=mesh.n_elements,
        element_parent=par,
        vertex_parents=vertex_parents,
        batches=[len(cut_ids)],
    )
    return new_mesh, pmap


def refine_times(mesh: Mesh, marked, bisections: int = 2) -> tuple[Mesh, ParentMap]:
    """Bisect each marked element ``bisections`` times (plus closure).

    After the first sweep, the children of marked elements that are exactly one
    generation deeper than their parent are marked for the next sweep.
    """
    marked = np.unique(np.asarray(list(marked) if isinstance(marked, (set, frozenset)) else marked,
                                  dtype=np.int64).ravel())
    target = np.zeros(mesh.n_elements, dtype=bool)
    target[marked] = True
    base_gen = mesh.generation
    new_mesh, pmap = refine(mesh, marked)
    for sweep in range(1, bisections):
        origin = pmap.element_parent
        again = np.flatnonzero(target[origin] & (new_mesh.generation == base_gen[origin] + sweep))
        if again.size == 0:
            break
        new_mesh, step = refine(new_mesh, again)
        pmap = pmap.then(step)
    return new_mesh, pmap


def uniform_refine(mesh: Mesh, bisections: int = 2) -> tuple[Mesh, ParentMap]:
    return refine_times(mesh, np.arange(mesh.n_elements), bisections)


def mesh_size(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Local mesh sizes: h_T = |T|^(1/2) per element, h_F = |F| per edge."""
    return np.sqrt(mesh.areas), mesh.edge_lengths


@dataclass
class FaceSets:
    """Partition of the mesh edges into interior, electrode and insulated faces.

    ``normals[e]`` is the fixed unit normal of edge ``e``.  On boundary edges it
    is the outward normal.  On interior edges it points from ``edge2elem[e, 0]``
    into ``edge2elem[e, 1]``.
    """

    interior: np.ndarray
    electrode: dict
    insulated: np.ndarray
    normals: np.ndarray
    incident: np.ndarray
    edge_label: np.ndarray  # -1 interior, 0 insulated, l electrode

    @property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(self.edge_label >= 0)


def classify_faces(mesh: Mesh) -> FaceSets:
    edges = mesh.edges
    incident = mesh.edge2elem
    d = mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]]
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / mesh.edge_lengths[:, None]
    # orient so the normal points out of the first incident element
    to_mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]]) - mesh.centroids[incident[:, 0]]
    flip = np.einsum("ek,ek->e", normals, to_mid) < 0
    normals[flip] *= -1.0

    edge_label = np.full(mesh.n_edges, -1, dtype=np.int64)
    edge_label[mesh.boundary_edges] = mesh.labels
    interior = np.flatnonzero(edge_label < 0)
    insulated = np.flatnonzero(edge_label == INSULATED)
    electrode = {
        l: np.flatnonzero(edge_label == l) for l in range(1, mesh.n_electrodes + 1)
    }
    return FaceSets(interior, electrode, insulated, normals, incident, edge_label)


# -- text format -------------------------------------------------------------

def write_mesh(path, mesh: Mesh, fields: dict | None = None) -> None:
    """Write the plain-text mesh format, optionally followed by nodal fields.

    Each field is a ``field <name> N`` line followed by N values.
    """
    lines = [f"vertices {mesh.n_vertices} elements {mesh.n_elements} boundary {len(mesh.boundary)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{a} {b} {c} 0 {g}" for (a, b, c), g in zip(mesh.elements.tolist(), mesh.generation.tolist())]
    lines += [
        f"{a} {b} {'ins' if lab == INSULATED else f'e{lab}'}"
        for (a, b), lab in zip(mesh.boundary.tolist(), mesh.labels.tolist())
    ]
    for name, values in (fields or {}).items():
        values = np.asarray(values, dtype=float)
        if len(values) != mesh.n_vertices:
            raise MeshError(f"field {name!r} has {len(values)} values for {mesh.n_vertices} vertices")
        lines.append(f"field {name} {len(values)}")
        lines += [repr(v) for v in values.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> tuple[Mesh, dict]:
    """Read a mesh written by :func:`write_mesh` (any refinement edge index)."""
    tokens = Path(path).read_text().split("\n")
    head = tokens[0].split()
    if len(head) != 6 or head[0::2] != ["vertices", "elements", "boundary"]:
        raise MeshError(f"bad mesh header: {tokens[0]!r}")
    nv, ne, nb = int(head[1]), int(head[3]), int(head[5])
    pos = 1
    vertices = np.array([list(map(float, tokens[pos + k].split())) for k in range(nv)]).reshape(-1, 2)
    pos += nv
    raw = np.array([list(map(int, tokens[pos + k].split())) for k in range(ne)], dtype=np.int64).reshape(-1, 5)
    pos += ne
    faces, labels = [], []
    for k in range(nb):
        a, b, lab = tokens[pos + k].split()
        faces.append((int(a), int(b)))
        labels.append(INSULATED if lab == "ins" else int(lab[1:]))
    pos += nb
    # rotate so the vertex opposite the refinement edge comes first
    refedge = raw[:, 3]
    if np.any((refedge < 0) | (refedge > 2)):
        raise MeshError("refinement edge index must be 0, 1 or 2")
    rows = np.arange(ne)[:, None]
    order = (refedge[:, None] + np.arange(3)[None, :]) % 3
    elements = raw[:, :3][rows, order]
    fields = {}
    while pos < len(tokens) and tokens[pos].strip():
        _, name, count = tokens[pos].split()
        count = int(count)
        fields[name] = np.array([float(tokens[pos + 1 + k]) for k in range(count)])
        pos += 1 + count
    mesh = Mesh(vertices, elements, np.array(faces, dtype=np.int64).reshape(-1, 2),
                np.array(labels, dtype=np.int64), raw[:, 4])
    return mesh, fields
