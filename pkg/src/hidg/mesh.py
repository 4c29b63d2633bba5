"""Conforming triangulations of polygonal domains with edge topology."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "EdgeKind",
    "Edge",
    "Mesh",
    "MeshError",
    "build_uniform_triangulation",
    "import_mesh",
    "refine_uniform",
    "write_mesh",
]

_MIN_AREA = 1e-14


class MeshError(ValueError):
    """Invalid mesh input or topology."""


class EdgeKind(Enum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class Edge:
    endpoints: tuple[int, int]
    left_element: int
    right_element: int | None
    unit_normal: tuple[float, float]
    length: float
    kind: EdgeKind


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulation with reconstructed edge topology.

    Edge data is stored as arrays; ``edges`` gives a list of :class:`Edge`
    views for callers that want per-edge records. ``edge_right`` holds -1 on
    boundary edges. Normals point out of the left element.
    """

    vertices: np.ndarray
    elements: np.ndarray
    edge_vertices: np.ndarray = field(repr=False)
    edge_left: np.ndarray = field(repr=False)
    edge_right: np.ndarray = field(repr=False)
    edge_normal: np.ndarray = field(repr=False)
    edge_length: np.ndarray = field(repr=False)
    element_diameters: np.ndarray = field(repr=False)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_edges(self) -> int:
        return len(self.edge_left)

    @property
    def mesh_size(self) -> float:
        return float(self.element_diameters.max())

    @property
    def interior(self) -> np.ndarray:
        return self.edge_right >= 0

    @property
    def boundary(self) -> np.ndarray:
        return self.edge_right < 0

    @cached_property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.elements)

    @cached_property
    def edges(self) -> list[Edge]:
        out = []
        for k in range(self.n_edges):
            r = int(self.edge_right[k])
            out.append(
                Edge(
                    endpoints=(int(self.edge_vertices[k, 0]), int(self.edge_vertices[k, 1])),
                    left_element=int(self.edge_left[k]),
                    right_element=None if r < 0 else r,
                    unit_normal=(float(self.edge_normal[k, 0]), float(self.edge_normal[k, 1])),
                    length=float(self.edge_length[k]),
                    kind=EdgeKind.BOUNDARY if r < 0 else EdgeKind.INTERIOR,
                )
            )
        return out

    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)


def _signed_areas(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = vertices[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _from_connectivity(vertices, elements) -> Mesh:
    vertices = np.ascontiguousarray(vertices, dtype=float)
    elements = np.ascontiguousarray(elements, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must have shape (V, 2)")
    if elements.ndim != 2 or elements.shape[1] != 3 or len(elements) == 0:
        raise MeshError("elements must have shape (E, 3) with E >= 1")
    if elements.min() < 0 or elements.max() >= len(vertices):
        bad = int(np.flatnonzero((elements < 0).any(1) | (elements >= len(vertices)).any(1))[0])
        raise MeshError(f"element {bad}: vertex index out of range")

    areas = _signed_areas(vertices, elements)
    inverted = np.flatnonzero(areas < _MIN_AREA)
    if inverted.size:
        i = int(inverted[0])
        raise MeshError(f"element {i}: inverted or degenerate (signed area {areas[i]:.3e})")

    # local edge l runs from vertex l to vertex l+1 (counterclockwise)
    a = elements
    b = np.roll(elements, -1, axis=1)
    pairs = np.stack([a, b], axis=-1).reshape(-1, 2)
    owner = np.repeat(np.arange(len(elements)), 3)
    key = np.sort(pairs, axis=1)
    uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if counts.max() > 2:
        e = int(np.flatnonzero(counts > 2)[0])
        elems = sorted(set(owner[inverse == e].tolist()))
        raise MeshError(
            f"non-manifold edge ({uniq[e, 0]}, {uniq[e, 1]}) shared by elements {elems}"
        )

    order = np.argsort(inverse, kind="stable")
    first = np.empty(len(uniq), dtype=np.int64)
    second = np.full(len(uniq), -1, dtype=np.int64)
    seen = np.zeros(len(uniq), dtype=bool)
    for slot in order:
        e = inverse[slot]
        if not seen[e]:
            first[e] = slot
            seen[e] = True
        else:
            second[e] = slot

    left = owner[first]
    right = np.where(second >= 0, owner[np.maximum(second, 0)], -1)
    directed = pairs[first]
    if np.any(second >= 0):
        # a consistently oriented neighbour traverses the shared edge in reverse
        both = second >= 0
        if np.any((pairs[second[both]] != directed[both][:, ::-1]).any(axis=1)):
            raise MeshError("inconsistent element orientation across a shared edge")

    d = vertices[directed[:, 1]] - vertices[directed[:, 0]]
    length = np.hypot(d[:, 0], d[:, 1])
    normal = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]

    p = vertices[elements]
    sides = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
    diam = sides.max(axis=1)

    for arr in (vertices, elements, directed, left, right, normal, length, diam):
        arr.setflags(write=False)
    return Mesh(
        vertices=vertices,
        elements=elements,
        edge_vertices=directed,
        edge_left=left,
        edge_right=right,
        edge_normal=normal,
        edge_length=length,
        element_diameters=diam,
    )


def build_uniform_triangulation(n: int) -> Mesh:
    """Unit square split into n x n cells, each cut along the SW-NE diagonal."""
    if int(n) != n or n < 1:
        raise MeshError(f"mesh resolution must be a positive integer, got {n!r}")
    n = int(n)
    g = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(g, g)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return _from_connectivity(vertices, elements)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four by joining edge midpoints."""
    nv = len(mesh.vertices)
    mids = 0.5 * (mesh.vertices[mesh.edge_vertices[:, 0]] + mesh.vertices[mesh.edge_vertices[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])

    lookup = {}
    for k, (a, b) in enumerate(mesh.edge_vertices):
        lookup[(min(a, b), max(a, b))] = nv + k
    el = mesh.elements
    out = np.empty((4 * len(el), 3), dtype=np.int64)
    for e, (a, b, c) in enumerate(el):
        ab = lookup[(min(a, b), max(a, b))]
        bc = lookup[(min(b, c), max(b, c))]
        ca = lookup[(min(c, a), max(c, a))]
        out[4 * e : 4 * e + 4] = [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return _from_connectivity(vertices, out)


def import_mesh(path) -> Mesh:
    """Read the plain-text node/element format.

    Header ``vertices <V> elements <E>``, then V lines ``x y`` and E lines
    ``i j k`` with 0-based, counterclockwise vertex indices. ``#`` starts a
    comment.
    """
    lines = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                lines.append((lineno, text.split()))
    if not lines:
        raise MeshError(f"{path}: empty mesh file")

    lineno, head = lines[0]
    if len(head) != 4 or head[0] != "vertices" or head[2] != "elements":
        raise MeshError(f"{path}:{lineno}: expected 'vertices <V> elements <E>'")
    try:
        nv, ne = int(head[1]), int(head[3])
    except ValueError:
        raise MeshError(f"{path}:{lineno}: counts must be integers") from None
    body = lines[1:]
    if len(body) != nv + ne:
        raise MeshError(f"{path}: expected {nv + ne} data lines, found {len(body)}")

    vertices = np.empty((nv, 2))
    for idx, (ln, tok) in enumerate(body[:nv]):
        if len(tok) != 2:
            raise MeshError(f"{path}:{ln}: vertex {idx} needs 2 coordinates")
        try:
            vertices[idx] = [float(t) for t in tok]
        except ValueError:
            raise MeshError(f"{path}:{ln}: vertex {idx} has a non-numeric coordinate") from None
    elements = np.empty((ne, 3), dtype=np.int64)
    for idx, (ln, tok) in enumerate(body[nv:]):
        if len(tok) != 3:
            raise MeshError(f"{path}:{ln}: element {idx} needs 3 vertex indices")
        try:
            elements[idx] = [int(t) for t in tok]
        except ValueError:
            raise MeshError(f"{path}:{ln}: element {idx} has a non-integer index") from None
        if elements[idx].min() < 0 or elements[idx].max() >= nv:
            raise MeshError(f"{path}:{ln}: element {idx} references a missing vertex")
    return _from_connectivity(vertices, elements)


def write_mesh(mesh: Mesh, path) -> None:
    lines = [f"vertices {len(mesh.vertices)} elements {mesh.n_elements}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.elements.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
