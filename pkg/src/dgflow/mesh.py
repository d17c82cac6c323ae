"""2D triangular meshes with face topology, size functions and quality metrics.

Meshes are immutable after construction.  Interior faces carry a unit normal
pointing from the lower-indexed ("left") element to the higher-indexed
("right") one, which fixes the sign convention of all jump and average
formulas downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    """Structural mesh defect (degenerate element, bad topology)."""


class MeshParseError(Exception):
    """Malformed mesh file; carries the offending 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class InteriorFace:
    vertices: tuple[int, int]
    left: int            # lower-indexed adjacent element
    right: int           # higher-indexed adjacent element
    normal: np.ndarray   # unit normal pointing left -> right
    length: float


@dataclass(frozen=True)
class BoundaryFace:
    vertices: tuple[int, int]
    owner: int
    normal: np.ndarray   # outward unit normal
    length: float


@dataclass(frozen=True)
class QualityReport:
    """Mesh-regularity constants: min/max of |K|/h_K^2, the face-to-element
    size ratio, and the maximal element diameter."""

    shape_regularity_c1: float
    shape_regularity_c2: float
    contact_regularity_c3: float
    max_mesh_size: float


class Mesh:
    """Conforming triangulation with precomputed face topology.

    Parameters
    ----------
    vertices : (n, 2) float array
    elements : (m, 3) int array, counterclockwise vertex triples
    """

    def __init__(self, vertices, elements):
        vertices = np.asarray(vertices, dtype=float)
        elements = np.asarray(elements, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        if elements.ndim != 2 or elements.shape[1] != 3:
            raise MeshError("elements must be an (m, 3) array")
        if elements.size and (elements.min() < 0 or elements.max() >= len(vertices)):
            raise MeshError("element vertex index out of range")

        self.vertices = vertices
        self.elements = elements
        self.n_vertices = len(vertices)
        self.n_elements = len(elements)

        p0 = vertices[elements[:, 0]]
        p1 = vertices[elements[:, 1]]
        p2 = vertices[elements[:, 2]]
        cross = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - \
                (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
        self.element_areas = 0.5 * cross
        bad = np.nonzero(self.element_areas <= 0.0)[0]
        if bad.size:
            raise MeshError(f"element {bad[0]} is degenerate or not counterclockwise "
                            f"(signed area {self.element_areas[bad[0]]:g})")
        d01 = np.linalg.norm(p1 - p0, axis=1)
        d12 = np.linalg.norm(p2 - p1, axis=1)
        d20 = np.linalg.norm(p0 - p2, axis=1)
        self.element_diameters = np.maximum(np.maximum(d01, d12), d20)
        self.element_centroids = (p0 + p1 + p2) / 3.0

        self.interior_faces, self.boundary_faces = self._build_faces()

        for arr in (self.vertices, self.elements, self.element_areas,
                    self.element_diameters, self.element_centroids):
            arr.setflags(write=False)

    def _build_faces(self):
        edge_owner: dict[tuple[int, int], list[int]] = {}
        for e, tri in enumerate(self.elements):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edge_owner.setdefault(key, []).append(e)
        interior, boundary = [], []
        for (a, b), owners in sorted(edge_owner.items()):
            if len(owners) > 2:
                raise MeshError(f"edge {(a, b)} shared by more than two elements")
            pa, pb = self.vertices[a], self.vertices[b]
            tang = pb - pa
            length = float(np.linalg.norm(tang))
            if length == 0.0:
                raise MeshError(f"zero-length edge {(a, b)}")
            nrm = np.array([tang[1], -tang[0]]) / length
            if len(owners) == 1:
                own = owners[0]
                if np.dot(nrm, pa - self.element_centroids[own]) < 0:
                    nrm = -nrm
                nrm.setflags(write=False)
                boundary.append(BoundaryFace((a, b), own, nrm, length))
            else:
                left, right = sorted(owners)
                if np.dot(nrm, self.element_centroids[right]
                          - self.element_centroids[left]) < 0:
                    nrm = -nrm
                nrm.setflags(write=False)
                interior.append(InteriorFace((a, b), left, right, nrm, length))
        return tuple(interior), tuple(boundary)

    @property
    def total_area(self) -> float:
        return float(self.element_areas.sum())

    @property
    def max_mesh_size(self) -> float:
        return float(self.element_diameters.max())

    def face_endpoints(self, face) -> tuple[np.ndarray, np.ndarray]:
        a, b = face.vertices
        return self.vertices[a], self.vertices[b]


def quality_report(mesh: Mesh) -> QualityReport:
    """Exact min/max regularity constants over all elements and faces."""
    ratios = mesh.element_areas / mesh.element_diameters**2
    c3 = np.inf
    for face in mesh.interior_faces:
        for e in (face.left, face.right):
            c3 = min(c3, face.length / mesh.element_diameters[e])
    for face in mesh.boundary_faces:
        c3 = min(c3, face.length / mesh.element_diameters[face.owner])
    return QualityReport(
        shape_regularity_c1=float(ratios.min()),
        shape_regularity_c2=float(ratios.max()),
        contact_regularity_c3=float(c3),
        max_mesh_size=mesh.max_mesh_size,
    )


def build_structured_mesh(nx: int, ny: int, pattern: str = "right-diagonal") -> Mesh:
    """Triangulate the unit square (0,1)^2 into an nx-by-ny grid of cells.

    ``right-diagonal`` splits each cell along the lower-left/upper-right
    diagonal (2 triangles per cell); ``crisscross`` adds the cell midpoint
    and splits into 4 triangles.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)

    def vid(i, j):
        return j * (nx + 1) + i

    grid = np.array([(x, y) for y in ys for x in xs])
    if pattern == "right-diagonal":
        elements = []
        for j in range(ny):
            for i in range(nx):
                v00, v10 = vid(i, j), vid(i + 1, j)
                v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
                elements.append((v00, v10, v11))
                elements.append((v00, v11, v01))
        return Mesh(grid, np.array(elements))
    if pattern == "crisscross":
        centers = np.array([(0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1]))
                            for j in range(ny) for i in range(nx)])
        vertices = np.vstack([grid, centers])
        elements = []
        for j in range(ny):
            for i in range(nx):
                c = len(grid) + j * nx + i
                v00, v10 = vid(i, j), vid(i + 1, j)
                v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
                elements += [(v00, v10, c), (v10, v11, c),
                             (v11, v01, c), (v01, v00, c)]
        return Mesh(vertices, np.array(elements))
    raise ValueError(f"unknown pattern {pattern!r}")


MESH_HEADER = "dgflow-mesh 1"


def read_mesh(text: str) -> Mesh:
    """Parse the line-oriented ASCII mesh format (see ``write_mesh``)."""
    lines = text.splitlines()

    def stripped(idx):
        line = lines[idx]
        cut = line.find("#")
        if cut >= 0:
            line = line[:cut]
        return line.strip()

    content = [(i + 1, stripped(i)) for i in range(len(lines)) if stripped(i)]
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(content):
            lineno = len(lines) + 1
            raise MeshParseError(lineno, f"unexpected end of file, expected {what}")
        lineno, line = content[pos]
        pos += 1
        return lineno, line

    lineno, line = take("header")
    if line != MESH_HEADER:
        raise MeshParseError(lineno, f"expected header {MESH_HEADER!r}, got {line!r}")

    lineno, line = take("vertex count")
    parts = line.split()
    if len(parts) != 2 or parts[0] != "vertices":
        raise MeshParseError(lineno, f"expected 'vertices N', got {line!r}")
    try:
        n_vert = int(parts[1])
    except ValueError:
        raise MeshParseError(lineno, f"bad vertex count {parts[1]!r}") from None

    vertices = np.empty((n_vert, 2))
    for k in range(n_vert):
        lineno, line = take("vertex coordinates")
        parts = line.split()
        if len(parts) != 2:
            raise MeshParseError(lineno, f"expected 'x y', got {line!r}")
        try:
            vertices[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshParseError(lineno, f"bad coordinate in {line!r}") from None

    lineno, line = take("element count")
    parts = line.split()
    if len(parts) != 2 or parts[0] != "elements":
        raise MeshParseError(lineno, f"expected 'elements M', got {line!r}")
    try:
        n_elem = int(parts[1])
    except ValueError:
        raise MeshParseError(lineno, f"bad element count {parts[1]!r}") from None

    elements = np.empty((n_elem, 3), dtype=np.int64)
    for k in range(n_elem):
        lineno, line = take("element indices")
        parts = line.split()
        if len(parts) != 3:
            raise MeshParseError(lineno, f"expected 'i j k', got {line!r}")
        try:
            tri = [int(p) for p in parts]
        except ValueError:
            raise MeshParseError(lineno, f"bad vertex index in {line!r}") from None
        for idx in tri:
            if idx < 0 or idx >= n_vert:
                raise MeshParseError(
                    lineno, f"vertex index {idx} out of range 0..{n_vert - 1}")
        p0, p1, p2 = vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]
        signed = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if signed <= 0:
            raise MeshParseError(lineno, f"element {tri} is not counterclockwise")
        elements[k] = tri

    if pos != len(content):
        lineno, line = content[pos]
        raise MeshParseError(lineno, f"trailing content {line!r}")
    return Mesh(vertices, elements)


def write_mesh(mesh: Mesh) -> str:
    """Serialize to the canonical ASCII form (exact float round trip)."""
    out = [MESH_HEADER, f"vertices {mesh.n_vertices}"]
    out += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    out.append(f"elements {mesh.n_elements}")
    out += [f"{a} {b} {c}" for a, b, c in mesh.elements]
    return "\n".join(out) + "\n"
