"""Tetrahedral meshes: ASCII I/O, rest-state precomputation, deformation
gradients and boundary-surface extraction."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import label_id, label_name

DEGENERATE_DET = 1e-12

# Local faces of a tet, each listed so that the opposite vertex is known:
# face k omits vertex k.
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)


class MeshFormatError(ValueError):
    """Raised for malformed tet files; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message}, line {line}"
        super().__init__(message)


class DegenerateTetError(ValueError):
    def __init__(self, tet_index: int, det: float):
        self.tet_index = tet_index
        super().__init__(f"degenerate tet {tet_index}: |det(D_m)| = {abs(det):.3e}")


@dataclass
class TetMesh:
    vertices_rest: np.ndarray  # (n, 3) float64, meters
    tets: np.ndarray  # (m, 4) int64
    labels: np.ndarray  # (m,) int16 semantic class ids
    alive: np.ndarray = None  # (m,) bool
    rest_volume: np.ndarray | None = None  # (m,)
    inv_rest_matrix: np.ndarray | None = None  # (m, 3, 3)
    warnings: list[str] = field(default_factory=list)
    _face_neighbors: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices_rest = np.ascontiguousarray(self.vertices_rest, dtype=np.float64).reshape(-1, 3)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int16).reshape(-1)
        if self.alive is None:
            self.alive = np.ones(len(self.tets), dtype=bool)
        if len(self.labels) != len(self.tets):
            raise ValueError("labels and tets length differ")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices_rest)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def has_rest_state(self) -> bool:
        return self.inv_rest_matrix is not None

    def face_neighbors(self) -> np.ndarray:
        """(m, 4) index of the tet across local face k, or -1 on the rest boundary.

        Built from the full (all tets alive) topology, so it stays valid as tets die.
        """
        if self._face_neighbors is None:
            self._face_neighbors = _face_neighbors(self.tets)
        return self._face_neighbors

    def copy(self) -> "TetMesh":
        return TetMesh(
            self.vertices_rest.copy(),
            self.tets.copy(),
            self.labels.copy(),
            self.alive.copy(),
            None if self.rest_volume is None else self.rest_volume.copy(),
            None if self.inv_rest_matrix is None else self.inv_rest_matrix.copy(),
            list(self.warnings),
        )


@dataclass
class SurfaceMesh:
    triangles: np.ndarray  # (k, 3) vertex indices, outward-oriented
    labels: np.ndarray  # (k,) object label of the owning tet
    owner_tet: np.ndarray  # (k,)
    owner_face: np.ndarray  # (k,) local face index 0..3 in the owner tet
    vertices: np.ndarray  # (n, 3) reference to the positions used for orientation

    def __len__(self) -> int:
        return len(self.triangles)


def _face_neighbors(tets: np.ndarray) -> np.ndarray:
    m = len(tets)
    faces = tets[:, TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    same = np.all(sk[1:] == sk[:-1], axis=1)
    nbr = np.full(4 * m, -1, dtype=np.int64)
    a = order[:-1][same]
    b = order[1:][same]
    nbr[a] = b // 4
    nbr[b] = a // 4
    return nbr.reshape(m, 4)


def load_tet_mesh(path: str | Path) -> TetMesh:
    """Read the ASCII ``tetmesh <nv> <nt>`` format.

    Rest state is left unset; call :func:`compute_rest_state`. Tets with
    non-positive signed volume are reported in ``mesh.warnings``.
    """
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()

    def content(start):
        for i in range(start, len(lines)):
            s = lines[i].split("#", 1)[0].strip()
            if s:
                yield i + 1, s

    it = content(0)
    try:
        lineno, header = next(it)
    except StopIteration:
        raise MeshFormatError("empty file", 1) from None
    parts = header.split()
    if len(parts) != 3 or parts[0] != "tetmesh":
        raise MeshFormatError("expected header 'tetmesh <n_vertices> <n_tets>'", lineno)
    try:
        nv, nt = int(parts[1]), int(parts[2])
    except ValueError:
        raise MeshFormatError("non-integer counts in header", lineno) from None

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, s = next(it)
        except StopIteration:
            raise MeshFormatError(f"expected {nv} vertices, got {i}", len(lines)) from None
        p = s.split()
        if len(p) != 3:
            raise MeshFormatError("vertex line needs 3 coordinates", lineno)
        try:
            verts[i] = [float(x) for x in p]
        except ValueError:
            raise MeshFormatError("bad vertex coordinate", lineno) from None

    tets = np.empty((nt, 4), dtype=np.int64)
    labels = np.empty(nt, dtype=np.int16)
    for i in range(nt):
        try:
            lineno, s = next(it)
        except StopIteration:
            raise MeshFormatError(f"expected {nt} tets, got {i}", len(lines)) from None
        p = s.split()
        if len(p) != 5:
            raise MeshFormatError("tet line needs 4 indices and a label", lineno)
        try:
            idx = [int(x) for x in p[:4]]
        except ValueError:
            raise MeshFormatError("bad tet index", lineno) from None
        if any(j < 0 or j >= nv for j in idx):
            raise MeshFormatError("index out of range", lineno)
        if len(set(idx)) != 4:
            raise MeshFormatError("repeated vertex index in tet", lineno)
        try:
            labels[i] = label_id(p[4])
        except KeyError:
            raise MeshFormatError(f"unknown label {p[4]!r}", lineno) from None
        tets[i] = idx

    extra = next(it, None)
    if extra is not None:
        raise MeshFormatError("trailing content", extra[0])

    mesh = TetMesh(verts, tets, labels)
    vols = signed_volumes(verts, tets)
    for i in np.flatnonzero(vols <= 0.0):
        mesh.warnings.append(f"tet {i} has non-positive volume {vols[i]:.3e}")
    return mesh


def save_tet_mesh(mesh: TetMesh, path: str | Path, alive_only: bool = False) -> None:
    tets, labels = mesh.tets, mesh.labels
    if alive_only:
        tets, labels = tets[mesh.alive], labels[mesh.alive]
    with Path(path).open("w") as fh:
        fh.write(f"tetmesh {mesh.n_vertices} {len(tets)}\n")
        for x, y, z in mesh.vertices_rest:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        for t, lab in zip(tets, labels):
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]} {label_name(int(lab))}\n")


def edge_matrices(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Columns are (v1-v0, v2-v0, v3-v0) for each tet; shape (m, 3, 3)."""
    p = positions[tets]
    return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)


def signed_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    if len(tets) == 0:
        return np.zeros(0)
    return np.linalg.det(edge_matrices(positions, tets)) / 6.0


def compute_rest_state(mesh: TetMesh) -> TetMesh:
    """Fill ``rest_volume`` and ``inv_rest_matrix`` in place and return the mesh."""
    dm = edge_matrices(mesh.vertices_rest, mesh.tets)
    det = np.linalg.det(dm) if len(dm) else np.zeros(0)
    bad = np.flatnonzero(np.abs(det) < DEGENERATE_DET)
    if len(bad):
        raise DegenerateTetError(int(bad[0]), float(det[bad[0]]))
    mesh.rest_volume = np.abs(det) / 6.0
    mesh.inv_rest_matrix = np.linalg.inv(dm) if len(dm) else np.zeros((0, 3, 3))
    mesh.face_neighbors()
    return mesh


def deformation_gradient(mesh: TetMesh, tet_index: int, positions: np.ndarray) -> np.ndarray:
    """F = D_s D_m^-1. Inverted configurations are returned as-is."""
    ds = edge_matrices(positions, mesh.tets[tet_index : tet_index + 1])[0]
    return ds @ mesh.inv_rest_matrix[tet_index]


def deformation_gradients(mesh: TetMesh, positions: np.ndarray) -> np.ndarray:
    return edge_matrices(positions, mesh.tets) @ mesh.inv_rest_matrix


def extract_surface(mesh: TetMesh, positions: np.ndarray | None = None) -> SurfaceMesh:
    """Faces belonging to exactly one alive tet, oriented away from the owner.

    Orientation is decided on ``positions`` (rest positions by default).
    Output order is by (owner tet, local face), so repeated calls agree.
    """
    if positions is None:
        positions = mesh.vertices_rest
    alive_idx = np.flatnonzero(mesh.alive)
    if len(alive_idx) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SurfaceMesh(np.zeros((0, 3), np.int64), empty.astype(np.int16), empty, empty, positions)

    tets = mesh.tets[alive_idx]
    faces = tets[:, TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    boundary = counts[inverse.reshape(-1)] == 1
    flat = np.flatnonzero(boundary)
    owner = alive_idx[flat // 4]
    local = flat % 4
    tri = faces[flat].copy()

    # Flip any triangle whose normal points toward the owner's opposite vertex.
    p = positions
    n = np.cross(p[tri[:, 1]] - p[tri[:, 0]], p[tri[:, 2]] - p[tri[:, 0]])
    opposite = p[mesh.tets[owner, local]]
    inward = np.einsum("ij,ij->i", n, opposite - p[tri[:, 0]]) > 0
    tri[inward] = tri[inward][:, [0, 2, 1]]

    return SurfaceMesh(tri, mesh.labels[owner].copy(), owner, local, positions)


def total_volume(mesh: TetMesh, positions: np.ndarray) -> float:
    return float(np.abs(signed_volumes(positions, mesh.tets[mesh.alive])).sum())


def connected_components(mesh: TetMesh) -> np.ndarray:
    """Per-tet component id (-1 for dead tets) from shared vertices of alive tets."""
    parent = np.arange(mesh.n_vertices)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for t in mesh.tets[mesh.alive]:
        r0 = find(t[0])
        for v in t[1:]:
            r = find(v)
            if r != r0:
                parent[r] = r0
    comp = np.full(mesh.n_tets, -1, dtype=np.int64)
    roots = {}
    for i in np.flatnonzero(mesh.alive):
        r = find(mesh.tets[i, 0])
        comp[i] = roots.setdefault(r, len(roots))
    return comp


def box_mesh(shape=(1, 1, 1), size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), label="fat") -> TetMesh:
    """Regular grid of hexahedral cells, each split into 6 tets around the main diagonal."""
    nx, ny, nz = shape
    xs = np.linspace(0.0, size[0], nx + 1) + origin[0]
    ys = np.linspace(0.0, size[1], ny + 1) + origin[1]
    zs = np.linspace(0.0, size[2], nz + 1) + origin[2]
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    cells = np.argwhere(np.ones((nx, ny, nz), bool))
    tets = _hex_cells_to_tets(cells, (nx + 1, ny + 1, nz + 1))
    return TetMesh(verts, tets, np.full(len(tets), label_id(label), np.int16))


# Kuhn split of the unit cube (corner bits x|y<<1|z<<2), all positively oriented.
_KUHN = np.array(
    [[0, 1, 3, 7], [0, 3, 2, 7], [0, 2, 6, 7], [0, 6, 4, 7], [0, 4, 5, 7], [0, 5, 1, 7]],
    dtype=np.int64,
)


def _hex_cells_to_tets(cells: np.ndarray, vshape) -> np.ndarray:
    vx, vy, vz = vshape
    corners = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
    out = np.empty((len(cells), 6, 4), dtype=np.int64)
    for k, tet in enumerate(_KUHN):
        for j, c in enumerate(tet):
            ijk = cells + corners[c]
            out[:, k, j] = (ijk[:, 0] * vy + ijk[:, 1]) * vz + ijk[:, 2]
    return out.reshape(-1, 4)


def strip_mesh(n_tets: int = 3, label="cystic_duct", scale: float = 1.0) -> TetMesh:
    """Face-connected chain of regular tets (Boerdijk-Coxeter helix) along +z.

    Tet i uses vertices i..i+3, so neighbours share exactly one face.
    """
    k = np.arange(n_tets + 3)
    theta = np.arccos(-2.0 / 3.0)
    r, h = 3.0 * np.sqrt(3.0) / 10.0, 1.0 / np.sqrt(10.0)
    verts = scale * np.stack([r * np.cos(k * theta), r * np.sin(k * theta), k * h], axis=1)
    tets = np.stack([k[:n_tets] + j for j in range(4)], axis=1)
    flip = signed_volumes(verts, tets) < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return TetMesh(verts, tets, np.full(n_tets, label_id(label), np.int16))


def warn_if_inverted(mesh: TetMesh) -> None:
    for w in mesh.warnings:
        warnings.warn(w, stacklevel=2)
