"""Meshes, icospheres, quaternion rotations and the pinhole camera.

Conventions: right-handed world with +Z up. The camera looks at the world
origin; its frame has x to the right, y down (image rows) and z forward, so
``depth`` is the camera-frame z coordinate. Pixel (col, row) covers
[col, col+1) x [row, row+1); its centre is at (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MAX_ICOSPHERE_LEVEL = 6


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int, counter-clockwise seen from outside

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError(
                f"face index out of range for {len(self.vertices)} vertices"
            )

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, (E, 2)."""
        return np.unique(np.sort(_directed_edges(self.faces), axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return self.num_vertices - len(self.edges()) + self.num_faces

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy())


def _directed_edges(faces: np.ndarray) -> np.ndarray:
    return np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])


# ---------------------------------------------------------------- icosphere

_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
], dtype=np.float64)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def icosphere(level: int) -> TriangleMesh:
    """Unit-radius icosphere: level 0 is the icosahedron, each level splits faces 1->4."""
    if level < 0:
        raise ValueError(f"icosphere level must be >= 0, got {level}")
    if level > MAX_ICOSPHERE_LEVEL:
        raise ValueError(f"icosphere level {level} exceeds limit {MAX_ICOSPHERE_LEVEL}")
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = _ICO_FACES
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = np.empty((len(faces) * 4, 3), dtype=np.int64)
        for n, (a, b, c) in enumerate(faces):
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new[4 * n : 4 * n + 4] = [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TriangleMesh(np.array(verts), faces)


def deform(base: TriangleMesh, displacements) -> TriangleMesh:
    d = np.asarray(displacements, dtype=np.float64)
    if d.shape != base.vertices.shape:
        raise MeshError(
            f"deform: {d.shape[0] if d.ndim else 0} displacements for {base.num_vertices} vertices"
        )
    return TriangleMesh(base.vertices + d, base.faces.copy())


def face_normals(vertices: np.ndarray, faces: np.ndarray, normalize: bool = True) -> np.ndarray:
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    n = np.cross(v1 - v0, v2 - v0)
    if normalize:
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return n


def check_closed_manifold(mesh: TriangleMesh) -> None:
    """Raise MeshError unless every edge is shared by exactly two faces with opposite orientation."""
    directed = _directed_edges(mesh.faces)
    und = np.sort(directed, axis=1)
    uniq, counts = np.unique(und, axis=0, return_counts=True)
    bad = np.nonzero(counts != 2)[0]
    if len(bad):
        i, j = uniq[bad[0]]
        raise MeshError(f"non-manifold edge ({i}, {j}) shared by {counts[bad[0]]} faces")
    d_uniq, d_counts = np.unique(directed, axis=0, return_counts=True)
    if np.any(d_counts != 1):
        i, j = d_uniq[np.argmax(d_counts != 1)]
        raise MeshError(f"inconsistently oriented faces at edge ({i}, {j})")


def edge_face_adjacency(faces: np.ndarray, allow_boundary: bool = False):
    """For each interior edge (i, j): faces on both sides and their opposite vertices.

    Returns arrays ``edge (E,2)``, ``f1, f2 (E,)`` and ``o1, o2 (E,)`` where
    face ``f1`` contains the directed edge i->j, ``f2`` contains j->i, and
    ``o1``/``o2`` are the vertices opposite the edge. Boundary edges raise
    MeshError unless ``allow_boundary``, in which case they are skipped.
    """
    faces = np.asarray(faces, dtype=np.int64)
    nf = len(faces)
    directed = _directed_edges(faces)
    face_of = np.tile(np.arange(nf), 3)
    opp = np.concatenate([faces[:, 2], faces[:, 0], faces[:, 1]])
    lookup = {(int(a), int(b)): k for k, (a, b) in enumerate(directed)}
    if len(lookup) != len(directed):
        raise MeshError("duplicate directed edge: faces are not consistently oriented")
    e1, e2 = [], []
    for k, (a, b) in enumerate(directed):
        if a < b:
            other = lookup.get((int(b), int(a)))
            if other is None:
                if allow_boundary:
                    continue
                raise MeshError(f"non-manifold edge ({a}, {b}) has a single face")
            e1.append(k)
            e2.append(other)
    e1, e2 = np.array(e1, dtype=np.int64), np.array(e2, dtype=np.int64)
    if 2 * len(e1) != len(directed) and not allow_boundary:
        raise MeshError("mesh has boundary edges")
    return directed[e1], face_of[e1], face_of[e2], opp[e1], opp[e2]


def dihedral_angles(mesh: TriangleMesh) -> np.ndarray:
    """Angle between adjacent faces measured through the solid, one per edge.

    Convex edges give angles below pi, flat edges exactly pi, reflex edges above pi.
    """
    check_closed_manifold(mesh)
    edge, f1, f2, _, _ = edge_face_adjacency(mesh.faces)
    v = mesh.vertices
    n = face_normals(v, mesh.faces)
    e = v[edge[:, 1]] - v[edge[:, 0]]
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    n1, n2 = n[f1], n[f2]
    # signed rotation from n1 to n2 about the edge direction; positive when convex
    bend = np.arctan2(np.einsum("ij,ij->i", np.cross(n1, n2), e), np.einsum("ij,ij->i", n1, n2))
    return math.pi - bend


def smoothness_cosines(vertices: Tensor, faces: np.ndarray, adjacency=None) -> Tensor:
    """Differentiable cos(theta) of every dihedral angle of a closed mesh.

    For the angle measured through the solid, cos(theta) = -n1 . n2 with unit
    outward normals, independent of convexity.
    """
    if adjacency is None:
        adjacency = edge_face_adjacency(faces)
    _, f1, f2, _, _ = adjacency
    v0 = ag.take(vertices, faces[:, 0])
    v1 = ag.take(vertices, faces[:, 1])
    v2 = ag.take(vertices, faces[:, 2])
    n = ag.cross(v1 - v0, v2 - v0)
    n = n / ag.sqrt((n * n).sum(axis=-1, keepdims=True))
    n1, n2 = ag.take(n, f1), ag.take(n, f2)
    return -(n1 * n2).sum(axis=-1)


# ---------------------------------------------------------------- rotations


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalize(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize the zero quaternion")
        return Quaternion(*(self.as_array() / n))

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        a = np.asarray(axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), *(a * s))


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (possibly unnormalized) quaternion (w, x, y, z)."""
    if isinstance(q, Quaternion):
        q = q.as_array()
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion has no rotation")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_matrix_tensor(q: Tensor) -> Tensor:
    """Batched differentiable version: (N, 4) unit quaternions -> (N, 3, 3)."""
    w, x, y, z = (q[:, i] for i in range(4))
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return ag.stack(rows, axis=1).reshape(-1, 3, 3)


@dataclass
class RigidTransform:
    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = self.rotation.normalize()
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.matrix().T + self.translation


def apply_transform(mesh: TriangleMesh, t: RigidTransform) -> TriangleMesh:
    return TriangleMesh(t.apply_points(mesh.vertices), mesh.faces.copy())


# ---------------------------------------------------------------- camera


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Look-at pinhole camera on a sphere around the origin.

    ``focal`` is normalized: a camera-frame slope of 1 maps to ``focal * W/2``
    pixels. Pixels are square.
    """

    azimuth: float
    elevation: float
    distance: float
    focal: float
    width: int = 64
    height: int = 64
    z_near: float = 0.1

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError(f"camera distance must be > 0, got {self.distance}")
        if self.focal <= 0:
            raise ValueError(f"camera focal must be > 0, got {self.focal}")
        if abs(math.cos(self.elevation)) < 1e-9:
            raise ValueError("elevation of +-90 degrees leaves the up vector undefined")

    @property
    def position(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.distance * np.array([
            ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)
        ])

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera's right, down and forward axes."""
        fwd = -self.position / self.distance
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    @property
    def focal_px(self) -> float:
        return self.focal * self.width / 2.0

    @property
    def view_dir(self) -> np.ndarray:
        return -self.position / self.distance

    def with_azimuth(self, azimuth: float) -> "Camera":
        return Camera(azimuth, self.elevation, self.distance, self.focal,
                      self.width, self.height, self.z_near)

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def project(self, points) -> np.ndarray:
        """World points (..., 3) -> (..., 3) array of (u, v, depth) in pixels."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        if np.any(z <= self.z_near):
            raise ProjectionError("point at or behind the near plane")
        fp = self.focal_px
        u = self.width / 2.0 + fp * pc[..., 0] / z
        v = self.height / 2.0 + fp * pc[..., 1] / z
        return np.stack([u, v, z], axis=-1)

    def unproject(self, u, v, depth) -> np.ndarray:
        depth = np.asarray(depth, dtype=np.float64)
        if np.any(depth <= 0):
            raise ProjectionError("unproject needs positive depth")
        fp = self.focal_px
        xc = (np.asarray(u) - self.width / 2.0) / fp * depth
        yc = (np.asarray(v) - self.height / 2.0) / fp * depth
        pc = np.stack([xc, yc, depth], axis=-1)
        return pc @ self.rotation + self.position

    def unproject_tensor(self, u: Tensor, v: Tensor, depth: Tensor) -> Tensor:
        """Differentiable unproject for batched (N,) pixel coordinates and depths -> (N, 3)."""
        fp = self.focal_px
        xc = (u - self.width / 2.0) * depth * (1.0 / fp)
        yc = (v - self.height / 2.0) * depth * (1.0 / fp)
        pc = ag.stack([xc, yc, depth], axis=-1)
        return pc @ self.rotation + self.position


def default_focal(distance: float, object_radius: float = 1.0, fill: float = 0.7) -> float:
    """Focal length at which a ball of ``object_radius`` at ``distance`` spans ``fill`` of the frame."""
    return fill * distance / object_radius


# ---------------------------------------------------------------- OBJ


def write_obj(path, meshes: Sequence[TriangleMesh], names: Iterable[str] | None = None) -> None:
    """ASCII OBJ with one ``o`` object per mesh and 1-based, file-global indices."""
    names = list(names) if names is not None else [f"part_{i}" for i in range(len(meshes))]
    lines = []
    offset = 1
    for name, mesh in zip(names, meshes):
        lines.append(f"o {name}")
        lines.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices)
        lines.extend(f"f {a + offset} {b + offset} {c + offset}" for a, b, c in mesh.faces)
        offset += mesh.num_vertices
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> dict[str, TriangleMesh]:
    """Read objects written by :func:`write_obj` (triangles only)."""
    objects: dict[str, tuple[list, list]] = {}
    all_verts: list[list[float]] = []
    current = None
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "o":
            current = parts[1]
            objects[current] = ([], [])
        elif parts[0] == "v":
            all_verts.append([float(p) for p in parts[1:4]])
            if current is None:
                current = "default"
                objects[current] = ([], [])
            objects[current][0].append(len(all_verts) - 1)
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise MeshError(f"{path}: only triangles are supported")
            objects[current][1].append(idx)
    verts = np.array(all_verts, dtype=np.float64).reshape(-1, 3)
    out = {}
    for name, (vids, faces) in objects.items():
        base = vids[0] if vids else 0
        out[name] = TriangleMesh(verts[vids], np.array(faces, dtype=np.int64) - base)
    return out
