"""Icosahedral meshes on the unit sphere and the geometric queries used by the graph builder.

Node 0 is the north pole and node 11 the south pole of the base icosahedron; the
ten remaining base vertices sit at latitudes +/-atan(1/2) in 36 degree steps.
Refinement appends edge midpoints (projected to the sphere) after the parent
nodes, so every level's node list is a prefix of the next one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio

OMSH_MAGIC = b"OMSH"
OMSH_VERSION = 1

# Signed-volume slack for points that land on a triangle side or vertex.
CONTAINMENT_TOL = 1e-14


@dataclass(frozen=True)
class TriMesh:
    level: int
    nodes: np.ndarray  # (n_nodes, 3) float64, unit norm
    triangles: np.ndarray  # (n_tri, 3) int64, counter-clockwise seen from outside
    edges: np.ndarray = field(repr=False)  # (n_directed, 2) int64 (sender, receiver)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_undirected_edges(self) -> int:
        return len(self.edges) // 2


def expected_counts(level: int) -> tuple[int, int, int]:
    """(nodes, triangles, undirected edges) of a refined icosahedron."""
    return 10 * 4**level + 2, 20 * 4**level, 30 * 4**level


def _directed_edges(triangles: np.ndarray) -> np.ndarray:
    sides = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    both = np.concatenate([sides, sides[:, ::-1]])
    return np.unique(both, axis=0)


def _make_mesh(level: int, nodes: np.ndarray, triangles: np.ndarray) -> TriMesh:
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    nodes.setflags(write=False)
    triangles.setflags(write=False)
    edges = _directed_edges(triangles)
    edges.setflags(write=False)
    return TriMesh(level=level, nodes=nodes, triangles=triangles, edges=edges)


def latlon_to_xyz(lat_deg, lon_deg) -> np.ndarray:
    lat = np.deg2rad(np.asarray(lat_deg, dtype=np.float64))
    lon = np.deg2rad(np.asarray(lon_deg, dtype=np.float64))
    return np.stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1
    )


def xyz_to_latlon(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    lat = np.rad2deg(np.arctan2(p[..., 2], np.hypot(p[..., 0], p[..., 1])))
    lon = np.rad2deg(np.arctan2(p[..., 1], p[..., 0])) % 360.0
    return lat, lon


def base_icosahedron() -> TriMesh:
    ring_lat = np.rad2deg(np.arctan(0.5))
    lat = [90.0] + [ring_lat] * 5 + [-ring_lat] * 5 + [-90.0]
    lon = [0.0] + [72.0 * i for i in range(5)] + [36.0 + 72.0 * i for i in range(5)] + [0.0]
    nodes = latlon_to_xyz(lat, lon)
    # exact poles, no trig residue in x/y
    nodes[0] = (0.0, 0.0, 1.0)
    nodes[11] = (0.0, 0.0, -1.0)

    tris = []
    for i in range(5):
        u0, u1 = 1 + i, 1 + (i + 1) % 5
        l0, l1 = 6 + i, 6 + (i + 1) % 5
        tris += [(0, u0, u1), (u0, l0, u1), (u1, l0, l1), (11, l1, l0)]
    tris = np.array(tris, dtype=np.int64)
    a, b, c = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    flip = np.einsum("ij,ij->i", a, np.cross(b, c)) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return _make_mesh(0, nodes, tris)


def refine(mesh: TriMesh) -> TriMesh:
    """Split every triangle into four through its projected edge midpoints."""
    nodes = list(mesh.nodes)
    midpoint: dict[tuple[int, int], int] = {}

    def mid(i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        k = midpoint.get(key)
        if k is None:
            m = mesh.nodes[i] + mesh.nodes[j]
            nodes.append(m / np.linalg.norm(m))
            k = midpoint[key] = len(nodes) - 1
        return k

    children = np.empty((4 * mesh.n_triangles, 3), dtype=np.int64)
    for t, (a, b, c) in enumerate(mesh.triangles.tolist()):
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        children[4 * t : 4 * t + 4] = ((a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca))
    return _make_mesh(mesh.level + 1, np.array(nodes), children)


def icosphere(level: int) -> TriMesh:
    if level < 0:
        raise ValueError("refinement level must be >= 0")
    mesh = base_icosahedron()
    for _ in range(level):
        mesh = refine(mesh)
    return mesh


def build_hierarchy(finest_level: int) -> tuple[TriMesh, TriMesh]:
    """Return the (coarse, fine) meshes at levels finest_level-1 and finest_level."""
    if finest_level < 1:
        raise ValueError("finest_level must be >= 1: two mesh levels are required")
    coarse = icosphere(finest_level - 1)
    return coarse, refine(coarse)


def geodesic_distance(a, b) -> np.ndarray:
    """Great-circle angle between unit vectors, via atan2(|a x b|, a . b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def spherical_triangle_areas(mesh: TriMesh) -> np.ndarray:
    a = mesh.nodes[mesh.triangles[:, 0]]
    b = mesh.nodes[mesh.triangles[:, 1]]
    c = mesh.nodes[mesh.triangles[:, 2]]
    num = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    den = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(num, den)


def edge_lengths(mesh: TriMesh) -> np.ndarray:
    return geodesic_distance(mesh.nodes[mesh.edges[:, 0]], mesh.nodes[mesh.edges[:, 1]])


def _side_volumes(mesh: TriMesh, p: np.ndarray) -> np.ndarray:
    """Signed volumes det(v_i, v_j, p) for the three directed sides; shape (n_p, n_tri, 3)."""
    tri = mesh.nodes[mesh.triangles]  # (T, 3, 3)
    normals = np.stack(
        [
            np.cross(tri[:, 0], tri[:, 1]),
            np.cross(tri[:, 1], tri[:, 2]),
            np.cross(tri[:, 2], tri[:, 0]),
        ],
        axis=1,
    )  # (T, 3, 3)
    return np.einsum("tsk,pk->pts", normals, p)


def containing_triangles(mesh: TriMesh, points: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Index of the spherical triangle containing each point.

    A triangle qualifies when the point has non-negative signed volume (up to
    ``CONTAINMENT_TOL``) with each of its directed sides; ties go to the lowest
    triangle index.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        worst = _side_volumes(mesh, p).min(axis=2)  # (n_p, T)
        inside = worst >= -CONTAINMENT_TOL
        found = inside.any(axis=1)
        idx = np.argmax(inside, axis=1)
        # rounding gaps along sides: take the least-violating triangle
        idx[~found] = np.argmax(worst[~found], axis=1)
        out[start : start + chunk] = idx
    return out


def containing_triangle(mesh: TriMesh, p) -> int:
    return int(containing_triangles(mesh, np.asarray(p, dtype=np.float64)[None, :])[0])


def _to_pole_rotations(receivers: np.ndarray) -> np.ndarray:
    """Rotations taking each receiver to the north pole.

    The receiver is first turned about the z-axis onto the prime meridian and
    then tilted along that meridian, so the resulting frame keeps east/north
    orientation and depends on longitude only through differences.
    """
    lat, lon = xyz_to_latlon(receivers)
    lon = np.deg2rad(lon)
    tilt = np.deg2rad(lat) - np.pi / 2.0
    cz, sz = np.cos(-lon), np.sin(-lon)
    cy, sy = np.cos(tilt), np.sin(tilt)
    n = len(receivers)
    rz = np.zeros((n, 3, 3))
    rz[:, 0, 0], rz[:, 0, 1], rz[:, 1, 0], rz[:, 1, 1], rz[:, 2, 2] = cz, -sz, sz, cz, 1.0
    ry = np.zeros((n, 3, 3))
    ry[:, 0, 0], ry[:, 0, 2], ry[:, 1, 1], ry[:, 2, 0], ry[:, 2, 2] = cy, sy, 1.0, -sy, cy
    return ry @ rz


def local_edge_features(senders: np.ndarray, receivers: np.ndarray) -> np.ndarray:
    """[geodesic length, dx, dy, dz] per edge, the sender seen from the receiver's pole frame.

    Accepts single vectors or (n, 3) stacks.
    """
    s = np.asarray(senders, dtype=np.float64)
    r = np.asarray(receivers, dtype=np.float64)
    single = s.ndim == 1
    s, r = np.atleast_2d(s), np.atleast_2d(r)
    rot = _to_pole_rotations(r)
    rel = np.einsum("nij,nj->ni", rot, s)
    feats = np.concatenate([geodesic_distance(s, r)[:, None], rel], axis=1)
    return feats[0] if single else feats


def save_mesh(mesh: TriMesh, path) -> None:
    with open(path, "wb") as f:
        _binio.write_magic(f, OMSH_MAGIC, OMSH_VERSION)
        f.write(np.array([mesh.level], "<u2").tobytes())
        f.write(np.array([mesh.n_nodes, mesh.n_triangles], "<u8").tobytes())
        _binio.write_array(f, mesh.nodes, "<f8")
        _binio.write_array(f, mesh.triangles, "<u4")


def load_mesh(path) -> TriMesh:
    with open(Path(path), "rb") as f:
        _binio.read_magic(f, OMSH_MAGIC, (OMSH_VERSION,))
        (level,) = _binio.read(f, "<H")
        n_nodes, n_tri = _binio.read(f, "<QQ")
        nodes = _binio.read_array(f, "<f8", 3 * n_nodes).reshape(n_nodes, 3)
        tris = _binio.read_array(f, "<u4", 3 * n_tri).reshape(n_tri, 3)
    return _make_mesh(level, nodes.astype(np.float64), tris.astype(np.int64))
