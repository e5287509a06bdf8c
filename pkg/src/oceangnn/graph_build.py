"""Heterogeneous grid/mesh graph with land pruning.

Grid nodes are ocean cells only, indexed by their position in the grid's
row-major ocean enumeration. Each mesh keeps its full node list (indices match
the TriMesh) but mesh nodes with no link to an ocean cell end up without edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import _binio
from .ocean_grid import OceanGrid
from .sphere_mesh import (
    TriMesh,
    containing_triangles,
    edge_lengths,
    geodesic_distance,
    latlon_to_xyz,
    local_edge_features,
    xyz_to_latlon,
)

OGRF_MAGIC = b"OGRF"
OGRF_VERSION = 1

MESHES = ("coarse", "fine")


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EdgeSet:
    senders: np.ndarray  # int64
    receivers: np.ndarray  # int64
    features: np.ndarray  # (n_edges, 4) float32
    n_senders: int
    n_receivers: int

    def __len__(self) -> int:
        return len(self.senders)

    def pairs(self) -> np.ndarray:
        return np.stack([self.senders, self.receivers], axis=1)


@dataclass(frozen=True, eq=False)
class OceanGraph:
    grid_shape: tuple[int, int]
    grid_cells: np.ndarray  # flat cell index of each grid node
    mesh_features: dict[str, np.ndarray]  # per mesh, (n_nodes, 3) float32
    edges: dict[str, EdgeSet]  # g2m_<mesh>, m2m_<mesh>, m2g_<mesh>
    levels: tuple[int, int]
    radius_factor: float
    grid_links: str = "both"
    meta: dict = field(default_factory=dict)

    @property
    def n_grid(self) -> int:
        return len(self.grid_cells)

    def n_mesh(self, mesh: str) -> int:
        return len(self.mesh_features[mesh])

    def grid_xyz(self) -> np.ndarray:
        n_lat, n_lon = self.grid_shape
        i, j = np.divmod(self.grid_cells, n_lon)
        lat = -90.0 + (i + 0.5) * 180.0 / n_lat
        lon = j * 360.0 / n_lon
        return latlon_to_xyz(lat, lon)

    def counts(self) -> dict[str, int]:
        out = {"grid": self.n_grid}
        for m in MESHES:
            out[f"mesh_{m}"] = self.n_mesh(m)
        for name, es in self.edges.items():
            out[name] = len(es)
        return out


def _sorted_by_receiver(senders: np.ndarray, receivers: np.ndarray):
    order = np.lexsort((senders, receivers))
    return senders[order], receivers[order]


def g2m_radius(fine: TriMesh, radius_factor: float) -> float:
    return radius_factor * float(edge_lengths(fine).max())


NEAREST_TIE_TOL = 1e-12  # radians


def nearest_node(mesh: TriMesh, p: np.ndarray) -> int:
    """Closest mesh node by geodesic distance; near-ties go to the lowest index."""
    d = geodesic_distance(p, mesh.nodes)
    return int(np.flatnonzero(d <= d.min() + NEAREST_TIE_TOL)[0])


def grid_to_mesh_edges(grid: OceanGrid, mesh: TriMesh, radius_factor: float = 0.6, reference: TriMesh | None = None) -> np.ndarray:
    """(grid row, mesh node) pairs within the connection radius.

    The radius is ``radius_factor`` times the longest edge of ``reference``
    (the fine mesh; defaults to ``mesh`` itself). Grid nodes that catch no mesh
    node are linked to their nearest one (see ``nearest_node``).
    """
    if radius_factor <= 0:
        raise ValueError("radius_factor must be positive")
    radius = g2m_radius(reference if reference is not None else mesh, radius_factor)
    pts = grid.ocean_xyz()
    tree = cKDTree(mesh.nodes)
    chord = 2.0 * np.sin(min(radius, np.pi) / 2.0)
    hits = tree.query_ball_point(pts, chord * (1 + 1e-9) + 1e-12)
    senders, receivers = [], []
    for g, cand in enumerate(hits):
        cand = np.asarray(sorted(cand), dtype=np.int64)
        if len(cand):
            cand = cand[geodesic_distance(pts[g], mesh.nodes[cand]) <= radius]
        if not len(cand):
            cand = np.array([nearest_node(mesh, pts[g])], dtype=np.int64)
        senders.append(np.full(len(cand), g, dtype=np.int64))
        receivers.append(cand)
    s, r = np.concatenate(senders), np.concatenate(receivers)
    return np.stack(_sorted_by_receiver(s, r), axis=1)


def mesh_to_grid_edges(grid: OceanGrid, mesh: TriMesh) -> np.ndarray:
    """(mesh node, grid row) pairs from the vertices of each cell's containing triangle."""
    tri = containing_triangles(mesh, grid.ocean_xyz())
    senders = mesh.triangles[tri].ravel()
    receivers = np.repeat(np.arange(grid.n_ocean, dtype=np.int64), 3)
    return np.stack(_sorted_by_receiver(senders, receivers), axis=1)


def ocean_connected_nodes(n_nodes: int, g2m: np.ndarray, m2g: np.ndarray) -> np.ndarray:
    connected = np.zeros(n_nodes, dtype=bool)
    if len(g2m):
        connected[g2m[:, 1]] = True
    if len(m2g):
        connected[m2g[:, 0]] = True
    return connected


def prune_mesh_edges(mesh: TriMesh, ocean_connected: np.ndarray) -> np.ndarray:
    """Mesh edges whose sender and receiver are both ocean-connected."""
    keep = ocean_connected[mesh.edges[:, 0]] & ocean_connected[mesh.edges[:, 1]]
    e = mesh.edges[keep]
    return np.stack(_sorted_by_receiver(e[:, 0], e[:, 1]), axis=1)


def mesh_node_features(nodes: np.ndarray) -> np.ndarray:
    lat, lon = xyz_to_latlon(nodes)
    lat, lon = np.deg2rad(lat), np.deg2rad(lon)
    return np.stack([np.cos(lat), np.sin(lon), np.cos(lon)], axis=1)


def _edge_set(pairs: np.ndarray, s_xyz: np.ndarray, r_xyz: np.ndarray) -> EdgeSet:
    pairs = pairs.reshape(-1, 2).astype(np.int64)
    s, r = pairs[:, 0], pairs[:, 1]
    if len(pairs):
        feats = local_edge_features(s_xyz[s], r_xyz[r]).astype(np.float32)
    else:
        feats = np.zeros((0, 4), np.float32)
    return EdgeSet(s, r, feats, len(s_xyz), len(r_xyz))


def build_ocean_graph(
    grid: OceanGrid,
    coarse: TriMesh,
    fine: TriMesh,
    radius_factor: float = 0.6,
    grid_links: str = "both",
) -> OceanGraph:
    """Assemble node and edge sets for the two-mesh ocean graph.

    ``grid_links="both"`` routes grid data to and from both meshes; ``"fine"``
    links the grid to the fine mesh only, which leaves the coarse mesh pruned away.
    """
    if grid_links not in ("both", "fine"):
        raise ValueError("grid_links must be 'both' or 'fine'")
    if not grid.mask.any():
        raise GraphError("grid has no ocean cells")
    grid_xyz = grid.ocean_xyz()
    edges: dict[str, EdgeSet] = {}
    feats = {}
    for name, mesh in (("coarse", coarse), ("fine", fine)):
        if name == "coarse" and grid_links == "fine":
            g2m = m2g = np.zeros((0, 2), np.int64)
        else:
            g2m = grid_to_mesh_edges(grid, mesh, radius_factor, reference=fine)
            m2g = mesh_to_grid_edges(grid, mesh)
        m2m = prune_mesh_edges(mesh, ocean_connected_nodes(mesh.n_nodes, g2m, m2g))
        edges[f"g2m_{name}"] = _edge_set(g2m, grid_xyz, mesh.nodes)
        edges[f"m2m_{name}"] = _edge_set(m2m, mesh.nodes, mesh.nodes)
        edges[f"m2g_{name}"] = _edge_set(m2g, mesh.nodes, grid_xyz)
        feats[name] = mesh_node_features(mesh.nodes).astype(np.float32)

    fan_in = np.bincount(edges["m2g_fine"].receivers, minlength=grid.n_ocean)
    if (fan_in < 3).any():
        raise GraphError(f"{int((fan_in < 3).sum())} ocean cells lack mesh-to-grid coverage")
    return OceanGraph(
        grid_shape=grid.shape,
        grid_cells=grid.ocean_index.astype(np.int64),
        mesh_features=feats,
        edges=edges,
        levels=(coarse.level, fine.level),
        radius_factor=float(radius_factor),
        grid_links=grid_links,
    )


# ----------------------------------------------------------------------------
# OGRF files

_EDGE_ORDER = tuple(f"{k}_{m}" for m in MESHES for k in ("g2m", "m2m", "m2g"))


def save_graph(graph: OceanGraph, path) -> None:
    with open(path, "wb") as f:
        _binio.write_magic(f, OGRF_MAGIC, OGRF_VERSION)
        n_lat, n_lon = graph.grid_shape
        f.write(np.array([n_lat, n_lon, graph.n_grid, graph.n_mesh("coarse"), graph.n_mesh("fine")], "<u4").tobytes())
        f.write(np.array(graph.levels, "<u2").tobytes())
        f.write(np.array([graph.radius_factor], "<f8").tobytes())
        _binio.write_str(f, graph.grid_links)
        _binio.write_array(f, graph.grid_cells, "<u4")
        for m in MESHES:
            _binio.write_array(f, graph.mesh_features[m], "<f4")
        f.write(np.array([len(_EDGE_ORDER)], "<u4").tobytes())
        for name in _EDGE_ORDER:
            es = graph.edges[name]
            _binio.write_str(f, name)
            f.write(np.array([len(es), es.n_senders, es.n_receivers], "<u4").tobytes())
            _binio.write_array(f, es.senders, "<u4")
            _binio.write_array(f, es.receivers, "<u4")
            _binio.write_array(f, es.features, "<f4")


def load_graph(path) -> OceanGraph:
    with open(Path(path), "rb") as f:
        _binio.read_magic(f, OGRF_MAGIC, (OGRF_VERSION,))
        n_lat, n_lon, n_grid, n_coarse, n_fine = _binio.read(f, "<5I")
        levels = _binio.read(f, "<HH")
        (radius_factor,) = _binio.read(f, "<d")
        grid_links = _binio.read_str(f)
        cells = _binio.read_array(f, "<u4", n_grid).astype(np.int64)
        feats = {
            "coarse": _binio.read_array(f, "<f4", 3 * n_coarse).reshape(n_coarse, 3),
            "fine": _binio.read_array(f, "<f4", 3 * n_fine).reshape(n_fine, 3),
        }
        (n_sets,) = _binio.read(f, "<I")
        edges = {}
        for _ in range(n_sets):
            name = _binio.read_str(f)
            n, n_s, n_r = _binio.read(f, "<3I")
            s = _binio.read_array(f, "<u4", n).astype(np.int64)
            r = _binio.read_array(f, "<u4", n).astype(np.int64)
            x = _binio.read_array(f, "<f4", 4 * n).reshape(n, 4)
            edges[name] = EdgeSet(s, r, x, n_s, n_r)
    return OceanGraph((n_lat, n_lon), cells, feats, edges, tuple(levels), radius_factor, grid_links)
