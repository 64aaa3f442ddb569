"""Mesh extraction from the opacity field.

The Gaussian map is turned into a tetrahedral grid (box corners and centers,
Delaunay), cells bridging unrelated Gaussians are filtered out, the grid
vertices are evaluated against the keyframe views and the opacity level set
is traced with marching tetrahedra. Vertices are then pulled onto the true
level set by bisection along the edge that generated them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from scipy.spatial import Delaunay, QhullError, cKDTree

from fgo_slam.errors import TetrahedralizationError
from fgo_slam.geometry import Array, GaussianPrimitive
from fgo_slam.models import ExtractionConfig
from fgo_slam.opacity_field import BOX_SIGMA, GaussianTensors, View, batched_point_opacity
from fgo_slam.renderer import GaussianMap, as_tensors

CENTER_CORNER = 8
DEDUP_TOLERANCE = 1e-9
JITTER_FRACTION = 1e-9
MIN_TET_VOLUME = 1e-15
MIN_TRIANGLE_AREA = 1e-12

TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

MapLike = Union[GaussianMap, Sequence[GaussianPrimitive]]
EdgeFilter = Literal["extent", "raw"]


def _build_case_table() -> Tuple[Tuple[Tuple[Tuple[int, int], ...], ...], ...]:
    """Triangles per inside/outside case, as triples of local tetrahedron edges.

    Bit ``v`` of the case index is set when local vertex ``v`` is at or above
    the level. Winding is fixed later from the field gradient.
    """
    table = []
    for case in range(16):
        inside = [v for v in range(4) if case >> v & 1]
        outside = [v for v in range(4) if not case >> v & 1]
        if len(inside) in (0, 4):
            table.append(())
        elif len(inside) == 1:
            v = inside[0]
            table.append((tuple((v, o) for o in outside),))
        elif len(inside) == 3:
            v = outside[0]
            table.append((tuple((i, v) for i in inside),))
        else:
            a, b = inside
            c, d = outside
            # crossing points in cyclic order around the quad
            table.append((((a, c), (a, d), (b, d)), ((a, c), (b, d), (b, c))))
    return tuple(table)


CASE_TABLE = _build_case_table()


@dataclass
class TetGrid:
    """Tetrahedral grid over the Gaussians' box corners and centers."""

    vertices: Array  # (V, 3)
    gaussian_ids: NDArray[np.int64]  # (V,) Gaussian each vertex came from
    corners: NDArray[np.int64]  # (V,) box corner 0-7, or 8 for the center
    tetrahedra: NDArray[np.int64]  # (T, 4)
    opacity: Optional[Array] = None  # (V,)

    @property
    def num_vertices(self) -> int:
        return int(len(self.vertices))

    @property
    def num_tetrahedra(self) -> int:
        return int(len(self.tetrahedra))

    def volumes(self) -> Array:
        return _tet_volumes(self.vertices, self.tetrahedra)


@dataclass
class TriangleMesh:
    """Triangle mesh with an optional record of each vertex's generating edge."""

    vertices: Array  # (V, 3)
    triangles: NDArray[np.int64]  # (F, 3)
    normals: Optional[Array] = None  # (V, 3)
    # (V, 2, 3) endpoints of the generating edge, the one at or above the level first
    brackets: Optional[Array] = None
    flagged: Optional[NDArray[np.bool_]] = None  # vertices whose bracket no longer straddles the level

    @classmethod
    def empty(cls) -> TriangleMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), None, np.zeros((0, 2, 3)),
                   np.zeros(0, dtype=bool))

    @property
    def num_vertices(self) -> int:
        return int(len(self.vertices))

    @property
    def num_triangles(self) -> int:
        return int(len(self.triangles))

    def is_empty(self) -> bool:
        return self.num_triangles == 0

    def triangle_areas(self) -> Array:
        if self.is_empty():
            return np.zeros(0)
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def _tet_volumes(vertices: Array, tets: NDArray[np.int64]) -> Array:
    if len(tets) == 0:
        return np.zeros(0)
    p = vertices[tets]
    return np.abs(np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]))) / 6.0


def _primitives(gaussians: MapLike) -> List[GaussianPrimitive]:
    return gaussians.to_primitives() if isinstance(gaussians, GaussianMap) else list(gaussians)


def _box_points(gaussians: Sequence[GaussianPrimitive]) -> Tuple[Array, NDArray[np.int64], NDArray[np.int64]]:
    points, ids, corners = [], [], []
    for gid, g in enumerate(gaussians):
        points.append(g.box_corners(BOX_SIGMA))
        points.append(g.mean[None, :])
        ids.append(np.full(9, gid, dtype=np.int64))
        corners.append(np.arange(9, dtype=np.int64))
    return np.concatenate(points), np.concatenate(ids), np.concatenate(corners)


def _deduplicate(points: Array, tolerance: float = DEDUP_TOLERANCE) -> NDArray[np.int64]:
    """Indices of the points kept after merging points closer than ``tolerance``.

    Each cluster of coincident points keeps its lowest index.
    """
    parent = np.arange(len(points))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return int(i)

    pairs = cKDTree(points).query_pairs(tolerance, output_type="ndarray")
    for i, j in pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else ():
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(points))], dtype=np.int64)
    return np.nonzero(roots == np.arange(len(points)))[0]


def _tetrahedralize(points: Array) -> NDArray[np.int64]:
    try:
        tri = Delaunay(points)
    except (QhullError, ValueError) as exc:
        raise TetrahedralizationError(f"Delaunay tetrahedralization failed: {exc}") from exc
    tets = np.asarray(tri.simplices, dtype=np.int64)
    tets = tets[_tet_volumes(points, tets) > MIN_TET_VOLUME]
    if len(tets) == 0:
        raise TetrahedralizationError(f"all {len(tri.simplices)} tetrahedra are degenerate")
    return tets


def build_tet_grid(gaussians: MapLike, jitter_retry: bool = True) -> TetGrid:
    """Delaunay grid over the 3-sigma box corners and centers of every Gaussian.

    Coincident points are merged. Globally degenerate input is jittered by
    ``1e-9 * extent`` and tetrahedralized once more before giving up.
    """
    prims = _primitives(gaussians)
    if not prims:
        raise ValueError("cannot build a tetrahedral grid from an empty map")
    points, ids, corners = _box_points(prims)
    keep = _deduplicate(points)
    points, ids, corners = points[keep], ids[keep], corners[keep]

    try:
        tets = _tetrahedralize(points)
    except TetrahedralizationError:
        if not jitter_retry:
            raise
        extent = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
        logger.warning(f"Tetrahedralization of {len(points)} points failed, retrying with jitter")
        rng = np.random.default_rng(0)
        jittered = points + rng.uniform(-1.0, 1.0, size=points.shape) * JITTER_FRACTION * max(extent, 1.0)
        tets = _tetrahedralize(jittered)
        points = jittered

    logger.debug(f"Tetrahedral grid: {len(points)} vertices, {len(tets)} tetrahedra from {len(prims)} Gaussians")
    return TetGrid(points, ids, corners, tets)


def filter_tets(grid: TetGrid, gaussians: MapLike, mode: EdgeFilter = "extent") -> TetGrid:
    """Drop tetrahedra with an edge longer than the two Gaussians' summed max scales.

    ``extent`` compares against 3-sigma extents, ``raw`` against the raw
    scales. Edges between vertices of the same Gaussian are never cut.
    """
    prims = _primitives(gaussians)
    max_scale = np.array([float(np.max(g.scale)) for g in prims])
    factor = BOX_SIGMA if mode == "extent" else 1.0
    tets = grid.tetrahedra
    keep = np.ones(len(tets), dtype=bool)
    for a, b in TET_EDGES:
        ia, ib = tets[:, a], tets[:, b]
        ga, gb = grid.gaussian_ids[ia], grid.gaussian_ids[ib]
        length = np.linalg.norm(grid.vertices[ia] - grid.vertices[ib], axis=1)
        limit = factor * (max_scale[ga] + max_scale[gb])
        keep &= ~((ga != gb) & (length > limit))
    logger.debug(f"Edge filter ({mode}) removed {int((~keep).sum())} of {len(tets)} tetrahedra")
    return replace(grid, tetrahedra=tets[keep])


def evaluate_vertex_opacity(
    grid: TetGrid, views: Sequence[View], gaussians: Union[MapLike, GaussianTensors]
) -> TetGrid:
    """Fill in the opacity of every grid vertex; vertices no view sees get 0."""
    if not views:
        raise ValueError("opacity evaluation needs at least one keyframe view")
    opacity, seen = batched_point_opacity(grid.vertices, views, as_tensors(gaussians))
    logger.debug(f"Vertex opacity: {int(seen.sum())}/{len(seen)} vertices seen by some view")
    return replace(grid, opacity=opacity)


def marching_tetrahedra(grid: TetGrid, tau: float) -> TriangleMesh:
    """Trace the ``tau`` level set through the grid.

    Crossing vertices are linear interpolations along grid edges and are
    shared between neighbouring cells. Triangles face toward lower opacity.
    """
    if grid.opacity is None:
        raise ValueError("grid vertex opacity has not been evaluated")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    opacity = grid.opacity
    tets = grid.tetrahedra
    if len(tets) == 0:
        return TriangleMesh.empty()

    above = opacity[tets] >= tau
    cases = (above * (1 << np.arange(4))).sum(axis=1)
    crossing = np.nonzero((cases != 0) & (cases != 15))[0]

    index: Dict[Tuple[int, int], int] = {}
    vertices: List[Array] = []
    brackets: List[Array] = []

    def edge_vertex(i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        found = index.get(key)
        if found is not None:
            return found
        lo, hi = key
        o_lo, o_hi = opacity[lo], opacity[hi]
        t = (tau - o_lo) / (o_hi - o_lo)
        vertices.append(grid.vertices[lo] + t * (grid.vertices[hi] - grid.vertices[lo]))
        inside, outside = (lo, hi) if o_lo >= tau else (hi, lo)
        brackets.append(np.stack([grid.vertices[inside], grid.vertices[outside]]))
        index[key] = len(vertices) - 1
        return index[key]

    triangles: List[Tuple[int, int, int]] = []
    for t_idx in crossing:
        tet = tets[t_idx]
        p = grid.vertices[tet]
        # gradient of the linear interpolant; the level set in this cell is normal to it
        gradient = np.linalg.solve(p[1:] - p[0], opacity[tet[1:]] - opacity[tet[0]])
        for tri in CASE_TABLE[cases[t_idx]]:
            ids = [edge_vertex(int(tet[a]), int(tet[b])) for a, b in tri]
            v0, v1, v2 = (vertices[k] for k in ids)
            normal = np.cross(v1 - v0, v2 - v0)
            if 0.5 * np.linalg.norm(normal) <= MIN_TRIANGLE_AREA:
                continue
            if normal @ gradient > 0:
                ids = [ids[0], ids[2], ids[1]]
            triangles.append((ids[0], ids[1], ids[2]))

    if not triangles:
        logger.info(f"Level set tau={tau} does not cross the grid, mesh is empty")
        return TriangleMesh.empty()
    mesh = _compact(
        np.array(vertices), np.array(triangles, dtype=np.int64), np.array(brackets),
        np.zeros(len(vertices), dtype=bool),
    )
    logger.debug(f"Marching tetrahedra: {len(crossing)} crossing cells, {mesh.num_triangles} triangles")
    return mesh


def _compact(
    vertices: Array, triangles: NDArray[np.int64], brackets: Optional[Array], flagged: Optional[NDArray[np.bool_]]
) -> TriangleMesh:
    """Drop unreferenced vertices and renumber the triangles."""
    used = np.unique(triangles)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(
        vertices[used],
        remap[triangles],
        None,
        brackets[used] if brackets is not None else None,
        flagged[used] if flagged is not None else None,
    )


def refine_level_set(
    mesh: TriangleMesh,
    gaussians: Union[MapLike, GaussianTensors],
    views: Sequence[View],
    tau: float,
    iterations: int = 8,
) -> TriangleMesh:
    """Move each vertex onto the true level set by bisection along its generating edge.

    The final position interpolates linearly inside the last bracket. A vertex
    whose edge endpoints no longer straddle ``tau`` keeps its position and is
    flagged.
    """
    if iterations <= 0 or mesh.is_empty():
        return mesh
    if mesh.brackets is None:
        raise ValueError("mesh carries no generating edges to refine along")
    g = as_tensors(gaussians)

    def opacity_at(points: Array) -> Array:
        return batched_point_opacity(points, views, g)[0]

    lo = mesh.brackets[:, 0].copy()
    hi = mesh.brackets[:, 1].copy()
    o_lo, o_hi = opacity_at(lo), opacity_at(hi)
    valid = (o_lo >= tau) & (o_hi < tau)
    if not np.all(valid):
        logger.warning(f"{int((~valid).sum())} mesh vertices lost their bracket, keeping linear estimates")

    idx = np.nonzero(valid)[0]
    for _ in range(iterations):
        if idx.size == 0:
            break
        mid = 0.5 * (lo[idx] + hi[idx])
        o_mid = opacity_at(mid)
        up = o_mid >= tau
        lo[idx[up]], o_lo[idx[up]] = mid[up], o_mid[up]
        hi[idx[~up]], o_hi[idx[~up]] = mid[~up], o_mid[~up]

    vertices = mesh.vertices.copy()
    if idx.size:
        span = o_lo[idx] - o_hi[idx]
        t = np.where(span > 0, (o_lo[idx] - tau) / np.where(span > 0, span, 1.0), 0.5)
        vertices[idx] = lo[idx] + t[:, None] * (hi[idx] - lo[idx])

    flagged = ~valid if mesh.flagged is None else (mesh.flagged | ~valid)
    refined = TriangleMesh(vertices, mesh.triangles, None, mesh.brackets, flagged)
    keep = refined.triangle_areas() > MIN_TRIANGLE_AREA
    if not np.all(keep):
        if not np.any(keep):
            return TriangleMesh.empty()
        refined = _compact(vertices, mesh.triangles[keep], mesh.brackets, flagged)
    logger.debug(f"Refined {idx.size} vertices with {iterations} bisection steps")
    return refined


def vertex_normals(mesh: TriangleMesh) -> Array:
    """Area-weighted unit vertex normals."""
    normals = np.zeros_like(mesh.vertices)
    if mesh.is_empty():
        return normals
    v = mesh.vertices[mesh.triangles]
    face = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    for k in range(3):
        np.add.at(normals, mesh.triangles[:, k], face)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.where(norm > 0, normals / np.where(norm > 0, norm, 1.0), 0.0)


def signed_volume(mesh: TriangleMesh) -> float:
    """Volume enclosed by an outward-facing closed mesh."""
    if mesh.is_empty():
        return 0.0
    v = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def extract_mesh(
    gaussians: MapLike, views: Sequence[View], config: Optional[ExtractionConfig] = None
) -> TriangleMesh:
    """Grid, filter, evaluate, march and refine in one go."""
    config = config or ExtractionConfig()
    prims = _primitives(gaussians)
    if not prims:
        logger.warning("Empty map, nothing to extract")
        return TriangleMesh.empty()
    grid = filter_tets(build_tet_grid(prims), prims, config.edge_filter)
    grid = evaluate_vertex_opacity(grid, views, prims)
    mesh = marching_tetrahedra(grid, config.tau)
    mesh = refine_level_set(mesh, prims, views, config.tau, config.iterations)
    mesh.normals = vertex_normals(mesh)
    logger.info(
        f"Extracted mesh at tau={config.tau}: {mesh.num_vertices} vertices, {mesh.num_triangles} triangles"
    )
    return mesh
