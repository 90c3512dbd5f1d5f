"""Constrained triangular meshes and point-to-basis projection.

The mesh interior is seeded with a regular triangular lattice (edge length
midway between ``min_edge`` and ``max_edge``) and the optional extension band
with a lattice twice as coarse.  Delaunay refinement (Shewchuk's Triangle,
Ruppert-style quality refinement) then repairs the transition zones and the
boundary strip so every triangle meets the minimum angle.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import shapely
import triangle
from shapely.geometry import Polygon

MAX_MIN_ANGLE = 34.0
FORMAT_HEADER = "# geodose mesh v1"
# lattice seeds closer than this (in edge lengths) to the boundary make
# quality refinement cascade through the whole lattice
BOUNDARY_GAP = 0.7


class MeshError(ValueError):
    """Raised for invalid domains, parameters, or mesh files."""


class OutsideMeshError(MeshError):
    """Raised when query points fall outside the mesh hull."""

    def __init__(self, message, outside):
        super().__init__(message)
        self.outside = outside


@dataclass(frozen=True)
class MeshQuality:
    min_edge: float
    max_edge: float
    min_angle: float


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable planar triangulation.

    Attributes
    ----------
    nodes : (n, 2) float array, planar coordinates in meters.
    triangles : (m, 3) int array, counter-clockwise node indices.
    boundary : (n,) bool array, True for nodes on the outer boundary.
    quality : MeshQuality used to build the mesh.
    domain : (k, 2) array with the core polygon (before extension), or None.
    extension : width of the coarse band around ``domain``.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    quality: MeshQuality
    domain: np.ndarray | None = None
    extension: float = 0.0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def area(self) -> float:
        return float(self.signed_areas.sum())

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted node pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1)

    @cached_property
    def angles(self) -> np.ndarray:
        """(m, 3) interior angles in degrees, angle k at vertex k."""
        p = self.nodes[self.triangles]
        out = np.empty((len(p), 3))
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
            dot = np.einsum("ij,ij->i", a, b)
            out[:, k] = np.degrees(np.arctan2(cross, dot))
        return out

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def locator(self) -> _TriangleLocator:
        return _TriangleLocator(self)

    def core_distance(self, points) -> np.ndarray:
        """Distance from points to the core domain (0 inside)."""
        if self.domain is None:
            return np.zeros(len(points))
        poly = Polygon(self.domain)
        pts = np.asarray(points, dtype=float)
        return shapely.distance(poly, shapely.points(pts[:, 0], pts[:, 1]))


def _validate_polygon(domain_polygon) -> Polygon:
    if isinstance(domain_polygon, Polygon):
        poly = domain_polygon
    else:
        coords = np.asarray(domain_polygon, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2 or len(coords) < 3:
            raise MeshError("domain polygon needs at least 3 (x, y) vertices")
        poly = Polygon(coords)
    if poly.area <= 0.0:
        raise MeshError("degenerate domain polygon (zero area)")
    if not poly.is_valid:
        raise MeshError("domain polygon is not simple")
    # orient counter-clockwise, drop holes
    return shapely.geometry.polygon.orient(Polygon(poly.exterior), 1.0)


def _subdivide_ring(coords: np.ndarray, spacing: float, lo: float, hi: float) -> np.ndarray:
    """Split every polygon edge into equal pieces close to ``spacing``."""
    out = []
    k = len(coords)
    for i in range(k):
        a, b = coords[i], coords[(i + 1) % k]
        length = float(np.hypot(*(b - a)))
        n = max(1, int(round(length / spacing)))
        if n > 1 and length / n < lo:
            n -= 1
        if length / n > hi:
            n += 1
        t = np.arange(n) / n
        out.append(a + t[:, None] * (b - a))
    return np.concatenate(out)


def _resample_ring(poly: Polygon, spacing: float) -> np.ndarray:
    ring = poly.exterior
    n = max(8, int(round(ring.length / spacing)))
    d = np.arange(n) * (ring.length / n)
    pts = shapely.line_interpolate_point(ring, d)
    return shapely.get_coordinates(pts)


def _lattice(bounds, origin, h: float, stride: int = 1) -> np.ndarray:
    """Triangular lattice with spacing ``h * stride`` anchored at ``origin``.

    Coarse lattices (stride 2) are exact subsets of the fine one.
    """
    x0, y0 = origin
    dy = h * np.sqrt(3.0) / 2.0
    xmin, ymin, xmax, ymax = bounds
    j0 = int(np.floor((ymin - y0) / dy)) - 1
    j1 = int(np.ceil((ymax - y0) / dy)) + 1
    rows = []
    for j in range(j0, j1 + 1):
        if j % stride:
            continue
        shift = ((j // stride) % 2) * 0.5 * h * stride
        i0 = int(np.floor((xmin - x0 - shift) / (h * stride))) - 1
        i1 = int(np.ceil((xmax - x0 - shift) / (h * stride))) + 1
        xs = x0 + shift + np.arange(i0, i1 + 1) * h * stride
        rows.append(np.column_stack([xs, np.full(len(xs), y0 + j * dy)]))
    return np.concatenate(rows)


def build_mesh(
    domain_polygon,
    min_edge: float,
    max_edge: float,
    min_angle: float = 31.0,
    extension: float = 0.0,
    coarsening: float = 2.0,
) -> TriMesh:
    """Triangulate a polygon, optionally dilated by a coarse extension band.

    Parameters
    ----------
    domain_polygon : shapely Polygon or (k, 2) vertex array
        Simple polygon in projected planar coordinates (meters).
    min_edge, max_edge : float
        Edge-length bounds for the core triangles.
    min_angle : float
        Minimum interior angle in degrees, strictly below 34.
    extension : float
        Width of the outward band; triangles there use ``coarsening`` times
        the core edge length.

    Returns
    -------
    TriMesh
    """
    if not (0 < min_edge <= max_edge):
        raise MeshError("need 0 < min_edge <= max_edge")
    if not (0 < min_angle < MAX_MIN_ANGLE):
        raise MeshError(f"min_angle must lie in (0, {MAX_MIN_ANGLE}) degrees")
    if extension < 0:
        raise MeshError("extension must be >= 0")
    if coarsening < 1:
        raise MeshError("coarsening must be >= 1")
    core = _validate_polygon(domain_polygon)

    h = 0.5 * (min_edge + max_edge)
    if extension > 0:
        coarse = h * coarsening
        outer = Polygon(core.buffer(extension, quad_segs=16).exterior)
        boundary_pts = _resample_ring(outer, coarse)
        gap = BOUNDARY_GAP * coarse
    else:
        coarse = h
        outer = core
        boundary_pts = _subdivide_ring(np.asarray(core.exterior.coords)[:-1], h, min_edge, max_edge)
        gap = BOUNDARY_GAP * h

    # the polygon actually meshed is the discretized boundary
    meshed = Polygon(boundary_pts)
    if not meshed.is_valid:
        raise MeshError("boundary discretization self-intersects; reduce edge lengths")

    origin = np.asarray(core.bounds[:2])
    fine = _lattice(outer.bounds, origin, h)
    fine_margin = h if extension > 0 else 0.0
    d_core = shapely.distance(core, shapely.points(fine[:, 0], fine[:, 1]))
    d_edge = shapely.distance(meshed.exterior, shapely.points(fine[:, 0], fine[:, 1]))
    inside = shapely.contains_xy(meshed, fine[:, 0], fine[:, 1])
    keep = inside & (d_core <= fine_margin) & (d_edge >= gap)
    seeds = [fine[keep]]
    if extension > 0 and coarsening > 1:
        stride = int(round(coarsening)) if float(coarsening).is_integer() else 0
        if stride >= 2:
            cl = _lattice(outer.bounds, origin, h, stride=stride)
        else:
            cl = _lattice(outer.bounds, origin, coarse)
        dc = shapely.distance(core, shapely.points(cl[:, 0], cl[:, 1]))
        de = shapely.distance(meshed.exterior, shapely.points(cl[:, 0], cl[:, 1]))
        ins = shapely.contains_xy(meshed, cl[:, 0], cl[:, 1])
        seeds.append(cl[ins & (dc > fine_margin + 0.5 * h) & (de >= gap)])
    interior = np.concatenate(seeds)
    order = np.lexsort((interior[:, 1], interior[:, 0]))
    interior = interior[order]

    nb = len(boundary_pts)
    segments = np.column_stack([np.arange(nb), (np.arange(nb) + 1) % nb])
    vertices = np.concatenate([boundary_pts, interior])
    max_area = np.sqrt(3.0) / 4.0 * (1.1 * coarse) ** 2
    out = triangle.triangulate(
        {"vertices": vertices, "segments": segments},
        f"pq{min_angle:.6g}a{max_area:.10g}Q",
    )
    nodes = np.asarray(out["vertices"], dtype=float)
    tris = np.asarray(out["triangles"], dtype=np.int64)
    boundary = np.asarray(out["vertex_markers"]).ravel() == 1

    mesh = TriMesh(
        nodes=nodes,
        triangles=tris,
        boundary=boundary,
        quality=MeshQuality(float(min_edge), float(max_edge), float(min_angle)),
        domain=np.asarray(core.exterior.coords)[:-1].copy(),
        extension=float(extension),
    )
    neg = mesh.signed_areas <= 0
    if neg.any():
        tris = tris.copy()
        tris[neg] = tris[neg][:, ::-1]
        mesh = TriMesh(nodes, tris, boundary, mesh.quality, mesh.domain, mesh.extension)
    return mesh


def quality_report(mesh: TriMesh, core_margin: float | None = None) -> dict:
    """Edge/angle statistics, split into core and extension-band triangles.

    Core triangles have their centroid inside the domain polygon, and at
    least ``core_margin`` away from the mesh boundary when given.
    """
    d = mesh.core_distance(mesh.centroids)
    core = d == 0
    if core_margin is not None:
        outline = Polygon(mesh.nodes[_boundary_loop(mesh)])
        c = mesh.centroids
        dist_edge = shapely.distance(outline.exterior, shapely.points(c[:, 0], c[:, 1]))
        core &= dist_edge > core_margin
    t = mesh.triangles
    p = mesh.nodes
    lengths = np.stack(
        [np.linalg.norm(p[t[:, i]] - p[t[:, (i + 1) % 3]], axis=1) for i in range(3)], axis=1
    )
    return {
        "n_nodes": mesh.n_nodes,
        "n_triangles": mesh.n_triangles,
        "min_angle": float(mesh.angles.min()),
        "core_min_angle": float(mesh.angles[core].min()) if core.any() else np.nan,
        "core_min_edge": float(lengths[core].min()) if core.any() else np.nan,
        "core_max_edge": float(lengths[core].max()) if core.any() else np.nan,
        "min_edge": float(lengths.min()),
        "max_edge": float(lengths.max()),
        "core_triangles": core,
    }


def _boundary_loop(mesh: TriMesh) -> np.ndarray:
    """Ordered node indices around the outer boundary."""
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    bnd = directed[counts[inv.ravel()] == 1]
    nxt = dict(zip(bnd[:, 0].tolist(), bnd[:, 1].tolist()))
    start = int(bnd[:, 0].min())
    loop = [start]
    cur = nxt[start]
    while cur != start:
        loop.append(cur)
        cur = nxt[cur]
    return np.asarray(loop)


# --------------------------------------------------------------------------
# point location and projection
# --------------------------------------------------------------------------


class _TriangleLocator:
    """Uniform bucket grid over triangle bounding boxes."""

    def __init__(self, mesh: TriMesh):
        p = mesh.nodes[mesh.triangles]
        self.p0 = p[:, 0]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        # inverse of [[d1x, d2x], [d1y, d2y]]
        self.inv = np.stack(
            [
                np.stack([d2[:, 1], -d2[:, 0]], axis=1),
                np.stack([-d1[:, 1], d1[:, 0]], axis=1),
            ],
            axis=1,
        ) / det[:, None, None]
        lo = p.min(axis=1)
        hi = p.max(axis=1)
        self.origin = lo.min(axis=0)
        self.cell = float(np.sqrt(np.median(np.abs(det)))) or 1.0
        top = hi.max(axis=0)
        self.shape = np.maximum(np.ceil((top - self.origin) / self.cell).astype(int), 1)
        i0 = np.clip(((lo - self.origin) // self.cell).astype(int), 0, self.shape - 1)
        i1 = np.clip(((hi - self.origin) // self.cell).astype(int), 0, self.shape - 1)
        nx = i1[:, 0] - i0[:, 0] + 1
        ny = i1[:, 1] - i0[:, 1] + 1
        counts = nx * ny
        tri = np.repeat(np.arange(len(p)), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cx = i0[tri, 0] + local % nx[tri]
        cy = i0[tri, 1] + local // nx[tri]
        cells = cy * self.shape[0] + cx
        order = np.argsort(cells, kind="stable")
        self.tris = tri[order]
        self.ptr = np.searchsorted(cells[order], np.arange(self.shape.prod() + 1))
        self._centroids = p.mean(axis=1)

    def barycentric(self, tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
        rel = pts - self.p0[tri]
        l12 = np.einsum("kij,kj->ki", self.inv[tri], rel)
        return np.column_stack([1.0 - l12.sum(axis=1), l12])

    def locate(self, pts: np.ndarray, tol: float = 1e-12):
        """Return (triangle index or -1, barycentric weights) per point."""
        n = len(pts)
        ij = np.floor((pts - self.origin) / self.cell).astype(np.int64)
        ok = np.all((ij >= 0) & (ij < self.shape), axis=1)
        tri_of = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        if not ok.any():
            return tri_of, bary
        q = np.nonzero(ok)[0]
        cell = ij[q, 1] * self.shape[0] + ij[q, 0]
        start = self.ptr[cell]
        counts = self.ptr[cell + 1] - start
        rep = np.repeat(np.arange(len(q)), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cand = self.tris[start[rep] + local]
        lam = self.barycentric(cand, pts[q[rep]])
        good = np.all(lam >= -tol, axis=1)
        rep_g = rep[good]
        first = np.unique(rep_g, return_index=True)
        hit_q = first[0]
        idx = np.nonzero(good)[0][first[1]]
        tri_of[q[hit_q]] = cand[idx]
        bary[q[hit_q]] = lam[idx]
        return tri_of, bary

    def nearest(self, pts: np.ndarray):
        """Closest triangle and clamped barycentric weights (for outside points)."""
        from scipy.spatial import cKDTree

        tree = cKDTree(self._centroids)
        k = min(8, len(self._centroids))
        _, cand = tree.query(pts, k=k)
        cand = np.atleast_2d(cand).reshape(len(pts), k)
        best_d = np.full(len(pts), np.inf)
        best_t = np.zeros(len(pts), dtype=np.int64)
        best_l = np.zeros((len(pts), 3))
        for j in range(k):
            tri = cand[:, j]
            lam = np.clip(self.barycentric(tri, pts), 0.0, None)
            lam /= lam.sum(axis=1, keepdims=True)
            verts = self._vertices(tri)
            proj = np.einsum("ki,kij->kj", lam, verts)
            dist = np.linalg.norm(proj - pts, axis=1)
            better = dist < best_d
            best_d[better] = dist[better]
            best_t[better] = tri[better]
            best_l[better] = lam[better]
        return best_t, best_l

    def _vertices(self, tri):
        d1 = np.linalg.inv(self.inv[tri])
        p0 = self.p0[tri]
        return np.stack([p0, p0 + d1[:, :, 0], p0 + d1[:, :, 1]], axis=1)


@dataclass(frozen=True, eq=False)
class Projection:
    """Sparse basis-weight matrix plus the in-hull mask."""

    matrix: sp.csr_matrix
    inside: np.ndarray
    triangle: np.ndarray = field(repr=False, default=None)

    @property
    def n_outside(self) -> int:
        return int((~self.inside).sum())


def project_points(mesh: TriMesh, points, clamp: bool = False) -> Projection:
    """Barycentric projection of points onto the linear mesh basis.

    Rows for points outside the hull are empty and flagged in
    ``Projection.inside``; with ``clamp=True`` they instead take the
    weights of the nearest point on the closest triangle (still flagged).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    loc = mesh.locator
    tri, lam = loc.locate(pts)
    inside = tri >= 0
    if clamp and not inside.all():
        out = ~inside
        t2, l2 = loc.nearest(pts[out])
        tri = tri.copy()
        tri[out] = t2
        lam[out] = l2
    have = tri >= 0
    lam = np.where(np.abs(lam) < 1e-12, 0.0, lam)
    lam = np.clip(lam, 0.0, 1.0)
    s = lam.sum(axis=1, keepdims=True)
    lam = np.divide(lam, s, out=np.zeros_like(lam), where=s > 0)
    rows = np.repeat(np.nonzero(have)[0], 3)
    cols = mesh.triangles[tri[have]].ravel()
    vals = lam[have].ravel()
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), mesh.n_nodes))
    A.eliminate_zeros()
    A.sort_indices()
    return Projection(A, inside, tri)


def require_inside(proj: Projection, what: str = "points") -> sp.csr_matrix:
    if not proj.inside.all():
        raise OutsideMeshError(
            f"{proj.n_outside} {what} fall outside the mesh hull", np.nonzero(~proj.inside)[0]
        )
    return proj.matrix


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------


def write_mesh(mesh: TriMesh, path) -> None:
    """Write the plain-text mesh format documented in the README."""
    q = mesh.quality
    lines = [
        FORMAT_HEADER,
        f"quality {q.min_edge!r} {q.max_edge!r} {q.min_angle!r}",
        f"extension {mesh.extension!r}",
    ]
    if mesh.domain is not None:
        lines.append(f"domain {len(mesh.domain)}")
        lines += [f"{x!r} {y!r}" for x, y in mesh.domain.tolist()]
    lines.append(f"nodes {mesh.n_nodes}")
    lines += [
        f"{i} {x!r} {y!r} {int(b)}" for i, ((x, y), b) in enumerate(zip(mesh.nodes.tolist(), mesh.boundary))
    ]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {a} {b} {c}" for i, (a, b, c) in enumerate(mesh.triangles.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != FORMAT_HEADER:
        raise MeshError(f"{path}: not a geodose mesh file")
    it = iter(text[1:])
    quality = None
    extension = 0.0
    domain = None
    nodes = tris = bnd = None
    for line in it:
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "quality":
            quality = MeshQuality(*map(float, parts[1:4]))
        elif key == "extension":
            extension = float(parts[1])
        elif key == "domain":
            domain = np.array([list(map(float, next(it).split())) for _ in range(int(parts[1]))])
        elif key == "nodes":
            rows = [next(it).split() for _ in range(int(parts[1]))]
            nodes = np.array([[float(r[1]), float(r[2])] for r in rows])
            bnd = np.array([r[3] == "1" for r in rows])
        elif key == "triangles":
            rows = [next(it).split() for _ in range(int(parts[1]))]
            tris = np.array([[int(r[1]), int(r[2]), int(r[3])] for r in rows], dtype=np.int64)
        else:
            raise MeshError(f"{path}: unknown section {key!r}")
    if nodes is None or tris is None or quality is None:
        raise MeshError(f"{path}: incomplete mesh file")
    return TriMesh(nodes, tris.reshape(-1, 3), bnd, quality, domain, extension)


def polygon_coords(poly: Polygon | Sequence) -> np.ndarray:
    if isinstance(poly, Polygon):
        return np.asarray(poly.exterior.coords)[:-1]
    return np.asarray(poly, dtype=float)
