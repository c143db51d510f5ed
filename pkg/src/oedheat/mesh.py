"""Triangular meshes of a rectangular room with circular rods removed.

The mesh is a Delaunay triangulation of a structured template grid, with grid
points near each rod replaced by a ring of points on the rod surface.
Triangles whose centroid falls inside a rod are discarded.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay, cKDTree

EXTERIOR = 0
HOLE = 1


class GeometryError(ValueError):
    """Raised for inconsistent or degenerate domain descriptions."""


@dataclass(frozen=True)
class Rectangle:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def contains(self, points, tol: float = 1e-12) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return ((p[:, 0] >= self.xmin - tol) & (p[:, 0] <= self.xmax + tol)
                & (p[:, 1] >= self.ymin - tol) & (p[:, 1] <= self.ymax + tol))

    def distance_to(self, point) -> float:
        """Euclidean distance from ``point`` to the closed rectangle."""
        x, y = point
        dx = max(self.xmin - x, 0.0, x - self.xmax)
        dy = max(self.ymin - y, 0.0, y - self.ymax)
        return float(np.hypot(dx, dy))


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.hypot(p[:, 0] - self.center[0], p[:, 1] - self.center[1]) < self.radius + tol


@dataclass
class DomainSpec:
    """Room, rods, source region and candidate sensor locations."""

    bounds: Rectangle = field(default_factory=lambda: Rectangle(-1.0, 1.0, -1.0, 1.0))
    holes: Sequence[Circle] = ()
    source_region: Rectangle | None = None
    sensors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    mesh_size: float = 0.1

    def __post_init__(self):
        self.sensors = np.asarray(self.sensors, dtype=float).reshape(-1, 2)
        self.holes = tuple(self.holes)

    def validate(self) -> None:
        if not self.mesh_size > 0:
            raise GeometryError(f"mesh_size must be positive, got {self.mesh_size}")
        b = self.bounds
        if not (b.xmax > b.xmin and b.ymax > b.ymin):
            raise GeometryError(f"empty bounds {b}")
        for i, c in enumerate(self.holes):
            if c.radius <= 0:
                raise GeometryError(f"hole {i} has non-positive radius")
            cx, cy = c.center
            if (cx - c.radius <= b.xmin or cx + c.radius >= b.xmax
                    or cy - c.radius <= b.ymin or cy + c.radius >= b.ymax):
                raise GeometryError(f"hole {i} at {c.center} r={c.radius} is not strictly inside the bounds")
            for j in range(i):
                o = self.holes[j]
                if np.hypot(cx - o.center[0], cy - o.center[1]) <= c.radius + o.radius:
                    raise GeometryError(f"holes {j} and {i} overlap")
        s = self.source_region
        if s is not None:
            if not (s.xmax > s.xmin and s.ymax > s.ymin):
                raise GeometryError("source region has zero area")
            if not (b.xmin <= s.xmin and s.xmax <= b.xmax and b.ymin <= s.ymin and s.ymax <= b.ymax):
                raise GeometryError("source region leaves the bounds")
            for i, c in enumerate(self.holes):
                if s.distance_to(c.center) <= c.radius:
                    raise GeometryError(f"source region intersects hole {i}")
        for k, x in enumerate(self.sensors):
            if not b.contains(x)[0] or any(c.contains(x)[0] for c in self.holes):
                raise GeometryError(f"sensor {k} at {tuple(x)} is outside the domain")
            if s is not None and s.contains(x, tol=0.0)[0]:
                raise GeometryError(f"sensor {k} at {tuple(x)} lies inside the source region")


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray          # (n, 2)
    triangles: np.ndarray         # (nt, 3), counter-clockwise
    boundary_edges: np.ndarray    # (nb, 2)
    boundary_tags: np.ndarray     # (nb,) EXTERIOR or HOLE
    source_triangles: np.ndarray  # indices into triangles lying in the source region
    source_vertex_set: np.ndarray  # sorted vertex ids of the source triangles

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def n_source(self) -> int:
        return len(self.source_vertex_set)

    def areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.triangles)

    def edge_lengths(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)

    @cached_property
    def _locator(self) -> "_Locator":
        return _Locator(self)

    def locate_point(self, x):
        """Containing triangle of ``x`` and its barycentric coordinates.

        Returns ``(None, None)`` if ``x`` lies outside the mesh.
        """
        x = np.asarray(x, dtype=float)
        tri, lam = self._locator.locate(x[None, :])
        if tri[0] < 0:
            return None, None
        return int(tri[0]), lam[0]

    def locate_points(self, xs):
        """Vectorised :meth:`locate_point`; missing points get triangle -1."""
        return self._locator.locate(np.atleast_2d(np.asarray(xs, dtype=float)))


def triangle_areas(vertices, triangles) -> np.ndarray:
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


class _Locator:
    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        p = mesh.vertices[mesh.triangles]
        self.centroids = p.mean(axis=1)
        self.tree = cKDTree(self.centroids)
        # barycentric map: lam[1:] = T^{-1} (x - p0)
        T = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.Tinv = np.linalg.inv(T)
        self.p0 = p[:, 0]

    def _bary(self, t, x):
        l12 = np.einsum("...ij,...j->...i", self.Tinv[t], x - self.p0[t])
        return np.concatenate([1.0 - l12.sum(axis=-1, keepdims=True), l12], axis=-1)

    def locate(self, xs, tol: float = 1e-12):
        k = min(16, len(self.centroids))
        _, cand = self.tree.query(xs, k=k)
        cand = np.asarray(cand).reshape(len(xs), k)
        tri = np.full(len(xs), -1, dtype=int)
        lam = np.zeros((len(xs), 3))
        for i, x in enumerate(xs):
            ts = cand[i]
            b = self._bary(ts, np.broadcast_to(x, (len(ts), 2)))
            inside = np.flatnonzero(b.min(axis=1) >= -tol)
            if len(inside) == 0:
                # exhaustive fallback for points far from all nearby centroids
                b = self._bary(np.arange(len(self.centroids)), np.broadcast_to(x, (len(self.centroids), 2)))
                inside = np.flatnonzero(b.min(axis=1) >= -tol)
                if len(inside) == 0:
                    continue
                ts = np.arange(len(self.centroids))
            j = inside[0]
            tri[i] = ts[j]
            l = np.clip(b[j], 0.0, None)
            lam[i] = l / l.sum()
        return tri, lam


def locate_point(mesh: Mesh, x):
    return mesh.locate_point(x)


def _boundary_edges(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    key = np.sort(e, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if counts.max() > 2:
        raise GeometryError("non-manifold edge in triangulation")
    # keep the oriented copy so exterior loops run counter-clockwise
    return e[counts[inv] == 1]


def _axis(breaks, h):
    """Points covering ``[min, max]`` with every break included and gaps <= ``h``."""
    breaks = np.unique(np.asarray(breaks, dtype=float))
    parts = [breaks[:1]]
    for a, c in zip(breaks[:-1], breaks[1:]):
        k = max(1, int(np.ceil((c - a) / h - 1e-9)))
        parts.append(np.linspace(a, c, k + 1)[1:])
    return np.concatenate(parts)


def build_mesh(spec: DomainSpec) -> Mesh:
    """Triangulate ``spec``; raises :class:`GeometryError` on bad geometry."""
    spec.validate()
    b, h = spec.bounds, spec.mesh_size
    s = spec.source_region
    # grid lines through the source rectangle's sides so the region is meshed exactly
    xs = _axis([b.xmin, b.xmax] + ([s.xmin, s.xmax] if s else []), h)
    ys = _axis([b.ymin, b.ymax] + ([s.ymin, s.ymax] if s else []), h)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    spacing = min(np.diff(xs).min(), np.diff(ys).min())

    keep = np.ones(len(pts), dtype=bool)
    rings = []
    for c in spec.holes:
        keep &= ~c.contains(pts, tol=0.5 * spacing)
        n_ring = max(8, int(np.ceil(2 * np.pi * c.radius / spacing)))
        t = 2 * np.pi * np.arange(n_ring) / n_ring
        rings.append(np.column_stack([c.center[0] + c.radius * np.cos(t),
                                      c.center[1] + c.radius * np.sin(t)]))
    pts = np.vstack([pts[keep], *rings])

    tri = Delaunay(pts).simplices
    cen = pts[tri].mean(axis=1)
    drop = np.zeros(len(tri), dtype=bool)
    for c in spec.holes:
        drop |= c.contains(cen)
    tri = tri[~drop]
    area = triangle_areas(pts, tri)
    tri = tri[np.abs(area) > 1e-12 * spacing**2]
    area = triangle_areas(pts, tri)
    neg = area < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]

    used = np.unique(tri)
    remap = np.full(len(pts), -1)
    remap[used] = np.arange(len(used))
    pts, tri = pts[used], remap[tri]

    edges = _boundary_edges(tri)
    tags = np.full(len(edges), EXTERIOR)
    for c in spec.holes:
        mid = pts[edges].mean(axis=1)
        tags[c.contains(mid, tol=1e-9)] = HOLE

    if spec.source_region is not None:
        inside = spec.source_region.contains(pts, tol=1e-9 * spacing)
        src_tri = np.flatnonzero(inside[tri].all(axis=1))
    else:
        src_tri = np.arange(len(tri))
    if len(src_tri) == 0:
        raise GeometryError("source region contains no complete triangle; refine the mesh")
    src_vert = np.unique(tri[src_tri])
    return Mesh(pts, tri, edges, tags, src_tri, src_vert)


def export_csv(mesh: Mesh, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "vertices.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y"])
        for i, (x, y) in enumerate(mesh.vertices):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with open(d / "triangles.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "v0", "v1", "v2"])
        for i, t in enumerate(mesh.triangles):
            w.writerow([i, *map(int, t)])
