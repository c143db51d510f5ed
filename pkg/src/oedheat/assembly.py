"""P1 finite element matrices on a :class:`~oedheat.mesh.Mesh`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, triangle_areas


class AssemblyError(RuntimeError):
    pass


def eval_diffusion(x) -> np.ndarray | float:
    """Diffusion coefficient 1 + (5 y^5 + y^3) on the upper half plane, 1 below."""
    x = np.asarray(x, dtype=float)
    y = x[..., 1]
    a = 1.0 + np.where(y >= 0.0, 5.0 * y**5 + y**3, 0.0)
    return float(a) if a.ndim == 0 else a


def _check_areas(vertices, triangles):
    area = triangle_areas(vertices, triangles)
    bad = np.flatnonzero(area <= 0.0)
    if len(bad):
        raise AssemblyError(f"degenerate or inverted element {int(bad[0])} (area {area[bad[0]]:.3e})")
    return area


def _gradients(vertices, triangles, area):
    """Constant gradients of the three barycentric basis functions, shape (nt, 3, 2)."""
    p = vertices[triangles]
    # grad lambda_i = rot90(p_{i+2} - p_{i+1}) / (2 area)
    e = np.roll(p, -2, axis=1) - np.roll(p, -1, axis=1)
    g = np.stack([-e[..., 1], e[..., 0]], axis=-1)
    return g / (2.0 * area[:, None, None])


def _scatter(triangles, local, n):
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def mass_matrix(vertices, triangles, n=None) -> sp.csr_matrix:
    n = len(vertices) if n is None else n
    area = _check_areas(vertices, triangles)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(triangles, area[:, None, None] * ref, n)


def stiffness_matrix(vertices, triangles, coefficient: Callable | None = None,
                     rule: str = "centroid", n=None) -> sp.csr_matrix:
    """Stiffness matrix of ``-div(a grad u)``; ``a`` sampled per element.

    ``rule`` is ``"centroid"`` (one point) or ``"midpoint"`` (edge midpoints,
    exact for quadratic ``a``).
    """
    n = len(vertices) if n is None else n
    area = _check_areas(vertices, triangles)
    g = _gradients(vertices, triangles, area)
    if coefficient is None:
        abar = np.ones(len(triangles))
    else:
        p = vertices[triangles]
        if rule == "centroid":
            abar = coefficient(p.mean(axis=1))
        elif rule == "midpoint":
            mids = 0.5 * (p + np.roll(p, -1, axis=1))
            abar = coefficient(mids.reshape(-1, 2)).reshape(-1, 3).mean(axis=1)
        else:
            raise ValueError(f"unknown quadrature rule {rule!r}")
    local = np.einsum("tid,tjd->tij", g, g) * (abar * area)[:, None, None]
    return _scatter(triangles, local, n)


def boundary_mass_matrix(vertices, edges, n=None) -> sp.csr_matrix:
    """Mass matrix of the trace on the given boundary edges."""
    n = len(vertices) if n is None else n
    length = np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1)
    ref = (np.ones((2, 2)) + np.eye(2)) / 6.0
    local = length[:, None, None] * ref
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def lump(M) -> sp.dia_matrix:
    return sp.diags(np.asarray(M.sum(axis=1)).ravel())


def observation_matrix(mesh: Mesh, sensors) -> sp.csr_matrix:
    """Rows of barycentric weights: ``O @ u`` is the P1 interpolant at each sensor."""
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    tri, lam = mesh.locate_points(sensors)
    missing = np.flatnonzero(tri < 0)
    if len(missing):
        k = int(missing[0])
        raise AssemblyError(f"sensor {k} at {tuple(sensors[k])} is not inside the mesh")
    rows = np.repeat(np.arange(len(sensors)), 3)
    cols = mesh.triangles[tri].ravel()
    return sp.csr_matrix((lam.ravel(), (rows, cols)), shape=(len(sensors), mesh.n))


def extension_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Zero extension from source dofs to all dofs (``E_S``)."""
    ns = mesh.n_source
    return sp.csr_matrix((np.ones(ns), (mesh.source_vertex_set, np.arange(ns))), shape=(mesh.n, ns))


@dataclass(frozen=True, eq=False)
class FemOperators:
    M: sp.csr_matrix
    M_L: sp.dia_matrix
    K_a: sp.csr_matrix
    O: sp.csr_matrix
    E_S: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def m(self) -> int:
        return self.O.shape[0]

    @property
    def n_source(self) -> int:
        return self.E_S.shape[1]


def assemble_all(mesh: Mesh, sensors, coefficient: Callable | None = eval_diffusion,
                 rule: str = "centroid") -> FemOperators:
    """Assemble mass, lumped mass, stiffness, observation and extension matrices."""
    M = mass_matrix(mesh.vertices, mesh.triangles)
    K = stiffness_matrix(mesh.vertices, mesh.triangles, coefficient, rule)
    return FemOperators(M=M, M_L=lump(M), K_a=K, O=observation_matrix(mesh, sensors),
                        E_S=extension_matrix(mesh))


def source_submesh(mesh: Mesh):
    """Source triangles renumbered to source dofs, and the edges of their boundary."""
    local = np.full(mesh.n, -1)
    local[mesh.source_vertex_set] = np.arange(mesh.n_source)
    tris = local[mesh.triangles[mesh.source_triangles]]
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    edges = e[counts[inv.ravel()] == 1]
    return mesh.vertices[mesh.source_vertex_set], tris, edges


def dump_coo(A, path) -> None:
    """Write a sparse matrix as ``row col value`` lines."""
    C = sp.coo_matrix(A)
    with open(path, "w") as f:
        for i, j, v in zip(C.row, C.col, C.data):
            f.write(f"{int(i)} {int(j)} {float(v)!r}\n")
