"""Implicit Euler heat solves: source -> final-time sensor readings, and the transpose."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import splu

from .assembly import FemOperators


@dataclass(frozen=True)
class TimeGrid:
    T: float
    dt: float

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("T and dt must be positive")
        if abs(self.N * self.dt - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError(f"dt={self.dt} does not divide T={self.T}")

    @property
    def N(self) -> int:
        return max(1, int(round(self.T / self.dt)))


class HeatWorkspace:
    """Factorised ``M + dt K_a``, shared by every forward and adjoint solve.

    Solves allocate their own state, so one workspace may serve many threads.
    """

    def __init__(self, ops: FemOperators, grid: TimeGrid):
        self.ops = ops
        self.grid = grid
        A = (ops.M + grid.dt * ops.K_a).tocsc()
        self._lu = splu(A)
        self._M = ops.M.tocsr()
        self._src = (grid.dt * (ops.M @ ops.E_S)).tocsr()

    @property
    def m(self) -> int:
        return self.ops.m

    @property
    def n_source(self) -> int:
        return self.ops.n_source

    def _solve(self, rhs, trans="N"):
        return self._lu.solve(np.asarray(rhs, dtype=float), trans=trans)

    def solve_forward(self, s) -> np.ndarray:
        """Final state ``u^N`` for source coefficients ``s`` (vector or columns)."""
        s = np.asarray(s, dtype=float)
        if s.shape[0] != self.n_source:
            raise ValueError(f"expected {self.n_source} source coefficients, got {s.shape[0]}")
        f = self._src @ s
        u = np.zeros((self.ops.n,) + s.shape[1:])
        for _ in range(self.grid.N):
            u = self._solve(self._M @ u + f)
        return u

    def apply_F(self, s) -> np.ndarray:
        return self.ops.O @ self.solve_forward(s)

    def apply_Ft(self, g) -> np.ndarray:
        """Exact transpose of :meth:`apply_F` (reverse-time recurrence)."""
        g = np.asarray(g, dtype=float)
        if g.shape[0] != self.m:
            raise ValueError(f"expected {self.m} sensor values, got {g.shape[0]}")
        v = self.ops.O.T @ g
        acc = np.zeros_like(v)
        for _ in range(self.grid.N):
            p = self._solve(v, trans="T")
            Mp = self._M.T @ p
            acc += Mp
            v = Mp
        return self.grid.dt * (self.ops.E_S.T @ acc)


def export_field_csv(path, values, vertices=None) -> None:
    """Nodal field as ``id,value`` or ``id,x,y,value`` when vertices are given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if vertices is None:
            w.writerow(["id", "value"])
            for i, v in enumerate(values):
                w.writerow([i, repr(float(v))])
        else:
            w.writerow(["id", "x", "y", "value"])
            for i, (v, xy) in enumerate(zip(values, vertices)):
                w.writerow([i, repr(float(xy[0])), repr(float(xy[1])), repr(float(v))])
