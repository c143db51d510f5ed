"""Gaussian prior N(0, C0) with C0 = (-alpha Lap + I)^{-2} on the source region.

The source space carries the lumped mass inner product ``<u, v> = u^T M v`` with
``M = diag(m_i)``.  The elliptic operator ``-alpha Lap + I`` with Robin
condition ``du/dn = beta u`` has the weak-form matrix

    K = alpha K1 + M + alpha beta B

and the covariance square root acts on coefficients as ``A = K^{-1} M``.  ``A``
is self-adjoint in the M inner product, so ``C0 = A @ A`` is too.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import boundary_mass_matrix, lump, mass_matrix, source_submesh, stiffness_matrix
from .mesh import Mesh

DEFAULT_ALPHA = 0.25
ROBIN_DIVISOR = 1.42


def robin_coefficient(alpha: float) -> float:
    return math.sqrt(alpha) / ROBIN_DIVISOR


class DenseLimitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PriorOperator:
    alpha: float
    beta: float
    K1: sp.csr_matrix
    B: sp.csr_matrix
    mass: np.ndarray          # lumped source mass diagonal
    mass_consistent: sp.csr_matrix
    dense_limit: int = 4000

    @cached_property
    def K(self) -> sp.csc_matrix:
        K = self.alpha * self.K1 + sp.diags(self.mass) + self.alpha * self.beta * self.B
        return K.tocsc()

    @cached_property
    def _lu(self):
        return splu(self.K)

    @property
    def n(self) -> int:
        return len(self.mass)

    def solve(self, rhs, trans: str = "N") -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=float), trans=trans)

    def _scale(self, v, power):
        w = self.mass**power
        return v * (w if np.ndim(v) == 1 else w[:, None])

    def apply_C0half(self, v) -> np.ndarray:
        return self.solve(self._scale(np.asarray(v, dtype=float), 1.0))

    def apply_C0(self, v) -> np.ndarray:
        return self.apply_C0half(self.apply_C0half(v))

    def apply_precision(self, v) -> np.ndarray:
        """Prior precision as a bilinear form: ``K M^{-1} K v``."""
        return self.K @ self._scale(self.K @ np.asarray(v, dtype=float), -1.0)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw ``K^{-1} M^{1/2} xi``; columns are independent samples when ``size`` is given."""
        shape = (self.n,) if size is None else (self.n, size)
        xi = rng.standard_normal(shape)
        return self.solve(self._scale(xi, 0.5))

    def _check_dense(self):
        if self.n > self.dense_limit:
            raise DenseLimitError(
                f"{self.n} source dofs exceeds the dense limit {self.dense_limit}; "
                "use a stochastic trace estimator (e.g. Hutchinson) instead")

    @cached_property
    def hat_dense(self) -> np.ndarray:
        """Symmetric ``M^{1/2} A M^{-1/2} = M^{1/2} K^{-1} M^{1/2}`` as a dense array."""
        self._check_dense()
        r = np.sqrt(self.mass)
        H = self.solve(np.diag(r)) * r[:, None]
        return 0.5 * (H + H.T)

    def covariance_dense(self) -> np.ndarray:
        """Coefficient covariance ``K^{-1} M K^{-1}`` of :meth:`sample`."""
        H = self.hat_dense
        r = 1.0 / np.sqrt(self.mass)
        return r[:, None] * (H @ H) * r[None, :]

    def pointwise_variance(self) -> np.ndarray:
        H = self.hat_dense
        return np.einsum("ij,ij->i", H, H) / self.mass

    def trace(self) -> float:
        """Trace of C0 (dense; limited to ``dense_limit`` dofs)."""
        H = self.hat_dense
        return float(np.einsum("ij,ij->", H, H))


def build_prior(mesh: Mesh, alpha: float = DEFAULT_ALPHA, beta: float | None = None,
                dense_limit: int = 4000) -> PriorOperator:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    beta = robin_coefficient(alpha) if beta is None else beta
    verts, tris, edges = source_submesh(mesh)
    M = mass_matrix(verts, tris)
    return PriorOperator(
        alpha=alpha, beta=beta,
        K1=stiffness_matrix(verts, tris),
        B=boundary_mass_matrix(verts, edges),
        mass=np.asarray(lump(M).diagonal()),
        mass_consistent=M,
        dense_limit=dense_limit,
    )


def trace_prior(prior: PriorOperator) -> float:
    return prior.trace()
