"""Prior-preconditioned forward map and its randomized low-rank factorisation.

The preconditioned map sends Euclidean source vectors to whitened data,

    Fhat = sigma^{-1} F K^{-1} M^{1/2},

where ``F`` is the discrete source-to-sensor map, ``K`` the prior operator
matrix and ``M`` the lumped source mass.  Its transpose is assembled from the
exact discrete adjoint of ``F``.  The factorisation ``Fhat^T ~ Q R`` is found by
randomized subspace iteration (Halko, Martinsson & Tropp, Alg. 4.4).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PreconditionedMap:
    matvec: Callable[[np.ndarray], np.ndarray]
    rmatvec: Callable[[np.ndarray], np.ndarray]
    shape: tuple[int, int]

    @classmethod
    def from_matrix(cls, A) -> "PreconditionedMap":
        A = np.asarray(A, dtype=float)
        return cls(lambda x: A @ x, lambda y: A.T @ y, A.shape)

    @classmethod
    def from_problem(cls, ws, prior, sigma2: float) -> "PreconditionedMap":
        if sigma2 <= 0:
            raise ValueError("noise variance must be positive")
        inv_sigma = 1.0 / np.sqrt(sigma2)
        r = np.sqrt(prior.mass)

        def col(v):
            return r if v.ndim == 1 else r[:, None]

        def matvec(x):
            x = np.asarray(x, dtype=float)
            return inv_sigma * ws.apply_F(prior.solve(col(x) * x))

        def rmatvec(y):
            y = np.asarray(y, dtype=float)
            z = prior.solve(ws.apply_Ft(y), trans="T")
            return inv_sigma * col(z) * z

        return cls(matvec, rmatvec, (ws.m, prior.n))


def materialize_dense(fmap: PreconditionedMap, limit: int = 2_000_000) -> np.ndarray:
    """Dense ``m x n`` matrix of the map, column ``j`` = map of ``e_j``."""
    m, n = fmap.shape
    if m * n > limit:
        raise ValueError(f"refusing to materialise a {m}x{n} map (limit {limit} entries)")
    return np.asarray(fmap.matvec(np.eye(n))).reshape(m, n)


@dataclass(frozen=True, eq=False)
class LowRankFactor:
    """``Fhat^T ~ Q R`` together with ``C = Q^T Ahat^2 Q``."""

    Q: np.ndarray
    R: np.ndarray
    C: np.ndarray
    sigma: np.ndarray
    trace_prior: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.Q.shape[1]

    @property
    def m(self) -> int:
        return self.R.shape[1]

    @cached_property
    def C_half(self) -> np.ndarray:
        lam, V = np.linalg.eigh(self.C)
        return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T


def _orth(Y):
    Q, _ = np.linalg.qr(Y)
    return Q


def _sketch(fmap, n_cols, power_iters, rng):
    G = rng.standard_normal((fmap.shape[0], n_cols))
    Q = _orth(fmap.rmatvec(G))
    for _ in range(power_iters):
        Z = _orth(fmap.matvec(Q))
        Q = _orth(fmap.rmatvec(Z))
    B = fmap.matvec(Q)
    U, S, Vt = np.linalg.svd(B.T, full_matrices=False)
    return Q @ U, S, Vt


def randomized_factorize(fmap: PreconditionedMap, ratio_threshold: float = 1e-12,
                         oversample: int = 10, power_iters: int = 2,
                         rng: np.random.Generator | None = None, cap: int = 50,
                         block: int = 10, prior=None) -> LowRankFactor:
    """Adaptive-rank factorisation ``Fhat^T ~ Q R``.

    The target rank grows in steps of ``block`` until a singular value drops
    below ``ratio_threshold * sigma_1`` or the cap is reached.  With ``prior``
    the projected prior matrix ``C`` is formed; otherwise ``C = I``.
    """
    if not 0 < ratio_threshold < 1:
        raise ValueError("ratio_threshold must lie in (0, 1)")
    if oversample < 2:
        raise ValueError("oversample must be at least 2")
    rng = np.random.default_rng() if rng is None else rng
    m, n = fmap.shape
    full = min(m, n)
    k = min(block, cap, full)
    while True:
        L = min(k + oversample, full)
        W, S, Vt = _sketch(fmap, L, power_iters, rng)
        kept = int(np.count_nonzero(S >= ratio_threshold * S[0])) if S[0] > 0 else 0
        if kept < k or k >= min(cap, full) or L >= full:
            break
        k = min(k + block, cap, full)

    if kept == 0:
        log.warning("rank collapse: preconditioned map is numerically zero")
        Q = W[:, :1]
        R = np.zeros((1, m))
        sigma = np.zeros(1)
    else:
        # a sketch spanning the whole range is exact, so every kept mode is usable
        ell = min(kept, cap) if L >= full else min(kept, k)
        Q = W[:, :ell]
        R = S[:ell, None] * Vt[:ell]
        sigma = S[:ell].copy()
        if ell == 1 and full > 1:
            log.warning("rank collapse: only one singular value above the ratio threshold")
    if prior is not None:
        C = projected_prior(prior, Q)
        tr = prior.trace() if prior.n <= prior.dense_limit else float("nan")
    else:
        C = np.eye(Q.shape[1])
        tr = float(n)
    meta = {"ratio_threshold": ratio_threshold, "oversample": oversample,
            "power_iters": power_iters, "cap": cap}
    return LowRankFactor(Q=Q, R=R, C=C, sigma=sigma, trace_prior=tr, meta=meta)


def projected_prior(prior, Q) -> np.ndarray:
    """``C = Q^T Ahat^2 Q = (Ahat Q)^T (Ahat Q)`` with ``Ahat = M^{1/2} K^{-1} M^{1/2}``."""
    r = np.sqrt(prior.mass)[:, None]
    AQ = r * prior.solve(r * Q)
    C = AQ.T @ AQ
    return 0.5 * (C + C.T)


class CacheError(RuntimeError):
    pass


_ARRAYS = ("Q", "R", "C")


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_factor(factor: LowRankFactor, directory, header: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in _ARRAYS:
        np.save(d / f"{name}.npy", getattr(factor, name), allow_pickle=False)
    head = dict(header or {})
    head.update({
        "n": int(factor.Q.shape[0]), "m": factor.m, "rank": factor.rank,
        "sigma": [float(s) for s in factor.sigma],
        "trace_prior": factor.trace_prior,
        "meta": factor.meta,
        "checksums": {name: _sha(d / f"{name}.npy") for name in _ARRAYS},
    })
    (d / "header.json").write_text(json.dumps(head, indent=1, sort_keys=True))
    return d


def load_factor(directory) -> tuple[LowRankFactor, dict]:
    """Load a persisted factor; raises :class:`CacheError` if anything is off."""
    d = Path(directory)
    try:
        head = json.loads((d / "header.json").read_text())
        for name in _ARRAYS:
            if _sha(d / f"{name}.npy") != head["checksums"][name]:
                raise CacheError(f"checksum mismatch for {name}.npy")
        arrays = {name: np.load(d / f"{name}.npy", allow_pickle=False) for name in _ARRAYS}
    except (OSError, KeyError, ValueError) as exc:
        raise CacheError(f"unreadable factor cache in {d}: {exc}") from exc
    factor = LowRankFactor(sigma=np.asarray(head["sigma"]), trace_prior=head["trace_prior"],
                           meta=head.get("meta", {}), **arrays)
    if factor.Q.shape != (head["n"], head["rank"]) or factor.R.shape != (head["rank"], head["m"]):
        raise CacheError("factor dimensions disagree with header")
    return factor, head
