"""A-optimal sensor selection on a low-rank factor.

With ``B(w) = R diag(w) R^T + I`` the A-criterion (posterior covariance trace)
and its gradient are

    J(w)      = tr(C0) - tr(C) + tr(B(w)^{-1} C)
    dJ/dw_k   = -|| C^{1/2} B(w)^{-1} r_k ||^2

Binary designs are obtained from the relaxed optimum by p-continuation: the
weights are reparametrised as ``z = w**p`` and ``p`` is shrunk geometrically,
which drives fractional weights towards 0 or 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .lowrank import LowRankFactor

log = logging.getLogger(__name__)

DOMINANT = "dominant"
REDUNDANT = "redundant"
FREE = "free"

ZERO_CUTOFF = 1e-14


def _factor(w, lr: LowRankFactor):
    w = np.asarray(w, dtype=float)
    if w.shape != (lr.m,):
        raise ValueError(f"design has shape {w.shape}, expected ({lr.m},)")
    Bw = (lr.R * w) @ lr.R.T + np.eye(lr.rank)
    try:
        return cho_factor(Bw)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("R diag(w) R^T + I is not positive definite") from exc


def _constants(lr: LowRankFactor, include_constants: bool) -> float:
    return lr.trace_prior - np.trace(lr.C) if include_constants else 0.0


def objective_J(w, lr: LowRankFactor, include_constants: bool = True) -> float:
    cf = _factor(w, lr)
    return float(_constants(lr, include_constants) + np.trace(cho_solve(cf, lr.C)))


def gradient_J(w, lr: LowRankFactor) -> np.ndarray:
    X = cho_solve(_factor(w, lr), lr.R)
    G = lr.C_half @ X
    return -np.einsum("ij,ij->j", G, G)


def objective_and_gradient(w, lr: LowRankFactor, include_constants: bool = True):
    cf = _factor(w, lr)
    J = _constants(lr, include_constants) + np.trace(cho_solve(cf, lr.C))
    G = lr.C_half @ cho_solve(cf, lr.R)
    return float(J), -np.einsum("ij,ij->j", G, G)


def _check_p(p):
    if not p > 0:
        raise ValueError(f"power p must be positive, got {p}")


def objective_Jp(z, p: float, lr: LowRankFactor, include_constants: bool = True) -> float:
    _check_p(p)
    return objective_J(np.asarray(z, dtype=float) ** (1.0 / p), lr, include_constants)


def gradient_Jp(z, p: float, lr: LowRankFactor) -> np.ndarray:
    return objective_and_gradient_p(z, p, lr)[1]


def objective_and_gradient_p(z, p: float, lr: LowRankFactor, include_constants: bool = True):
    _check_p(p)
    z = np.asarray(z, dtype=float)
    J, g = objective_and_gradient(z ** (1.0 / p), lr, include_constants)
    if p == 1.0:
        return J, g
    pos = z > ZERO_CUTOFF
    out = np.zeros_like(z)
    out[pos] = g[pos] * z[pos] ** (1.0 / p - 1.0) / p
    return J, out


def project_box_capped_simplex(z, m0: float, tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection onto ``{0 <= z <= 1, sum(z) <= m0}``.

    If the box clip violates the budget, the projection is ``clip(z - tau, 0, 1)``
    with the shift ``tau`` solving ``sum = m0``.  The sum is piecewise linear in
    ``tau`` with kinks at ``z_k`` and ``z_k - 1``, so ``tau`` is found exactly by
    locating the bracketing kinks and interpolating.
    """
    z = np.asarray(z, dtype=float)
    x = np.clip(z, 0.0, 1.0)
    if x.sum() <= m0 + tol:
        return x
    if m0 <= 0:
        return np.zeros_like(x)
    kinks = np.unique(np.concatenate([z, z - 1.0, [0.0]]))
    kinks = kinks[kinks >= 0.0]
    sums = np.clip(z[None, :] - kinks[:, None], 0.0, 1.0).sum(axis=1)
    # sums is non-increasing; find kinks[i] <= tau <= kinks[i+1]
    i = int(np.searchsorted(-sums, -m0, side="right")) - 1
    i = min(max(i, 0), len(kinks) - 2)
    s0, s1 = sums[i], sums[i + 1]
    tau = kinks[i] + (s0 - m0) / (s0 - s1) * (kinks[i + 1] - kinks[i]) if s0 > s1 else kinks[i]
    return np.clip(z - tau, 0.0, 1.0)


@dataclass
class PGResult:
    x: np.ndarray
    f: float
    iterations: int
    converged: bool


def projected_gradient(fun, x0, project, tol: float = 1e-9, max_iter: int = 500,
                       armijo: float = 0.5, sufficient: float = 1e-4) -> PGResult:
    """Projected gradient with Barzilai-Borwein trial steps and Armijo backtracking.

    ``fun`` returns ``(value, gradient)``.  Stops when the projected gradient
    step ``||x - P(x - g)||_inf`` falls below ``tol``.
    """
    x = project(x0)
    f, g = fun(x)
    step = 1.0
    for it in range(max_iter):
        if np.max(np.abs(x - project(x - g)), initial=0.0) <= tol:
            return PGResult(x, f, it, True)
        t = step
        while True:
            xn = project(x - t * g)
            fn, gn = fun(xn)
            # slack of a few ulps so steps below float resolution are not rejected forever
            if fn <= f + sufficient * (g @ (xn - x)) + 4 * np.finfo(float).eps * abs(f) or t < 1e-30:
                break
            t *= armijo
        s, y = xn - x, gn - g
        sy = s @ y
        step = (s @ s) / sy if sy > 0 else 2.0 * t
        if not np.isfinite(step) or step <= 0:
            step = 1.0
        stalled = not np.any(s)
        x, f, g = xn, fn, gn
        if stalled:
            done = np.max(np.abs(x - project(x - g)), initial=0.0) <= tol
            return PGResult(x, f, it + 1, done)
    done = np.max(np.abs(x - project(x - g)), initial=0.0) <= tol
    return PGResult(x, f, max_iter, done)


@dataclass
class RelaxedResult:
    w: np.ndarray
    J: float
    iterations: int
    converged: bool


def solve_relaxed(lr: LowRankFactor, m0: float, tol: float = 1e-9, max_iter: int = 5000,
                  w0=None) -> RelaxedResult:
    """Global minimiser of the (convex) relaxed criterion over the capped simplex.

    Its objective value is a lower bound for every binary design with at most
    ``m0`` sensors.
    """
    m = lr.m
    if w0 is None:
        w0 = np.full(m, min(1.0, m0 / m))
    res = projected_gradient(lambda w: objective_and_gradient(w, lr, include_constants=False), w0,
                             lambda w: project_box_capped_simplex(w, m0), tol, max_iter)
    if not res.converged:
        log.warning("relaxed solve for m0=%s stopped after %d iterations", m0, res.iterations)
    return RelaxedResult(res.x, objective_J(res.x, lr), res.iterations, res.converged)


def classify(w, tol_class: float = 1e-3) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    labels = np.full(w.shape, FREE, dtype=object)
    labels[w >= 1.0 - tol_class] = DOMINANT
    labels[w <= tol_class] = REDUNDANT
    return labels


@dataclass(frozen=True)
class ContinuationParams:
    delta: float = 0.2
    p_min: float = 1e-3
    binariness_tol: float = 1e-3
    tol_class: float = 1e-3
    grad_tol: float = 1e-9
    max_iter: int = 500

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 < self.binariness_tol < 0.5:
            raise ValueError("binariness_tol must lie in (0, 0.5)")


@dataclass
class Design:
    w: np.ndarray
    m0: int
    classification: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def J(self) -> float:
        return self.meta.get("J", float("nan"))


def _round_top(w, m0):
    out = np.zeros_like(w)
    order = np.argsort(-w, kind="stable")
    out[order[:m0]] = 1.0
    return out


def p_continuation(w_star, lr: LowRankFactor, m0: int,
                   params: ContinuationParams = ContinuationParams()) -> Design:
    """Binary design from the relaxed optimum ``w_star`` by p-continuation.

    Dominant and redundant sensors of ``w_star`` stay fixed at 1 and 0; the
    remaining weights are re-optimised for ``J(z**(1/p))`` over the capped
    simplex while ``p`` shrinks by the factor ``1 - delta``.
    """
    w = np.asarray(w_star, dtype=float).copy()
    labels = classify(w, params.tol_class)
    w[labels == DOMINANT] = 1.0
    w[labels == REDUNDANT] = 0.0
    free = labels == FREE
    budget = m0 - np.count_nonzero(labels == DOMINANT)
    bt = params.binariness_tol
    p = 1.0
    ps, iters = [], []
    forced = False

    def fractional(v):
        return np.any((v[free] > bt) & (v[free] < 1.0 - bt))

    while free.any() and fractional(w):
        p *= 1.0 - params.delta
        if p < params.p_min:
            forced = True
            break
        base = w ** p

        def fun(zf, p=p, base=base):
            zfull = base.copy()
            zfull[free] = zf
            J, g = objective_and_gradient_p(zfull, p, lr, include_constants=False)
            return J, g[free]

        res = projected_gradient(fun, w[free] ** p,
                                 lambda v: project_box_capped_simplex(v, budget),
                                 params.grad_tol, params.max_iter)
        w[free] = res.x ** (1.0 / p)
        ps.append(p)
        iters.append(res.iterations)

    if forced:
        log.warning("p_min reached with fractional weights for m0=%d; rounding", m0)
        wb = _round_top(w, m0)
    else:
        wb = np.where(w >= 0.5, 1.0, 0.0)
        if wb.sum() > m0:
            wb = _round_top(w, m0)
    meta = {"p_trajectory": ps, "inner_iterations": iters, "forced_rounding": forced,
            "J": objective_J(wb, lr), "n_dominant": int(np.count_nonzero(labels == DOMINANT)),
            "n_redundant": int(np.count_nonzero(labels == REDUNDANT))}
    return Design(wb, m0, labels, meta)
