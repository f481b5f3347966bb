"""Dense reference implementations for validating the structured path.

Everything here materializes full matrices and uses plain Cholesky-based
linear algebra: no eigendecompositions, no Kronecker matvec tricks. The
kernel and term-assembly code is shared with the main path (so kernel
formula bugs cancel in comparisons and are covered by direct hand-value
tests instead); the linear algebra is deliberately naive. All entry
points are guarded to small problems.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import kernels
from .anova import assemble_dense_gram
from .errors import NotPSDError, NumericError, ShapeError
from .gp import LN_2PI, ModelState, _check_y, _term_scale

JITTER_REL = 1e-10


def dense_gram(ms: ModelState) -> np.ndarray:
    """Materialize the full n x n model Gram (n <= 5000)."""
    grams = [kernels.gram(spec, x) for spec, x in zip(ms.specs, ms.inputs)]
    return assemble_dense_gram(ms.terms, grams, ms.hp)


def _chol_marginal(ms: ModelState):
    K = dense_gram(ms)
    n = K.shape[0]
    M = K + ms.hp.sigma ** 2 * np.eye(n)
    try:
        return cho_factor(M, lower=True)
    except LinAlgError:
        jitter = JITTER_REL * float(np.trace(M)) / n
        try:
            return cho_factor(M + jitter * np.eye(n), lower=True)
        except LinAlgError as exc:
            raise NotPSDError(f"marginal covariance is not PSD even with jitter {jitter:.3e}") from exc


def dense_logml(ms: ModelState, y) -> float:
    """Log marginal likelihood by dense Cholesky."""
    y = _check_y(ms, y)
    cf = _chol_marginal(ms)
    w = cho_solve(cf, y)
    quad = float(y @ w)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    val = -0.5 * quad - 0.5 * logdet - 0.5 * y.shape[0] * LN_2PI
    if not np.isfinite(val):
        raise NumericError(f"non-finite dense log marginal likelihood at {ms.hp}")
    return val


@dataclass(frozen=True)
class DensePosterior:
    mean: np.ndarray
    variance: np.ndarray
    term_means: dict


def _query_grids(ms: ModelState, query):
    if query is None:
        return [np.asarray(x) for x in ms.inputs]
    if isinstance(query, dict):
        missing = [l for l in range(1, ms.terms.d + 1) if l not in query]
        if missing:
            raise ShapeError(f"query is missing inputs for dimensions {missing}")
        return [kernels.as_points(query[l]) for l in range(1, ms.terms.d + 1)]
    seq = [kernels.as_points(q) for q in query]
    if len(seq) != ms.terms.d:
        raise ShapeError(f"query must provide {ms.terms.d} point sets, got {len(seq)}")
    return seq


def _term_cross_block(ms: ModelState, term, qs) -> np.ndarray:
    """Full (M x n) covariance block of one term over the query grid,
    built by explicit Kronecker products of per-dimension blocks."""
    factors = []
    for l in range(1, ms.terms.d + 1):
        m_l = qs[l - 1].shape[0]
        n_l = ms.inputs[l - 1].shape[0]
        if l in term:
            factors.append(kernels.cross_gram(ms.specs[l - 1], qs[l - 1], ms.inputs[l - 1]))
        else:
            factors.append(np.ones((m_l, n_l)))
    return _term_scale(ms.hp, term) * reduce(np.kron, factors)


def _term_query_block(ms: ModelState, term, qs) -> np.ndarray:
    """Full (M x M) prior covariance block of one term among query points."""
    factors = []
    for l in range(1, ms.terms.d + 1):
        m_l = qs[l - 1].shape[0]
        if l in term:
            factors.append(kernels.query_block(ms.specs[l - 1], qs[l - 1], ms.inputs[l - 1]))
        else:
            factors.append(np.ones((m_l, m_l)))
    return _term_scale(ms.hp, term) * reduce(np.kron, factors)


def dense_posterior(ms: ModelState, y, query=None) -> DensePosterior:
    """Posterior mean, pointwise variance, and per-term means on a query
    grid, all by direct dense linear algebra.

    term_means is keyed by term tuple and shaped over the query sizes of
    the term's own dimensions (the constant term maps to a scalar array).
    """
    y = _check_y(ms, y)
    qs = _query_grids(ms, query)
    shape = tuple(q.shape[0] for q in qs)
    M = int(np.prod(shape))
    cf = _chol_marginal(ms)
    w = cho_solve(cf, y)

    term_means = {}
    K_star = np.zeros((M, ms.n))
    K_qq_diag = np.zeros(M)
    for term in ms.terms.terms:
        block = _term_cross_block(ms, term, qs)
        K_star += block
        K_qq_diag += np.diag(_term_query_block(ms, term, qs))
        if term:
            sub_qs = [qs[l - 1] for l in term]
            sub_factors = []
            for l in range(1, ms.terms.d + 1):
                if l in term:
                    sub_factors.append(
                        kernels.cross_gram(ms.specs[l - 1], qs[l - 1], ms.inputs[l - 1])
                    )
                else:
                    sub_factors.append(np.ones((1, ms.inputs[l - 1].shape[0])))
            sub_block = _term_scale(ms.hp, term) * reduce(np.kron, sub_factors)
            term_means[term] = (sub_block @ w).reshape(tuple(q.shape[0] for q in sub_qs))
        else:
            term_means[()] = np.asarray(ms.hp.alpha0 ** 2 * float(np.sum(w)))

    mean = (K_star @ w).reshape(shape)
    S = cho_solve(cf, K_star.T)
    variance = (K_qq_diag - np.einsum("mi,im->m", K_star, S, optimize=True)).reshape(shape)
    variance = np.maximum(variance, 0.0)
    return DensePosterior(mean=mean, variance=variance, term_means=term_means)


def dense_term_variance(ms: ModelState, term, points) -> np.ndarray:
    """Pointwise posterior variance of one component at aligned points,
    by direct dense linear algebra. points: per-dimension arrays (aligned
    rows) for the dimensions of the term, ascending order."""
    t = tuple(sorted(int(l) for l in term))
    cf = _chol_marginal(ms)
    if not t:
        vec = ms.hp.alpha0 ** 2 * np.ones(ms.n)
        quad = float(vec @ cho_solve(cf, vec))
        return np.asarray(max(ms.hp.alpha0 ** 2 - quad, 0.0))
    qs = [kernels.as_points(p) for p in points]
    m = qs[0].shape[0]
    if any(q.shape[0] != m for q in qs):
        raise ShapeError("per-dimension point arrays must have matching lengths")
    scale = _term_scale(ms.hp, t)
    prior = np.full(m, scale)
    for j, l in enumerate(t):
        prior *= kernels.kernel_diag(ms.specs[l - 1], qs[j], ms.inputs[l - 1])
    out = np.empty(m)
    for i in range(m):
        factors = []
        for l in range(1, ms.terms.d + 1):
            if l in t:
                factors.append(
                    kernels.cross_gram(ms.specs[l - 1], qs[t.index(l)][i : i + 1], ms.inputs[l - 1])
                )
            else:
                factors.append(np.ones((1, ms.inputs[l - 1].shape[0])))
        vec = scale * reduce(np.kron, factors).ravel()
        out[i] = max(prior[i] - float(vec @ cho_solve(cf, vec)), 0.0)
    return out
