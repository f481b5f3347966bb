"""Structured linear algebra for Kronecker-factored additive models.

Grid layout contract: a vector over a d-dimensional grid with per-dimension
sizes (n_1, ..., n_d) is stored with the last dimension fastest, i.e.
flat index(i_1, ..., i_d) = ((i_1 * n_2 + i_2) * n_3 + i_3) ... * n_d + i_d.
This is C-order flattening of an (n_1, ..., n_d) array, so reshape(sizes)
recovers the tensor without copying.

The model Gram K = alpha0^2 * sum over terms of Kron_l B_l (with B_l the
scaled centred per-dimension Gram inside a term and the all-ones matrix
outside it) shares the Kronecker eigenbasis Q = Kron_l Q_l of the
per-dimension centred Grams, provided the first column of each Q_l is the
constant unit vector 1/sqrt(n_l): in that basis the all-ones matrix
becomes diag(n_l, 0, ..., 0), so K = Q D Q^T with a diagonal D assembled
from per-dimension eigenvalue vectors. All marginal-covariance operations
(solve, log-determinant, multiply) then cost O(n * sum_l n_l) time via
repeated reshape-multiply passes, never materializing an n x n matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .anova import HyperParams, ModelStructure, TermCollection, require_valid
from .errors import CentringError, ConfigError, NotPSDError, NumericError, ShapeError
from .kernels import GramMatrix

# relative thresholds, all scaled by the largest eigenvalue
ZERO_EIG_REL = 1e-10   # |lam| below this is part of the zero eigenspace
NEG_EIG_REL = 1e-8     # more negative than this is a PSD violation
CENTRED_ROWSUM_REL = 1e-8


@dataclass(frozen=True)
class EigenBasis:
    """Orthonormal eigendecomposition of one centred per-dimension Gram.

    lam is non-decreasing with lam[0] = 0 exactly; the first column of q
    is the constant unit vector 1/sqrt(n); zero_mult counts the zero
    eigenvalues (always >= 1 for a centred matrix).
    """

    q: np.ndarray
    lam: np.ndarray
    zero_mult: int

    def __post_init__(self):
        self.q.setflags(write=False)
        self.lam.setflags(write=False)

    @property
    def n(self) -> int:
        return self.lam.shape[0]


def eigendecompose_centred(kc) -> EigenBasis:
    """Eigendecompose a centred PSD matrix with an exact constant eigenvector.

    The numeric zero eigenspace always contains the constant vector (a
    centred matrix annihilates it); the returned basis is repaired so its
    first column is exactly 1/sqrt(n), with the remaining zero-space
    columns re-orthonormalized against it. Eigenvalues in the floating
    gray zone [-NEG_EIG_REL * lam_max, 0) are clamped to zero; anything
    more negative raises NotPSDError.
    """
    K = np.asarray(kc.values if isinstance(kc, GramMatrix) else kc, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {K.shape}")
    if not np.isfinite(K).all():
        raise NumericError("matrix contains non-finite entries")
    n = K.shape[0]
    scale = float(np.abs(K).max())
    if not np.allclose(K, K.T, rtol=0.0, atol=1e-10 * max(scale, 1e-30)):
        raise ShapeError("matrix is not symmetric")
    row_sums = K.sum(axis=1)
    if np.abs(row_sums).max() > CENTRED_ROWSUM_REL * max(scale, 1e-30):
        worst = int(np.argmax(np.abs(row_sums)))
        raise CentringError(
            f"matrix is not centred: row {worst} sums to {row_sums[worst]:.3e} "
            f"(tolerance {CENTRED_ROWSUM_REL:.0e} * max|K|)"
        )

    lam, q = np.linalg.eigh(0.5 * (K + K.T))
    lam_max = max(float(lam[-1]), 0.0)
    if float(lam.min()) < -(NEG_EIG_REL * lam_max + 1e-14 * max(scale, 1e-30)):
        raise NotPSDError(
            f"eigenvalue {lam.min():.3e} below -{NEG_EIG_REL:.0e} * lam_max = "
            f"{-NEG_EIG_REL * lam_max:.3e}; matrix is not positive semi-definite"
        )
    lam = np.where(lam < 0.0, 0.0, lam)

    zero_tol = ZERO_EIG_REL * lam_max + 1e-14 * max(scale, 1e-30)
    zero = lam <= zero_tol
    k = int(zero.sum())
    if k == 0:
        raise CentringError("centred matrix lost its zero eigenvalue; numeric breakdown")

    u = np.full(n, 1.0 / math.sqrt(n))
    V0 = q[:, zero]
    resid = u - V0 @ (V0.T @ u)
    if np.linalg.norm(resid) > 1e-6:
        raise CentringError(
            "constant vector is not in the numeric zero eigenspace "
            f"(residual {np.linalg.norm(resid):.3e})"
        )
    if k == 1:
        Z = u[:, None]
    else:
        # re-orthonormalize the zero space with u pinned as its first vector
        B = V0 - u[:, None] @ (u[None, :] @ V0)
        U, s, _ = np.linalg.svd(B, full_matrices=False)
        Z = np.column_stack([u, U[:, : k - 1]])

    # Exact eigenvectors of nonzero eigenvalues are orthogonal to the zero
    # space. When a tiny nonzero eigenvalue sits next to the structural zero,
    # eigh's columns for the pair are rotated by ~eps * lam_max / gap, so
    # pinning u alone would leave the basis non-orthonormal at that level;
    # one projection sweep removes the contamination without disturbing the
    # eigen-residuals.
    V1 = q[:, ~zero]
    V1 = V1 - Z @ (Z.T @ V1)
    norms = np.linalg.norm(V1, axis=0)
    if norms.size and norms.min() < 0.5:
        raise CentringError("nonzero eigenvector collapsed onto the zero space")
    q_out = np.empty_like(q)
    q_out[:, :k] = Z
    q_out[:, k:] = V1 / norms if norms.size else V1
    lam_out = np.concatenate([np.zeros(k), lam[~zero]])
    return EigenBasis(q=q_out, lam=lam_out, zero_mult=k)


# ---------------------------------------------------------------------------
# Kronecker matvec
# ---------------------------------------------------------------------------

def kron_matvec(factors, v) -> np.ndarray:
    """Apply (Kron_l A_l) to a vector in d reshape-multiply passes.

    Factors may be rectangular (m_l x n_l); the input length must equal
    prod(n_l) and the output has length prod(m_l). Cost is one
    (m_l x n_l) by (n_l x n/n_l) matrix product per dimension, applied
    last factor first.
    """
    mats = [np.asarray(A, dtype=float) for A in factors]
    if not mats:
        raise ShapeError("at least one factor is required")
    for A in mats:
        if A.ndim != 2:
            raise ShapeError(f"factors must be matrices, got shape {A.shape}")
    in_sizes = [A.shape[1] for A in mats]
    v = np.asarray(v, dtype=float).ravel()
    n = int(np.prod(in_sizes))
    if v.shape[0] != n:
        raise ShapeError(f"vector length {v.shape[0]} does not match grid size {n}")
    x = v.reshape(in_sizes)
    for axis in reversed(range(len(mats))):
        A = mats[axis]
        x = np.moveaxis(x, axis, -1)
        lead = x.shape[:-1]
        x = x.reshape(-1, A.shape[1]) @ A.T
        x = np.moveaxis(x.reshape(*lead, A.shape[0]), -1, axis)
    return x.ravel()


# ---------------------------------------------------------------------------
# model diagonal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelDiagonal:
    """Diagonal of the model Gram in the shared Kronecker eigenbasis."""

    d_vec: np.ndarray

    def __post_init__(self):
        self.d_vec.setflags(write=False)

    @property
    def n(self) -> int:
        return self.d_vec.shape[0]


def ones_eigenvalues(n: int) -> np.ndarray:
    """Eigenvalues of the all-ones n x n matrix in a basis whose first
    vector is 1/sqrt(n): diag(n, 0, ..., 0)."""
    a = np.zeros(n)
    a[0] = float(n)
    return a


def assemble_model_diagonal(tc: TermCollection, bases, hp: HyperParams) -> ModelDiagonal:
    """Assemble D = alpha0^2 * sum over terms of Kron_l d_l directly on
    diagonal vectors, where d_l = alpha_l^2 * lam_l inside a term and the
    all-ones eigenvalue vector outside it. Cost O(n * #terms)."""
    require_valid(tc)
    if len(bases) != tc.d:
        raise ShapeError(f"expected {tc.d} eigenbases, got {len(bases)}")
    if len(hp.alpha) != tc.d:
        raise ShapeError(f"expected {tc.d} per-dimension scales, got {len(hp.alpha)}")
    ones_vecs = [ones_eigenvalues(b.n) for b in bases]
    scaled = [hp.alpha[l] ** 2 * bases[l].lam for l in range(tc.d)]
    total = None
    for term in tc.terms:
        vecs = [scaled[l - 1] if l in term else ones_vecs[l - 1] for l in range(1, tc.d + 1)]
        part = reduce(np.kron, vecs)
        total = part if total is None else total + part
    d_vec = hp.alpha0 ** 2 * total
    if not np.isfinite(d_vec).all():
        raise NumericError("model diagonal contains non-finite entries")
    if d_vec.min() < 0.0:
        # eigenvalues are clamped non-negative upstream, so this is a bug trap
        raise NotPSDError(f"model diagonal has negative entry {d_vec.min():.3e}")
    return ModelDiagonal(d_vec=d_vec)


# ---------------------------------------------------------------------------
# marginal-covariance operations
# ---------------------------------------------------------------------------

def _check_sigma2(sigma2: float) -> float:
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise ConfigError(f"sigma2 must be positive and finite, got {sigma2}")
    return float(sigma2)


def logdet_marginal(diag: ModelDiagonal, sigma2: float) -> float:
    """log det(K + sigma^2 I) = sum_i log(d_i + sigma^2)."""
    sigma2 = _check_sigma2(sigma2)
    val = float(np.sum(np.log(diag.d_vec + sigma2)))
    if not np.isfinite(val):
        raise NumericError(f"non-finite log-determinant with sigma2={sigma2}")
    return val


def _basis_matvec(bases, v, transpose: bool) -> np.ndarray:
    factors = [b.q.T if transpose else b.q for b in bases]
    return kron_matvec(factors, v)


def solve_marginal(bases, diag: ModelDiagonal, sigma2: float, v) -> np.ndarray:
    """(K + sigma^2 I)^{-1} v = Q (D + sigma^2)^{-1} Q^T v, two Kronecker
    matvecs and one elementwise divide."""
    sigma2 = _check_sigma2(sigma2)
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] != diag.n:
        raise ShapeError(f"vector length {v.shape[0]} does not match n = {diag.n}")
    w = _basis_matvec(bases, v, transpose=True)
    w = w / (diag.d_vec + sigma2)
    return _basis_matvec(bases, w, transpose=False)


def mult_marginal(bases, diag: ModelDiagonal, sigma2: float, v) -> np.ndarray:
    """(K + sigma^2 I) v, the forward analogue of solve_marginal."""
    sigma2 = _check_sigma2(sigma2)
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] != diag.n:
        raise ShapeError(f"vector length {v.shape[0]} does not match n = {diag.n}")
    w = _basis_matvec(bases, v, transpose=True)
    w = w * (diag.d_vec + sigma2)
    return _basis_matvec(bases, w, transpose=False)
