"""Base kernel families with Gram-level centring and squaring.

Point sets are float arrays of shape (n, p); 1-D arrays are read as n
scalar points. Centring is always empirical: the uniform distribution on
the training points, applied at the Gram level as K_c = C K C with
C = I - (1/n) 1 1^T. Squaring is the data-dependent square K_sq = K K and
is applied after centring, so a centred Gram stays centred. Cross blocks
between query and training points are centred against the *training*
points and, when squared, are multiplied by the processed training Gram,
which keeps query-at-training-point columns consistent with the Gram.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.special import gamma as gamma_fn, kv

from .errors import ConfigError, NumericError, ShapeError


class KernelFamily(str, Enum):
    SE = "se"
    FBM = "fbm"
    MATERN = "matern"
    PERIODIC = "periodic"
    POLYNOMIAL = "polynomial"
    CONSTANT = "constant"


@dataclass(frozen=True)
class KernelSpec:
    """Configuration of one base kernel.

    Parameters
    ----------
    family : KernelFamily or str
        One of "se", "fbm", "matern", "periodic", "polynomial", "constant".
    alpha : float
        Scale parameter; every kernel value carries a factor alpha**2.
    rho : float
        Length scale (se, matern, periodic).
    gamma : float
        Roughness exponent of the fractional Brownian motion kernel,
        0 < gamma < 1; gamma = 0.5 is standard Brownian motion.
    nu : float
        Matern smoothness.
    period : float
        Period of the periodic kernel.
    degree : int
        Degree of the polynomial kernel (>= 1).
    offset : float
        Additive offset c of the polynomial kernel (>= 0).
    centred : bool
        Centre Grams and cross blocks empirically over the training points.
    squared : bool
        Square the (already centred, if requested) Gram: K_sq = K K.
    """

    family: KernelFamily
    alpha: float = 1.0
    rho: float = 1.0
    gamma: float = 0.5
    nu: float = 1.5
    period: float = 1.0
    degree: int = 1
    offset: float = 0.0
    centred: bool = False
    squared: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha must be positive and finite, got {self.alpha}")
        fam = self.family
        if fam in (KernelFamily.SE, KernelFamily.MATERN, KernelFamily.PERIODIC):
            if not (np.isfinite(self.rho) and self.rho > 0):
                raise ConfigError(f"rho must be positive for {fam.value}, got {self.rho}")
        if fam is KernelFamily.FBM and not (0.0 < self.gamma < 1.0):
            raise ConfigError(f"fbm gamma must lie in (0, 1), got {self.gamma}")
        if fam is KernelFamily.MATERN and not (np.isfinite(self.nu) and self.nu > 0):
            raise ConfigError(f"matern nu must be positive, got {self.nu}")
        if fam is KernelFamily.PERIODIC and not (np.isfinite(self.period) and self.period > 0):
            raise ConfigError(f"period must be positive, got {self.period}")
        if fam is KernelFamily.POLYNOMIAL:
            if int(self.degree) != self.degree or self.degree < 1:
                raise ConfigError(f"polynomial degree must be an integer >= 1, got {self.degree}")
            if not (np.isfinite(self.offset) and self.offset >= 0):
                raise ConfigError(f"polynomial offset must be >= 0, got {self.offset}")


@dataclass(frozen=True)
class GramMatrix:
    """A Gram matrix together with the flags it was built under."""

    values: np.ndarray
    centred: bool
    spec: KernelSpec

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# point handling
# ---------------------------------------------------------------------------

def as_points(x) -> np.ndarray:
    """Coerce a point set to a float array of shape (n, p)."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a[:, None]
    elif a.ndim != 2:
        raise ShapeError(f"point set must be at most 2-D, got shape {a.shape}")
    if a.shape[0] == 0:
        raise ShapeError("point set must contain at least one point")
    if not np.isfinite(a).all():
        raise NumericError("point set contains non-finite coordinates")
    return a


def _check_pair(X: np.ndarray, Y: np.ndarray):
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(
            f"point sets have incompatible coordinate dimensions {X.shape[1]} and {Y.shape[1]}"
        )


def _pairwise_dist(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    xx = np.sum(X * X, axis=1)
    yy = np.sum(Y * Y, axis=1)
    d2 = xx[:, None] + yy[None, :] - 2.0 * (X @ Y.T)
    return np.sqrt(np.maximum(d2, 0.0))


def _check_finite(K: np.ndarray, context: str):
    if np.isfinite(K).all():
        return
    flat = np.argmin(np.isfinite(K))  # first non-finite entry
    i, j = np.unravel_index(flat, K.shape)
    raise NumericError(f"non-finite kernel value at point pair ({i}, {j}) in {context}")


# ---------------------------------------------------------------------------
# raw kernel evaluation
# ---------------------------------------------------------------------------

def _raw_cross(spec: KernelSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Raw kernel block k(x_i, y_j), no centring or squaring."""
    with np.errstate(over="ignore", invalid="ignore"):
        K = _raw_cross_values(spec, X, Y)
    _check_finite(K, f"{spec.family.value} kernel")
    return K


def _raw_cross_values(spec: KernelSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    a2 = spec.alpha ** 2
    fam = spec.family
    if fam is KernelFamily.CONSTANT:
        K = np.full((X.shape[0], Y.shape[0]), a2)
    elif fam is KernelFamily.SE:
        d = _pairwise_dist(X, Y)
        K = a2 * np.exp(-(d * d) / (2.0 * spec.rho ** 2))
    elif fam is KernelFamily.FBM:
        g2 = 2.0 * spec.gamma
        xn = np.sum(X * X, axis=1) ** spec.gamma  # |x|^(2 gamma)
        yn = np.sum(Y * Y, axis=1) ** spec.gamma
        d = _pairwise_dist(X, Y)
        K = 0.5 * a2 * (xn[:, None] + yn[None, :] - d ** g2)
    elif fam is KernelFamily.MATERN:
        d = _pairwise_dist(X, Y)
        z = np.sqrt(2.0 * spec.nu) * d / spec.rho
        K = np.full_like(z, a2)
        pos = z > 1e-10  # z -> 0 limit is alpha^2
        zp = z[pos]
        K[pos] = a2 * (2.0 ** (1.0 - spec.nu) / gamma_fn(spec.nu)) * zp ** spec.nu * kv(spec.nu, zp)
    elif fam is KernelFamily.PERIODIC:
        d = _pairwise_dist(X, Y)
        K = a2 * np.exp(-2.0 * np.sin(np.pi * d / spec.period) ** 2 / spec.rho ** 2)
    elif fam is KernelFamily.POLYNOMIAL:
        K = a2 * (X @ Y.T + spec.offset) ** spec.degree
    else:  # pragma: no cover
        raise ConfigError(f"unhandled kernel family {fam}")
    return K


def _raw_diag(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    """Raw k(x, x) per point, cheaper than the full block diagonal."""
    a2 = spec.alpha ** 2
    fam = spec.family
    if fam is KernelFamily.FBM:
        return a2 * np.sum(X * X, axis=1) ** spec.gamma
    if fam is KernelFamily.POLYNOMIAL:
        return a2 * (np.sum(X * X, axis=1) + spec.offset) ** spec.degree
    return np.full(X.shape[0], a2)


def eval_kernel(spec: KernelSpec, x, y) -> float:
    """Evaluate the raw kernel at a single pair of points.

    Centred or squared specs have no pointwise value (both constructions
    are Gram-level and depend on the training set), so they are rejected.
    """
    if spec.centred or spec.squared:
        raise ConfigError("eval_kernel is defined for raw kernels only; build a Gram instead")
    X = np.asarray(x, dtype=float).reshape(1, -1)
    Y = np.asarray(y, dtype=float).reshape(1, -1)
    _check_pair(X, Y)
    return float(_raw_cross(spec, X, Y)[0, 0])


# ---------------------------------------------------------------------------
# Gram construction, centring, squaring
# ---------------------------------------------------------------------------

def _centre_square(K: np.ndarray) -> np.ndarray:
    rm = K.mean(axis=1)
    C = K - rm[:, None] - rm[None, :] + K.mean()
    return 0.5 * (C + C.T)


def gram(spec: KernelSpec, points) -> GramMatrix:
    """Build the Gram matrix of a kernel spec on a point set.

    Centring (if requested) and squaring (if requested) are applied in
    that order, so `squared` means the square of the centred matrix.
    """
    X = as_points(points)
    K = _raw_cross(spec, X, X)
    K = 0.5 * (K + K.T)  # kill float asymmetry from BLAS
    if spec.centred:
        K = _centre_square(K)
    if spec.squared:
        K = K @ K
        K = 0.5 * (K + K.T)
    _check_finite(K, "gram")
    return GramMatrix(values=K, centred=spec.centred, spec=spec)


def centre_gram(g: GramMatrix) -> GramMatrix:
    """Empirically centre a Gram matrix: K_c = C K C."""
    if g.centred:
        return g
    return GramMatrix(values=_centre_square(np.asarray(g.values)), centred=True, spec=g.spec)


def square_gram(g: GramMatrix) -> GramMatrix:
    """Square a Gram matrix entrywise in the operator sense: K_sq = K K.

    Squaring preserves centring: if K 1 = 0 then (K K) 1 = 0.
    """
    V = np.asarray(g.values)
    S = V @ V
    return GramMatrix(values=0.5 * (S + S.T), centred=g.centred, spec=g.spec)


# ---------------------------------------------------------------------------
# cross blocks against a training set
# ---------------------------------------------------------------------------

def cross_gram(spec: KernelSpec, queries, training) -> np.ndarray:
    """Processed kernel block k(x*, x_i), shape (m, n).

    Centring subtracts the query row mean over training and the training
    column mean, and adds back the training grand mean. For a squared
    spec, the centred block is multiplied by the processed training
    Gram, matching the data-dependent square on training columns.
    """
    Q = as_points(queries)
    T = as_points(training)
    _check_pair(Q, T)
    Kqt = _raw_cross(spec, Q, T)
    if spec.centred:
        Ktt = _raw_cross(spec, T, T)
        Kqt = Kqt - Kqt.mean(axis=1)[:, None] - Ktt.mean(axis=0)[None, :] + Ktt.mean()
    if spec.squared:
        Ktt_proc = gram(replace(spec, squared=False), T).values
        Kqt = Kqt @ Ktt_proc
    _check_finite(Kqt, "cross_gram")
    return Kqt


def cross_vector(spec: KernelSpec, x_star, training) -> np.ndarray:
    """Processed cross vector of a single query point, shape (n,)."""
    T = as_points(training)
    Q = np.asarray(x_star, dtype=float).reshape(1, -1)
    return cross_gram(spec, Q, T)[0]


def query_block(spec: KernelSpec, queries, training) -> np.ndarray:
    """Processed kernel block among query points, centred against training.

    For squared specs k_sq(x*, x*') = sum_i k_c(x*, x_i) k_c(x*', x_i),
    i.e. the centred cross block times its own transpose.
    """
    Q = as_points(queries)
    T = as_points(training)
    _check_pair(Q, T)
    Kqq = _raw_cross(spec, Q, Q)
    Kqq = 0.5 * (Kqq + Kqq.T)
    Kqt_c = _raw_cross(spec, Q, T)
    if spec.centred:
        Ktt = _raw_cross(spec, T, T)
        rm = Kqt_c.mean(axis=1)
        Kqq = Kqq - rm[:, None] - rm[None, :] + Ktt.mean()
        Kqt_c = Kqt_c - rm[:, None] - Ktt.mean(axis=0)[None, :] + Ktt.mean()
    if spec.squared:
        Kqq = Kqt_c @ Kqt_c.T
        Kqq = 0.5 * (Kqq + Kqq.T)
    _check_finite(Kqq, "query_block")
    return Kqq


def kernel_diag(spec: KernelSpec, queries, training) -> np.ndarray:
    """Processed k(x*, x*) per query point, shape (m,)."""
    Q = as_points(queries)
    T = as_points(training)
    _check_pair(Q, T)
    if spec.squared:
        # centring (if any) happens inside cross_gram before squaring
        C = cross_gram(replace(spec, squared=False), Q, T)
        return np.sum(C * C, axis=1)
    diag = _raw_diag(spec, Q)
    if spec.centred:
        Kqt = _raw_cross(spec, Q, T)
        Ktt = _raw_cross(spec, T, T)
        diag = diag - 2.0 * Kqt.mean(axis=1) + Ktt.mean()
    return diag
