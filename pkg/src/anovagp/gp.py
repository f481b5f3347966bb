"""Gaussian-process regression on grids with additive Kronecker structure.

A model is defined by per-dimension grid inputs, per-dimension kernel
specs (built at unit scale; all scaling lives in the hyperparameters),
a term collection, and positive scales (alpha0, alpha_l, sigma). The
per-dimension centred Grams are eigendecomposed once per workspace; every
likelihood evaluation, solve, and posterior query then runs through the
shared Kronecker eigenbasis in O(n * sum_l n_l) time.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import kernels, kron
from .anova import (
    HyperParams,
    ModelStructure,
    TermCollection,
    format_term,
    free_parameter_names,
    parse_term,
    require_valid,
)
from .errors import (
    AnovaGPError,
    ConfigError,
    NotPSDError,
    NumericError,
    ShapeError,
    UnknownTermError,
)
from .kernels import KernelSpec

logger = logging.getLogger(__name__)

LN_2PI = math.log(2.0 * math.pi)

EXPORT_FORMAT = "anovagp-model"
EXPORT_VERSION = 1


@dataclass(frozen=True)
class ModelState:
    """Immutable description of one additive grid model.

    inputs: per-dimension point sets, shape (n_l,) or (n_l, p_l).
    specs: per-dimension kernels at unit alpha (scales live in hp);
    specs of dimensions used in any term must be centred.
    """

    inputs: tuple[np.ndarray, ...]
    specs: tuple[KernelSpec, ...]
    terms: TermCollection
    hp: HyperParams

    def __post_init__(self):
        pts = tuple(kernels.as_points(x) for x in self.inputs)
        object.__setattr__(self, "inputs", pts)
        object.__setattr__(self, "specs", tuple(self.specs))
        d = self.terms.d
        if len(pts) != d or len(self.specs) != d or len(self.hp.alpha) != d:
            raise ShapeError(
                f"inputs ({len(pts)}), specs ({len(self.specs)}), alpha ({len(self.hp.alpha)}) "
                f"must all have length d = {d}"
            )
        for l in self.terms.active_dims():
            if not self.specs[l - 1].centred:
                raise ConfigError(f"kernel for dimension {l} must be centred (it appears in a term)")
        for l, spec in enumerate(self.specs, start=1):
            if spec.alpha != 1.0:
                raise ConfigError(
                    f"kernel for dimension {l} has alpha={spec.alpha}; model kernels are built "
                    "at unit scale, per-dimension scales live in HyperParams"
                )

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(x.shape[0] for x in self.inputs)

    @property
    def n(self) -> int:
        return int(np.prod(self.sizes))


class Workspace:
    """Per-dimension Grams and eigenbases, computed once and reused across
    hyperparameter values; holds a small cache of model diagonals."""

    def __init__(self, ms: ModelState):
        require_valid(ms.terms)
        self.state = ms
        self.grams = [kernels.gram(spec, x) for spec, x in zip(ms.specs, ms.inputs)]
        # inactive dimensions may carry uncentred kernels; their Gram never
        # enters the model, but the shared basis still needs 1/sqrt(n) first
        active = set(ms.terms.active_dims())
        prepared = [
            g if (l in active or g.centred) else kernels.centre_gram(g)
            for l, g in enumerate(self.grams, start=1)
        ]
        self.bases = [kron.eigendecompose_centred(g) for g in prepared]
        self._diag_cache: dict[tuple, kron.ModelDiagonal] = {}

    def diagonal(self, hp: HyperParams) -> kron.ModelDiagonal:
        key = (hp.alpha0, hp.alpha)
        hit = self._diag_cache.get(key)
        if hit is not None:
            return hit
        diag = kron.assemble_model_diagonal(self.state.terms, self.bases, hp)
        if len(self._diag_cache) >= 128:
            self._diag_cache.pop(next(iter(self._diag_cache)))
        self._diag_cache[key] = diag
        return diag


@dataclass(frozen=True)
class FitReport:
    iterations: int
    n_evals: int
    converged: bool
    wall_time: float
    residual: float
    message: str = ""


@dataclass(frozen=True)
class FittedModel:
    state: ModelState
    workspace: Workspace
    diag: kron.ModelDiagonal
    w: np.ndarray
    logml: float
    report: FitReport


@dataclass
class FitConfig:
    max_iter: int = 500
    tol: float = 1e-8
    fd_step: float = 1e-5
    bound_span: float = 15.0
    engine: str = "structured"
    init: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.engine not in ("structured", "dense"):
            raise ConfigError(f"engine must be 'structured' or 'dense', got {self.engine!r}")
        if self.max_iter < 1 or self.tol <= 0 or self.fd_step <= 0 or self.bound_span <= 0:
            raise ConfigError("max_iter, tol, fd_step, bound_span must be positive")


def _check_y(ms: ModelState, y) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != ms.n:
        raise ShapeError(f"y has length {y.shape[0]}, grid has n = {ms.n}")
    if not np.isfinite(y).all():
        raise NumericError("y contains non-finite values (impute before fitting)")
    return y


# ---------------------------------------------------------------------------
# marginal likelihood
# ---------------------------------------------------------------------------

def _logml_from_projection(qty: np.ndarray, d_vec: np.ndarray, sigma2: float) -> float:
    denom = d_vec + sigma2
    quad = float(np.sum(qty * qty / denom))
    logdet = float(np.sum(np.log(denom)))
    return -0.5 * quad - 0.5 * logdet - 0.5 * qty.shape[0] * LN_2PI


def log_marginal_likelihood(ms: ModelState, y, workspace: Workspace | None = None) -> float:
    """Gaussian log marginal likelihood of y under N(0, K + sigma^2 I)."""
    ws = workspace if workspace is not None else Workspace(ms)
    y = _check_y(ms, y)
    diag = ws.diagonal(ms.hp)
    sigma2 = ms.hp.sigma ** 2
    w = kron.solve_marginal(ws.bases, diag, sigma2, y)
    quad = float(y @ w)
    logdet = kron.logdet_marginal(diag, sigma2)
    val = -0.5 * quad - 0.5 * logdet - 0.5 * ms.n * LN_2PI
    if not np.isfinite(val):
        raise NumericError(f"non-finite log marginal likelihood at hyperparameters {ms.hp}")
    return val


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _default_init(ms: ModelState, y: np.ndarray) -> dict[str, float]:
    s = float(np.std(y))
    # constant data has sd at rounding level, not exactly zero
    if not np.isfinite(s) or s <= 1e-12 * max(abs(float(np.mean(y))), 1.0):
        s = max(abs(float(np.mean(y))), 1.0)
    names = free_parameter_names(ms.terms)
    init = {}
    for name in names:
        if name == "sigma":
            init[name] = s / 2.0
        elif name == "alpha0":
            init[name] = s
        elif ms.terms.mode is ModelStructure.TENSOR_ONLY:
            init[name] = s  # the single interaction scale carries sd(y)
        else:
            init[name] = 1.0
    return init


def _unpack(ms: ModelState, names: list[str], values) -> HyperParams:
    alpha0 = 1.0
    alpha = [1.0] * ms.terms.d
    sigma = 1.0
    for name, v in zip(names, values):
        if name == "alpha0":
            alpha0 = v
        elif name == "sigma":
            sigma = v
        else:
            alpha[int(name[5:]) - 1] = v
    return HyperParams(alpha0=alpha0, alpha=tuple(alpha), sigma=sigma)


def fit(ms: ModelState, y, cfg: FitConfig | None = None) -> FittedModel:
    """Empirical-Bayes fit: maximize the log marginal likelihood over the
    log-transformed free scales with L-BFGS-B and central finite-difference
    gradients (step fd_step on the log scale).

    The returned logml never degrades below the value at the initial
    hyperparameters: the best evaluated iterate is kept.
    """
    cfg = cfg or FitConfig()
    ws = Workspace(ms)
    y = _check_y(ms, y)
    t0 = time.perf_counter()

    names = free_parameter_names(ms.terms)
    init = _default_init(ms, y)
    for key, val in cfg.init.items():
        if key not in init:
            raise ConfigError(f"unknown or fixed parameter {key!r}; free parameters: {names}")
        if not (np.isfinite(val) and val > 0):
            raise ConfigError(f"initial value for {key} must be positive, got {val}")
        init[key] = float(val)
    x0 = np.log([init[name] for name in names])
    bounds = [(x - cfg.bound_span, x + cfg.bound_span) for x in x0]

    if cfg.engine == "dense":
        from . import oracle

        def raw_logml(hp: HyperParams) -> float:
            return oracle.dense_logml(replace(ms, hp=hp), y)
    else:
        qty = kron.kron_matvec([b.q.T for b in ws.bases], y)

        def raw_logml(hp: HyperParams) -> float:
            return _logml_from_projection(qty, ws.diagonal(hp).d_vec, hp.sigma ** 2)

    cache: dict[bytes, float] = {}
    best = {"f": math.inf, "x": x0.copy()}
    evals = {"count": 0}

    def neg_logml(x: np.ndarray) -> float:
        key = x.tobytes()
        hit = cache.get(key)
        if hit is not None:
            return hit
        hp = _unpack(ms, names, np.exp(x))
        val = raw_logml(hp)
        evals["count"] += 1
        f = -val if np.isfinite(val) else math.inf
        if f < best["f"]:
            best["f"] = f
            best["x"] = x.copy()
        if len(cache) >= 4096:
            cache.clear()
        cache[key] = f
        return f

    f0 = neg_logml(x0)
    if not np.isfinite(f0):
        raise NumericError(
            f"non-finite log marginal likelihood at initial hyperparameters "
            f"{_unpack(ms, names, np.exp(x0))}"
        )

    h = cfg.fd_step

    def grad(x: np.ndarray) -> np.ndarray:
        g = np.empty_like(x)
        for i in range(x.shape[0]):
            xp = x.copy()
            xm = x.copy()
            xp[i] += h
            xm[i] -= h
            g[i] = (neg_logml(xp) - neg_logml(xm)) / (2.0 * h)
        return g

    res = minimize(
        neg_logml,
        x0,
        jac=grad,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": cfg.max_iter, "ftol": cfg.tol, "gtol": 1e-12},
    )

    hp_best = _unpack(ms, names, np.exp(best["x"]))
    state = replace(ms, hp=hp_best)
    diag = ws.diagonal(hp_best)
    sigma2 = hp_best.sigma ** 2
    w = kron.solve_marginal(ws.bases, diag, sigma2, y)
    logml = log_marginal_likelihood(state, y, workspace=ws)
    resid = float(np.linalg.norm(kron.mult_marginal(ws.bases, diag, sigma2, w) - y))
    rel = resid / max(float(np.linalg.norm(y)), 1e-30)
    report = FitReport(
        iterations=int(res.nit),
        n_evals=evals["count"],
        converged=bool(res.success),
        wall_time=time.perf_counter() - t0,
        residual=rel,
        message=str(res.message),
    )
    ws.state = state
    return FittedModel(state=state, workspace=ws, diag=diag, w=w, logml=logml, report=report)


def grid_search_shape(ms: ModelState, y, dim: int, candidates, cfg: FitConfig | None = None):
    """Fit once per candidate roughness exponent for one dimension and pick
    the best marginal likelihood. Failed candidates are recorded in the
    returned table and excluded from the argmax.

    Returns (best_gamma, rows); rows have gamma, logml, converged, error.
    """
    if not 1 <= dim <= ms.terms.d:
        raise ConfigError(f"dim must be in 1..{ms.terms.d}, got {dim}")
    cands = [float(c) for c in candidates]
    if not cands:
        raise ConfigError("at least one candidate value is required")
    for c in cands:
        if not 0.0 < c < 1.0:
            raise ConfigError(f"candidate roughness {c} outside (0, 1)")
    rows = []
    for c in cands:
        specs = list(ms.specs)
        specs[dim - 1] = replace(specs[dim - 1], gamma=c)
        trial = replace(ms, specs=tuple(specs))
        try:
            fm = fit(trial, y, cfg)
            rows.append({"gamma": c, "logml": fm.logml, "converged": fm.report.converged, "error": None})
        except AnovaGPError as exc:
            logger.warning("grid search candidate %s failed: %s", c, exc)
            rows.append({"gamma": c, "logml": None, "converged": False, "error": str(exc)})
    ok = [r for r in rows if r["logml"] is not None]
    if not ok:
        raise NumericError("every grid-search candidate failed; see the returned table")
    best = max(ok, key=lambda r: r["logml"])
    return best["gamma"], rows


# ---------------------------------------------------------------------------
# posterior queries
# ---------------------------------------------------------------------------

def _normalize_term(fm: FittedModel, term) -> tuple[int, ...]:
    t = tuple(sorted(int(l) for l in term)) if term else ()
    if t and t not in fm.state.terms.terms:
        raise UnknownTermError(
            f"term {format_term(t)} is not part of this model "
            f"(terms: {', '.join(fm.state.terms.term_strings())})"
        )
    return t


def _term_scale(hp: HyperParams, term) -> float:
    s = hp.alpha0 ** 2
    for l in term:
        s *= hp.alpha[l - 1] ** 2
    return s


def _query_points(fm: FittedModel, dims, query):
    """Per-dimension query arrays for the given dims (ascending)."""
    state = fm.state
    if query is None:
        return [state.inputs[l - 1] for l in dims]
    if isinstance(query, dict):
        missing = [l for l in dims if l not in query]
        if missing:
            raise ConfigError(f"query is missing inputs for dimensions {missing}")
        return [kernels.as_points(query[l]) for l in dims]
    seq = list(query)
    if len(seq) != len(dims):
        raise ShapeError(f"query must provide {len(dims)} point sets, got {len(seq)}")
    return [kernels.as_points(q) for q in seq]


def term_posterior_mean(fm: FittedModel, term, query=None) -> np.ndarray:
    """Posterior mean of one component function on a query sub-grid.

    For term S the mean is (prior scale) * cross-Gram rows Kron-applied to
    the weight vector w; dimensions outside S collapse through the ones
    vector. Returns an array shaped by the per-dimension query sizes of S;
    the constant term returns a scalar array alpha0^2 * sum(w).
    """
    t = _normalize_term(fm, term)
    hp = fm.state.hp
    if not t:
        return np.asarray(hp.alpha0 ** 2 * float(np.sum(fm.w)))
    qs = _query_points(fm, t, query)
    factors = []
    qi = 0
    for l in range(1, fm.state.terms.d + 1):
        if l in t:
            factors.append(kernels.cross_gram(fm.state.specs[l - 1], qs[qi], fm.state.inputs[l - 1]))
            qi += 1
        else:
            factors.append(np.ones((1, fm.state.sizes[l - 1])))
    out = kron.kron_matvec(factors, fm.w)
    shape = tuple(q.shape[0] for q in qs)
    return _term_scale(hp, t) * out.reshape(shape)


def _cross_rows(fm: FittedModel, dims, qs):
    """Per-dimension cross-Gram blocks for dims (ascending), full query sets."""
    return [
        kernels.cross_gram(fm.state.specs[l - 1], q, fm.state.inputs[l - 1])
        for l, q in zip(dims, qs)
    ]


def _term_cross_vector(fm: FittedModel, term, row_blocks, idx) -> np.ndarray:
    """Length-n covariance vector of one term at one query point, built as a
    Kronecker product of per-dimension rows (ones outside the term)."""
    parts = []
    for l in range(1, fm.state.terms.d + 1):
        if l in term:
            parts.append(row_blocks[term.index(l)][idx[term.index(l)]])
        else:
            parts.append(np.ones(fm.state.sizes[l - 1]))
    vec = parts[0]
    for p in parts[1:]:
        vec = np.kron(vec, p)
    return _term_scale(fm.state.hp, term) * vec


def term_posterior_variance(fm: FittedModel, term, points=None) -> np.ndarray:
    """Pointwise posterior variance of one component at explicit points.

    points: per-dimension arrays (aligned rows) for the dimensions of the
    term, ascending; None evaluates at the training inputs of those
    dimensions aligned by index (requires equal sizes). Each point costs
    one structured solve. Negative round-off is clamped to zero.
    """
    t = _normalize_term(fm, term)
    hp = fm.state.hp
    sigma2 = hp.sigma ** 2
    scale = _term_scale(hp, t)
    ws = fm.workspace
    if not t:
        ones = np.ones(fm.state.n)
        vec = hp.alpha0 ** 2 * ones
        quad = float(vec @ kron.solve_marginal(ws.bases, fm.diag, sigma2, vec))
        return np.asarray(max(hp.alpha0 ** 2 - quad, 0.0))
    qs = _query_points(fm, t, points)
    m = qs[0].shape[0]
    for q in qs:
        if q.shape[0] != m:
            raise ShapeError("per-dimension point arrays must have matching lengths")
    rows = _cross_rows(fm, t, qs)
    priors = np.ones(m) * scale
    for j, l in enumerate(t):
        priors *= kernels.kernel_diag(fm.state.specs[l - 1], qs[j], fm.state.inputs[l - 1])
    out = np.empty(m)
    clamped = 0
    for i in range(m):
        vec = _term_cross_vector(fm, t, rows, [i] * len(t))
        quad = float(vec @ kron.solve_marginal(ws.bases, fm.diag, sigma2, vec))
        v = priors[i] - quad
        if v < 0.0:
            clamped += 1
            v = 0.0
        out[i] = v
    if clamped:
        logger.debug("term %s: clamped %d negative variances to zero", format_term(t), clamped)
    return out


def combined_posterior_variance(fm: FittedModel, terms, points_by_dim=None) -> np.ndarray:
    """Pointwise posterior variance of a sum of components, evaluated on
    the product grid of the involved dimensions' query points.

    terms: the components to sum (the constant term as ()). points_by_dim
    maps dimension numbers to query arrays; involved dimensions not
    listed default to their training inputs. The summed covariance vector
    needs one structured solve per grid point, like the single-term case.
    Output shape is the per-dimension point counts in ascending dimension
    order (a scalar array when only the constant term is requested).
    """
    norm = []
    for term in terms:
        t = _normalize_term(fm, term)
        if t in norm:
            raise ConfigError(f"term {format_term(t)} requested twice")
        norm.append(t)
    if not norm:
        raise ConfigError("at least one term is required")
    involved = sorted({l for t in norm for l in t})
    points_by_dim = {int(k): v for k, v in dict(points_by_dim or {}).items()}
    extra = set(points_by_dim) - set(involved)
    if extra:
        raise ConfigError(f"query points given for dimensions {sorted(extra)} "
                          f"not used by the requested terms")
    qs = {}
    for l in involved:
        pts = points_by_dim.get(l)
        qs[l] = kernels.as_points(fm.state.inputs[l - 1] if pts is None else pts)
    shape = tuple(qs[l].shape[0] for l in involved)

    hp = fm.state.hp
    sigma2 = hp.sigma ** 2
    rows = {}
    diags = {}
    for t in norm:
        for l in t:
            if l not in rows:
                rows[l] = kernels.cross_gram(fm.state.specs[l - 1], qs[l], fm.state.inputs[l - 1])
                diags[l] = kernels.kernel_diag(fm.state.specs[l - 1], qs[l], fm.state.inputs[l - 1])

    out = np.empty(shape if shape else (1,))
    clamped = 0
    for flat, idx in enumerate(np.ndindex(shape if shape else (1,))):
        pos = dict(zip(involved, idx))
        vec = np.zeros(fm.state.n)
        prior = 0.0
        for t in norm:
            if not t:
                vec += hp.alpha0 ** 2
                prior += hp.alpha0 ** 2
                continue
            parts = []
            for l in range(1, fm.state.terms.d + 1):
                parts.append(rows[l][pos[l]] if l in t else np.ones(fm.state.sizes[l - 1]))
            v = parts[0]
            for p in parts[1:]:
                v = np.kron(v, p)
            scale = _term_scale(hp, t)
            vec += scale * v
            prior += scale * math.prod(diags[l][pos[l]] for l in t)
        quad = float(vec @ kron.solve_marginal(fm.workspace.bases, fm.diag, sigma2, vec))
        val = prior - quad
        if val < 0.0:
            clamped += 1
            val = 0.0
        out.flat[flat] = val
    if clamped:
        logger.debug("combined effect: clamped %d negative variances to zero", clamped)
    return out.reshape(shape)


def fitted_values(fm: FittedModel) -> np.ndarray:
    """Posterior mean at the training points via the structured shortcut:
    K w = Q D Q^T w, equal to Q (D / (D + sigma^2)) Q^T y. Flat grid order."""
    bases = fm.workspace.bases
    t = kron.kron_matvec([b.q.T for b in bases], fm.w)
    return kron.kron_matvec([b.q for b in bases], t * fm.diag.d_vec)


def _mean_generic(fm: FittedModel, qs) -> np.ndarray:
    d = fm.state.terms.d
    shape = tuple(q.shape[0] for q in qs)
    total = np.zeros(shape)
    for term in fm.state.terms.terms:
        if not term:
            total += float(term_posterior_mean(fm, ()))
            continue
        sub = term_posterior_mean(fm, term, [qs[l - 1] for l in term])
        expand = [shape[l - 1] if l in term else 1 for l in range(1, d + 1)]
        total += sub.reshape(expand)
    return total


def predict(fm: FittedModel, query=None, include_noise: bool = False):
    """Posterior mean and pointwise variance on a query grid.

    query maps every dimension to its query points (None = the training
    grid, where the structured shortcut is used for the mean). Variance
    always uses the full model kernel at the query point, one structured
    solve per point; include_noise adds sigma^2.
    """
    state = fm.state
    dims = list(range(1, state.terms.d + 1))
    qs = _query_points(fm, dims, query)
    shape = tuple(q.shape[0] for q in qs)
    at_training = all(
        q.shape == x.shape and np.array_equal(q, x) for q, x in zip(qs, state.inputs)
    )
    if at_training:
        means = fitted_values(fm).reshape(shape)
    else:
        means = _mean_generic(fm, qs)

    hp = state.hp
    sigma2 = hp.sigma ** 2
    rows_per_term = {
        term: _cross_rows(fm, term, [qs[l - 1] for l in term])
        for term in state.terms.terms
        if term
    }
    diag_per_term = {
        term: [
            kernels.kernel_diag(state.specs[l - 1], qs[l - 1], state.inputs[l - 1])
            for l in term
        ]
        for term in state.terms.terms
        if term
    }
    has_const = () in state.terms.terms
    variances = np.empty(shape)
    clamped = 0
    for idx in np.ndindex(shape):
        vec = np.zeros(state.n)
        prior = 0.0
        if has_const:
            vec += hp.alpha0 ** 2
            prior += hp.alpha0 ** 2
        for term, rows in rows_per_term.items():
            sub_idx = [idx[l - 1] for l in term]
            vec += _term_cross_vector(fm, term, rows, sub_idx)
            p = _term_scale(hp, term)
            for j, l in enumerate(term):
                p *= diag_per_term[term][j][idx[l - 1]]
            prior += p
        quad = float(vec @ kron.solve_marginal(fm.workspace.bases, fm.diag, sigma2, vec))
        v = prior - quad
        if v < 0.0:
            clamped += 1
            v = 0.0
        variances[idx] = v
    if clamped:
        logger.debug("predict: clamped %d negative variances to zero", clamped)
    if include_noise:
        variances = variances + sigma2
    return means, variances


# ---------------------------------------------------------------------------
# prior sampling
# ---------------------------------------------------------------------------

def sample_prior(obj, points=None, seed=None) -> np.ndarray:
    """One draw from the zero-mean prior of a kernel spec (on explicit
    points) or of a model state (on its training grid).

    Sampling goes through eigendecomposition square roots with negative
    round-off clamped to zero, so exact degeneracies of the covariance
    (k(0, .) = 0, centred zero sums) are preserved exactly. Model states
    are sampled term by term through the per-dimension factor roots, one
    independent standard normal block per term, which keeps the cost at
    O(n sum n_l) and never materializes the full covariance.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    if isinstance(obj, KernelSpec):
        if points is None:
            raise ConfigError("sampling a kernel spec requires explicit points")
        K = kernels.gram(obj, points).values
        lam, q = np.linalg.eigh(0.5 * (K + K.T))
        lam_max = max(float(lam[-1]), 0.0)
        if float(lam.min()) < -(kron.NEG_EIG_REL * lam_max + 1e-14 * max(np.abs(K).max(), 1e-30)):
            raise NotPSDError(f"prior covariance has eigenvalue {lam.min():.3e}")
        lam = np.clip(lam, 0.0, None)
        z = rng.standard_normal(K.shape[0])
        return q @ (np.sqrt(lam) * z)
    if not isinstance(obj, ModelState):
        raise ConfigError(f"cannot sample from object of type {type(obj).__name__}")

    ws = Workspace(obj)
    sizes = obj.sizes
    f = np.zeros(obj.n)
    for term in obj.terms.terms:
        # factor root: Q sqrt(L) on active dims, the ones column with norm
        # sqrt(n_l) on inactive ones (square root of the all-ones block)
        factors = []
        block = 1
        for l in range(1, obj.terms.d + 1):
            n_l = sizes[l - 1]
            if l in term:
                b = ws.bases[l - 1]
                factors.append(b.q * np.sqrt(b.lam))
                block *= n_l
            else:
                factors.append(np.ones((n_l, 1)))
        scale = obj.hp.alpha0 * math.prod(obj.hp.alpha[l - 1] for l in term)
        z = rng.standard_normal(block)
        f += scale * kron.kron_matvec(factors, z)
    return f


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _spec_to_dict(spec: KernelSpec) -> dict:
    return {
        "family": spec.family.value,
        "alpha": spec.alpha,
        "rho": spec.rho,
        "gamma": spec.gamma,
        "nu": spec.nu,
        "period": spec.period,
        "degree": spec.degree,
        "offset": spec.offset,
        "centred": spec.centred,
        "squared": spec.squared,
    }


def _spec_from_dict(doc: dict) -> KernelSpec:
    return KernelSpec(**doc)


def input_digest(inputs) -> str:
    h = hashlib.sha256()
    for x in inputs:
        a = np.ascontiguousarray(np.asarray(x, dtype=float))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def export_model(fm: FittedModel, include_weights: bool = False) -> dict:
    """JSON-ready description of a fitted model: grid metadata digest,
    kernel specs, terms, hyperparameters, logml, and the fit report.
    Weights are included only on request (they are recomputable from y)."""
    doc = {
        "format": EXPORT_FORMAT,
        "version": EXPORT_VERSION,
        "grid": {
            "sizes": list(fm.state.sizes),
            "n": fm.state.n,
            "input_digest": input_digest(fm.state.inputs),
        },
        "kernels": [_spec_to_dict(s) for s in fm.state.specs],
        "terms": fm.state.terms.term_strings(),
        "mode": fm.state.terms.mode.value,
        "hyperparams": {
            "alpha0": fm.state.hp.alpha0,
            "alpha": list(fm.state.hp.alpha),
            "sigma": fm.state.hp.sigma,
        },
        "logml": fm.logml,
        "report": {
            "iterations": fm.report.iterations,
            "n_evals": fm.report.n_evals,
            "converged": fm.report.converged,
            "wall_time": fm.report.wall_time,
            "residual": fm.report.residual,
            "message": fm.report.message,
        },
    }
    if include_weights:
        doc["weights"] = fm.w.tolist()
    return doc


def model_from_export(doc: dict, inputs, y=None) -> FittedModel:
    """Rebuild a fitted model from an export document and the grid inputs.

    Weights are taken from the document when present, otherwise recomputed
    from y (one structured solve). The stored grid digest must match the
    supplied inputs.
    """
    if doc.get("format") != EXPORT_FORMAT:
        raise ConfigError(f"not a model export document (format={doc.get('format')!r})")
    pts = [kernels.as_points(x) for x in inputs]
    if doc["grid"]["input_digest"] != input_digest(pts):
        raise ConfigError("grid inputs do not match the digest stored in the model export")
    specs = tuple(_spec_from_dict(s) for s in doc["kernels"])
    terms = TermCollection(
        d=len(specs),
        terms=tuple(parse_term(s) for s in doc["terms"]),
        mode=ModelStructure(doc["mode"]),
    )
    hp = HyperParams(
        alpha0=doc["hyperparams"]["alpha0"],
        alpha=tuple(doc["hyperparams"]["alpha"]),
        sigma=doc["hyperparams"]["sigma"],
    )
    ms = ModelState(inputs=tuple(pts), specs=specs, terms=terms, hp=hp)
    ws = Workspace(ms)
    diag = ws.diagonal(hp)
    if "weights" in doc:
        w = np.asarray(doc["weights"], dtype=float)
        if w.shape[0] != ms.n:
            raise ShapeError(f"stored weights have length {w.shape[0]}, grid has n = {ms.n}")
    elif y is not None:
        w = kron.solve_marginal(ws.bases, diag, hp.sigma ** 2, _check_y(ms, y))
    else:
        raise ConfigError("export has no weights; supply y to rebuild them")
    rep = doc.get("report", {})
    report = FitReport(
        iterations=int(rep.get("iterations", 0)),
        n_evals=int(rep.get("n_evals", 0)),
        converged=bool(rep.get("converged", True)),
        wall_time=float(rep.get("wall_time", 0.0)),
        residual=float(rep.get("residual", 0.0)),
        message=str(rep.get("message", "rebuilt from export")),
    )
    return FittedModel(state=ms, workspace=ws, diag=diag, w=w, logml=float(doc["logml"]), report=report)
