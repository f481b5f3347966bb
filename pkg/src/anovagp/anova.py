"""Term collections for additive functional decompositions.

A model over d grid dimensions is a sum of component functions indexed by
subsets of {1, ..., d}: the empty subset is the constant, singletons are
main effects, larger subsets are interactions realised as tensor products
of the per-dimension kernels. Hierarchical collections must be downward
closed (every subset of an included term is included); tensor-only
collections consist of the single full interaction {1, ..., d}.

Terms serialize as strings: "0" is the constant, otherwise 1-based
dimension indices joined by colons, e.g. "1", "2:3", "1:2:3".
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from functools import reduce

import numpy as np

from .errors import ConfigError, ShapeError, SizeError
from .kernels import GramMatrix

Term = tuple[int, ...]

DENSE_LIMIT = 5000


class ModelStructure(str, Enum):
    HIERARCHICAL = "hierarchical"
    TENSOR_ONLY = "tensor_only"


def _canonical_term(term) -> Term:
    dims = tuple(sorted(int(l) for l in term))
    if len(set(dims)) != len(dims):
        raise ConfigError(f"term {term} repeats a dimension")
    if dims and dims[0] < 1:
        raise ConfigError(f"term {term} uses dimension indices below 1")
    return dims


def parse_term(s: str) -> Term:
    """Parse a term string: "0" for the constant, else "l1:l2:...". """
    s = s.strip()
    if s == "0":
        return ()
    try:
        return _canonical_term(int(part) for part in s.split(":"))
    except ValueError as exc:
        raise ConfigError(f"malformed term string {s!r}") from exc


def format_term(term: Term) -> str:
    return "0" if not term else ":".join(str(l) for l in term)


@dataclass(frozen=True)
class TermCollection:
    """An ordered collection of decomposition terms over d dimensions."""

    d: int
    terms: tuple[Term, ...]
    mode: ModelStructure = ModelStructure.HIERARCHICAL

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        object.__setattr__(self, "mode", ModelStructure(self.mode))
        canon = tuple(_canonical_term(t) for t in self.terms)
        if len(set(canon)) != len(canon):
            dupes = sorted({format_term(t) for t in canon if canon.count(t) > 1})
            raise ConfigError(f"duplicate terms: {', '.join(dupes)}")
        for t in canon:
            if t and t[-1] > self.d:
                raise ConfigError(f"term {format_term(t)} exceeds dimension count d={self.d}")
        # canonical order: by interaction order, then lexicographically
        object.__setattr__(self, "terms", tuple(sorted(canon, key=lambda t: (len(t), t))))

    @classmethod
    def from_strings(cls, d: int, strings, mode=ModelStructure.HIERARCHICAL) -> "TermCollection":
        return cls(d=d, terms=tuple(parse_term(s) for s in strings), mode=mode)

    def term_strings(self) -> list[str]:
        return [format_term(t) for t in self.terms]

    def __contains__(self, term) -> bool:
        return _canonical_term(term) in self.terms

    def active_dims(self) -> tuple[int, ...]:
        """Dimensions appearing in at least one non-constant term."""
        return tuple(sorted({l for t in self.terms for l in t}))


@dataclass(frozen=True)
class TermValidation:
    ok: bool
    missing: tuple[Term, ...] = ()
    message: str = ""


def validate_terms(tc: TermCollection) -> TermValidation:
    """Check structural validity; reports violations instead of raising.

    Hierarchical collections must contain the constant term, every
    singleton of every used dimension, and be downward closed. Tensor-only
    collections must be exactly {{1, ..., d}}.
    """
    terms = set(tc.terms)
    if tc.mode is ModelStructure.TENSOR_ONLY:
        full = tuple(range(1, tc.d + 1))
        if terms == {full}:
            return TermValidation(ok=True)
        return TermValidation(
            ok=False,
            missing=(full,) if full not in terms else (),
            message=f"tensor-only collections consist of the single term {format_term(full)}",
        )
    missing: set[Term] = set()
    if () not in terms:
        missing.add(())
    for t in terms:
        for k in range(len(t)):
            for sub in itertools.combinations(t, k):
                if sub not in terms:
                    missing.add(sub)
    if missing:
        ordered = tuple(sorted(missing, key=lambda t: (len(t), t)))
        names = ", ".join(format_term(t) for t in ordered)
        return TermValidation(ok=False, missing=ordered, message=f"missing subset terms: {names}")
    return TermValidation(ok=True)


def require_valid(tc: TermCollection):
    report = validate_terms(tc)
    if not report.ok:
        raise ConfigError(f"invalid term collection: {report.message}")


def saturated(d: int) -> TermCollection:
    """All 2**d subsets of {1, ..., d}."""
    terms = [t for k in range(d + 1) for t in itertools.combinations(range(1, d + 1), k)]
    return TermCollection(d=d, terms=tuple(terms))


def tensor_only(d: int) -> TermCollection:
    return TermCollection(d=d, terms=(tuple(range(1, d + 1)),), mode=ModelStructure.TENSOR_ONLY)


def model_presets(d: int = 3) -> dict[str, TermCollection]:
    """The five standard three-dimensional model structures.

    m1: constant + main effects; m2: + interactions {1,2} and {1,3};
    m3: + interaction {2,3}; m4: saturated; m5: full tensor product only.
    """
    if d != 3:
        raise ConfigError(f"model presets are defined for d=3, got d={d}")
    base = [(), (1,), (2,), (3,)]
    return {
        "m1": TermCollection(3, tuple(base)),
        "m2": TermCollection(3, tuple(base + [(1, 2), (1, 3)])),
        "m3": TermCollection(3, tuple(base + [(1, 2), (1, 3), (2, 3)])),
        "m4": saturated(3),
        "m5": tensor_only(3),
    }


# ---------------------------------------------------------------------------
# hyperparameters and dense assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperParams:
    """Positive scales: alpha0 for the whole model, alpha per dimension,
    sigma for the observation noise."""

    alpha0: float
    alpha: tuple[float, ...]
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        vals = (self.alpha0, *self.alpha, self.sigma)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ConfigError(f"hyperparameters must be positive and finite, got {vals}")

    @classmethod
    def unit(cls, d: int) -> "HyperParams":
        return cls(alpha0=1.0, alpha=(1.0,) * d, sigma=1.0)


def free_parameter_names(tc: TermCollection) -> list[str]:
    """Names of the scales the optimizer may move, in packing order.

    Hierarchical: alpha0, alpha_l for every active dimension, sigma.
    Tensor-only: the single interaction scale alpha1 and sigma (alpha0 and
    the remaining per-dimension scales are redundant and stay fixed at 1).
    """
    if tc.mode is ModelStructure.TENSOR_ONLY:
        return ["alpha1", "sigma"]
    return ["alpha0"] + [f"alpha{l}" for l in tc.active_dims()] + ["sigma"]


def assemble_dense_gram(tc: TermCollection, grams, hp: HyperParams) -> np.ndarray:
    """Materialize the full n x n model Gram (guarded small-n path).

    K = alpha0^2 * sum over terms of the Kronecker product over dimensions
    of alpha_l^2 K_l (centred) when l is in the term, and the all-ones
    matrix otherwise. The constant term is the all-ones n x n matrix.
    """
    require_valid(tc)
    mats = [np.asarray(g.values if isinstance(g, GramMatrix) else g, dtype=float) for g in grams]
    if len(mats) != tc.d:
        raise ShapeError(f"expected {tc.d} per-dimension Grams, got {len(mats)}")
    for l, (g, m) in enumerate(zip(grams, mats), start=1):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"Gram for dimension {l} is not square: shape {m.shape}")
        if isinstance(g, GramMatrix) and not g.centred and l in tc.active_dims():
            raise ConfigError(f"Gram for dimension {l} must be centred")
    if len(hp.alpha) != tc.d:
        raise ShapeError(f"expected {tc.d} per-dimension scales, got {len(hp.alpha)}")
    sizes = [m.shape[0] for m in mats]
    n = int(np.prod(sizes))
    if n > DENSE_LIMIT:
        raise SizeError(f"dense assembly is limited to n <= {DENSE_LIMIT}, got n = {n}")
    K = np.zeros((n, n))
    for term in tc.terms:
        factors = [
            hp.alpha[l - 1] ** 2 * mats[l - 1] if l in term else np.ones((sizes[l - 1], sizes[l - 1]))
            for l in range(1, tc.d + 1)
        ]
        K += reduce(np.kron, factors)
    return hp.alpha0 ** 2 * K
