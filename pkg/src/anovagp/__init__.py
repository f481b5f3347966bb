"""Additive Gaussian-process regression on grid data with hierarchical
interaction structure, evaluated exactly through per-dimension
eigendecompositions in O(n sum n_l) time.
"""

__version__ = "0.1.0"

from .anova import (
    DENSE_LIMIT,
    HyperParams,
    Term,
    TermCollection,
    format_term,
    model_presets,
    parse_term,
    saturated,
    tensor_only,
)
from .errors import (
    AnovaGPError,
    CentringError,
    ConfigError,
    DataError,
    NotPSDError,
    NumericError,
    SizeError,
    UnknownTermError,
)
from .gp import (
    FitConfig,
    FitReport,
    FittedModel,
    ModelState,
    Workspace,
    combined_posterior_variance,
    export_model,
    fit,
    fitted_values,
    grid_search_shape,
    log_marginal_likelihood,
    model_from_export,
    predict,
    sample_prior,
    term_posterior_mean,
    term_posterior_variance,
)
from .griddata import DimensionMap, GridDataset, adjust_dst, impute, ingest
from .kernels import GramMatrix, KernelSpec, cross_gram, gram, kernel_diag
from .kron import EigenBasis, ModelDiagonal, assemble_model_diagonal, eigendecompose_centred, kron_matvec

__all__ = [
    "__version__",
    "AnovaGPError",
    "CentringError",
    "ConfigError",
    "DataError",
    "DENSE_LIMIT",
    "DimensionMap",
    "EigenBasis",
    "FitConfig",
    "FitReport",
    "FittedModel",
    "GramMatrix",
    "GridDataset",
    "HyperParams",
    "KernelSpec",
    "ModelDiagonal",
    "ModelState",
    "NotPSDError",
    "NumericError",
    "SizeError",
    "Term",
    "TermCollection",
    "UnknownTermError",
    "Workspace",
    "adjust_dst",
    "assemble_model_diagonal",
    "combined_posterior_variance",
    "cross_gram",
    "eigendecompose_centred",
    "export_model",
    "fit",
    "fitted_values",
    "format_term",
    "gram",
    "grid_search_shape",
    "impute",
    "ingest",
    "kernel_diag",
    "kron_matvec",
    "log_marginal_likelihood",
    "model_from_export",
    "model_presets",
    "parse_term",
    "predict",
    "sample_prior",
    "saturated",
    "tensor_only",
    "term_posterior_mean",
    "term_posterior_variance",
]
