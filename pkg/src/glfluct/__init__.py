"""Fluctuations of trace polynomials in (r, s)-Brownian motions on GL_N."""
from .trace_algebra import Letter, ParseError, TracePoly, conjugate, evaluate, format_poly, parse
from .intertwine import (
    RSParams,
    apply_D,
    apply_L,
    build_basis,
    closure_basis,
    gamma,
    heat_expectation,
    laplacian_parts_oracle,
    operator_matrix,
)
from .covariance import (
    GaussianField,
    SigmaResult,
    build_field,
    exact_fluctuation_moment,
    gamma_tilde,
    sample_gaussian_field,
    sigma_closed_poly,
    sigma_direct,
    sigma_free,
    wick_moment,
)

__version__ = "0.1.0"

__all__ = [
    "Letter", "ParseError", "TracePoly", "conjugate", "evaluate", "format_poly", "parse",
    "RSParams", "apply_D", "apply_L", "build_basis", "closure_basis", "gamma", "heat_expectation",
    "laplacian_parts_oracle", "operator_matrix",
    "GaussianField", "SigmaResult", "build_field", "exact_fluctuation_moment", "gamma_tilde",
    "sample_gaussian_field", "sigma_closed_poly", "sigma_direct", "sigma_free", "wick_moment",
]
