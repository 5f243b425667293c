"""Non-parametric entropy estimation with k nearest neighbours.

Two estimators are provided: the Kozachenko-Leonenko (KL) estimator, which
assumes a constant density inside each neighbour ball, and the kpN
estimator, which replaces that constant by a Gaussian fitted to the ``p``
nearest neighbours and integrates it over the ball with expectation
propagation.
"""
from ._backend import backend, set_backend, use_numba
from .distributions import (
    DistributionSpec,
    EntropyOracle,
    analytic_entropy,
    analytic_pdf_and_hessian,
    dimension_ramp,
    sample,
    table_one,
)
from .epmgp import AxisAlignedBox, GaussianModel, box_logmass_batch, gaussian_box_logmass
from .estimators import (
    CovarianceError,
    DuplicateSampleError,
    EntropyReport,
    EstimatorConfig,
    estimate_both,
    estimate_kl,
    estimate_kpn,
    kl_mass_bounds,
    neighborhood_summary,
    probability_mass_quadrature,
)
from .knn import SampleSet, knn_all, knn_query, kth_distance
from .numerics import digamma, truncated_normal_moments

__version__ = "0.1.0"

__all__ = [
    "AxisAlignedBox",
    "CovarianceError",
    "DistributionSpec",
    "DuplicateSampleError",
    "EntropyOracle",
    "EntropyReport",
    "EstimatorConfig",
    "GaussianModel",
    "SampleSet",
    "analytic_entropy",
    "analytic_pdf_and_hessian",
    "backend",
    "box_logmass_batch",
    "digamma",
    "dimension_ramp",
    "estimate_both",
    "estimate_kl",
    "estimate_kpn",
    "gaussian_box_logmass",
    "kl_mass_bounds",
    "knn_all",
    "knn_query",
    "kth_distance",
    "neighborhood_summary",
    "probability_mass_quadrature",
    "sample",
    "set_backend",
    "table_one",
    "truncated_normal_moments",
    "use_numba",
]
