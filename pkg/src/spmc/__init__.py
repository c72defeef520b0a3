"""Saddlepoint Monte Carlo likelihood estimation for aggregated count data."""

from .aggregation import (InfeasibleObservation, MarginsMap, identity_map,
                          margins_matrix, reduce_zero_margins, single_row)
from .estimator import (DensityEstimate, EstimatorConfig, batch_log_likelihood,
                        estimate_density, gaussian_model_logpdf, solve_saddlepoint)
from .models import BernoulliVectorModel, Moments, MultinomialModel

__version__ = "0.1.0"
