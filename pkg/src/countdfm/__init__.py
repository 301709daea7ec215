"""Latent Gaussian dynamic factor models for multivariate count time series."""

from .errors import *  # noqa: F401,F403
from .estimation import FittedModel, fit, pca_factor_estimate, sample_cross_correlation, yule_walker
from .kalman import build_state_space, dare_converge, kalman_step, predict_horizon
from .link import LinkBank, build_inverse, build_link, inverse_link_matrix, link_eval
from .marginals import MarginalSpec, bin_bounds, fit_marginal, hermite_coefficients, quantile
from .model import DfmParams, preset_marginals, preset_params, simulate, stationary_acvf, validate
from .selection import select_lag, select_rank
from .smc import forecast_distribution, mvn_rectangle_prob, point_forecast, resample, run_sisr, sample_truncated_mvn

__version__ = "0.1.0"
