"""Asymptotics of subsample M-estimators drawn without replacement.

State evolution for robust and logistic regression, the cross-subsample
correlation fixed point, and a Monte Carlo simulator to check them.
"""
from .data import DataModel, DesignLaw, NoiseLaw, noise_quantile, sample_dataset
from .errors import (DomainError, NumericalError, RegimeError, SeparationError,
                     SingularCurvatureError, SubevoError)
from .estimation import (FitResult, GammaHat, eta_sigma2_hat, fit_mestimator, gamma_hat,
                         sigma2_hat)
from .kernels import BACKEND
from .losses import LossModel, loss_d1, loss_d2, loss_value, prox, prox_d1
from .quadrature import QuadratureSpec, expect_g, expect_gg, expect_marginal
from .resampling import (BaggingRecord, PairFitRecord, SubsampleDraw,
                         bivariate_prox_diagnostic, draw_subsets, run_bagging_experiment,
                         run_pair_experiment)
from .state_evolution import (EtaSolution, RegimeParams, StateSolution, bagged_risk_limit,
                              eval_F, risk_curve, solve_eta, solve_system)

__version__ = "0.1.0"
