"""Latent class growth analysis for bounded ordinal longitudinal outcomes.

Censored-normal and cumulative-probit likelihoods, multinomial-logit class
membership, multi-start EM / damped quasi-Newton estimation, BIC-based class
selection, posterior classification, and simulation generators for the two
synthetic cohort designs.
"""

from .errors import (DimensionError, EmptyDatasetError, InputDataError,
                     LcgaError, NonFiniteLoglikError, ParameterDomainError)
from .types import (CategoryMap, CensoredNormal, CumulativeProbit,
                    LongitudinalDataset, ModelSpec, ParameterSet,
                    SubjectRecord, n_free_params, pack_params, param_layout,
                    unpack_params)
from .likelihood import (class_membership_probs, cnorm_obs_loglik,
                         mixture_loglik, mixture_loglik_grad,
                         probit_category_probs, probit_obs_loglik,
                         series_loglik_given_class)
from .estimation import (FitConfig, FitResult, LoglikOnly, Triple,
                         direct_fit, em_fit, fit_one_class, generate_starts,
                         multi_start_fit)
from .selection import (PosteriorMatrix, SelectionReport, aic,
                        bayes_factor_2dbic, bic, class_search,
                        correct_classification_rate, posterior_probs)
from .simulate import (ScenarioConfig, categorize, simulate_scenario1,
                       simulate_scenario2)

__version__ = "0.1.0"
