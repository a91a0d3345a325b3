"""Treatment-effect estimation for incomplete longitudinal binary outcomes.

Complete-case and LOCF preparation, marginal models by GEE and weighted
GEE, random-intercept logistic models by Gauss-Hermite quadrature, and the
tests and simulations needed to compare them.
"""
from .dataset import (DataError, LongDataset, MissingnessProfile, SubjectRecord,
                      load_armd_fixture, load_long_csv, missingness_profile, pattern_table)
from .design import build_design, parse_formula
from .gee import WorkingCorrelation, correlation_matrix, estimate_alpha, fit_gee
from .glm import bernoulli_variance, expit, fit_logistic
from .glmm import (GlmmSpec, attenuation_ratio, fit_glmm, gauss_hermite, marginalize_mean,
                   quadrature_scan, subject_loglik)
from .inference import (build_contrasts, contrast_test, endpoint_analysis, fisher_exact,
                        pearson_chi2, wald_test)
from .prep import complete_case, locf_impute, monotonize, observed_split
from .sim import SimSpec, apply_dropout, replicate_study, simulate, simulate_complete
from .wgee import (fit_dropout_model, fit_wgee, occasion_weights, person_period_expand,
                   subject_weights)

__version__ = "0.1.0"
