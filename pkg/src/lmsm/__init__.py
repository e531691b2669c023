"""Longitudinal marginal structural models for discrete treatment sequences.

Estimates the projection parameter of a working MSM under a user-chosen
reference distribution over treatment paths, with IPW, sequential
g-computation, a TMLE-like estimator and a sequentially doubly robust
estimator built on cross-fitted nuisances.
"""

from __future__ import annotations

__version__ = "0.1.0"

from lmsm.crossfit import FoldAssignment, make_folds
from lmsm.data import Schema, TrajectoryDataset, TreatmentSupport, load_csv, write_csv
from lmsm.errors import (ContractError, DataParseError, InferenceError, LmsmError, OracleError,
                         SchemaError, SolverError)
from lmsm.estimators import EstimateReport, gcomp_fit, ipw_fit, sdr_fit, tmle_fit
from lmsm.learners import LearnerSpec
from lmsm.msm import (FeatureMap, FixedReference, MarginalReference, WorkingModel, build_lattice,
                      solve_beta, u2, u2_jacobian)

__all__ = [
    "__version__", "FoldAssignment", "make_folds", "Schema", "TrajectoryDataset", "TreatmentSupport",
    "load_csv", "write_csv", "ContractError", "DataParseError", "InferenceError", "LmsmError",
    "OracleError", "SchemaError", "SolverError", "EstimateReport", "gcomp_fit", "ipw_fit", "sdr_fit",
    "tmle_fit", "LearnerSpec", "FeatureMap", "FixedReference", "MarginalReference", "WorkingModel",
    "build_lattice", "solve_beta", "u2", "u2_jacobian",
]
