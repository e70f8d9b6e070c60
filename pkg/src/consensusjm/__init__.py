"""Split-and-combine MCMC for Bayesian joint models of longitudinal and
time-to-event data.

A dataset is split by subject into ``S`` subsamples, each subsample is
sampled independently with its prior raised to the power ``1/S``, and the
draws are merged by concatenation or by (equal or precision) weighted
averaging. A simulator for the generating model and a scenario harness are
included.
"""
from .consensus import (ConsensusResult, WeightTable, combine, combine_union, combine_weighted,
                        equal_weights, gaussian_product_oracle, precision_weights)
from .data import JointDataset, Partition, load_dataset, materialize, partition, write_dataset
from .errors import ChainFailure, DataValidationError, NumericalError, SingularDesignError
from .executor import JobPlan, TimingReport, schedule, speedup_report
from .model import JointModel, ModelSpec, ParamLayout, Priors, log_posterior, log_prior
from .pipeline import SplitFit, fit_split
from .report import ScenarioResult, rhat, run_scenarios, summarize
from .sampler import ChainConfig, ChainDraws, initialize, run_chain, run_subsample
from .simulator import SimulationParams, default_params, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "ChainConfig", "ChainDraws", "ChainFailure", "ConsensusResult", "DataValidationError",
    "JobPlan", "JointDataset", "JointModel", "ModelSpec", "NumericalError", "ParamLayout",
    "Partition", "Priors", "ScenarioResult", "SimulationParams", "SingularDesignError",
    "SplitFit", "TimingReport", "WeightTable", "combine", "combine_union", "combine_weighted",
    "default_params", "equal_weights", "fit_split", "gaussian_product_oracle", "initialize",
    "load_dataset", "log_posterior", "log_prior", "materialize", "partition", "precision_weights",
    "rhat", "run_chain", "run_scenarios", "run_subsample", "schedule", "simulate_dataset",
    "speedup_report", "summarize", "write_dataset",
]
