"""Bayesian threshold test for discrimination in search decisions."""

from .classic import RateTable, benchmark_test, concordance_report, outcome_test, threshold_verdicts
from .data import FilterPolicy, StopRecord, aggregate, apply_policy, disaggregate, parse_records, placebo_relabel
from .inference import FitResult, fit
from .model import CellSignal, CountsTable, ModelParams, ThresholdModel, hit_prob, log_posterior_grad, search_prob
from .sampler import PosteriorDraws, SamplerConfig, diagnose, ess_bulk, sample, split_rhat
from .special import reg_inc_beta, reg_inc_beta_grad
from .synthesis import SynthSpec, aggregate_thresholds, generate, posterior_predictive, recovery_truth

__version__ = "0.1.0"

__all__ = [
    "CellSignal",
    "CountsTable",
    "FilterPolicy",
    "FitResult",
    "ModelParams",
    "PosteriorDraws",
    "RateTable",
    "SamplerConfig",
    "StopRecord",
    "SynthSpec",
    "ThresholdModel",
    "aggregate",
    "aggregate_thresholds",
    "apply_policy",
    "benchmark_test",
    "concordance_report",
    "diagnose",
    "disaggregate",
    "ess_bulk",
    "fit",
    "generate",
    "hit_prob",
    "log_posterior_grad",
    "outcome_test",
    "parse_records",
    "placebo_relabel",
    "posterior_predictive",
    "recovery_truth",
    "reg_inc_beta",
    "reg_inc_beta_grad",
    "sample",
    "search_prob",
    "split_rhat",
    "threshold_verdicts",
]
