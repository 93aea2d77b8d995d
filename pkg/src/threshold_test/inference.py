"""Fit the threshold model to a counts table."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AUTO, CountsTable, ModelParams, ThresholdModel
from .sampler import DiagnosticsReport, PosteriorDraws, SamplerConfig, diagnose, sample


@dataclass
class FitResult:
    model: ThresholdModel
    draws: PosteriorDraws
    diagnostics: DiagnosticsReport

    @property
    def counts(self) -> CountsTable:
        return self.model.counts

    def threshold_draws(self) -> np.ndarray:
        """Posterior draws of ``t``, shape ``(n_draws, R, D)``."""
        return threshold_draws(self.draws, self.model)

    def params_at(self, chain: int, iteration: int) -> ModelParams:
        return self.model.constrain(self.draws.draws[chain, iteration])


def fit(
    counts: CountsTable,
    config: SamplerConfig | None = None,
    ref: int | None = None,
    parameterization: str = AUTO,
) -> FitResult:
    """Sample the posterior for ``counts``; ``ref`` overrides the reference department."""
    model = ThresholdModel(counts, ref=ref, parameterization=parameterization)
    draws = sample(model, model.dim, config, constrain=model.constrained_vector, names=model.param_names())
    return FitResult(model, draws, diagnose(draws))


def threshold_draws(draws: PosteriorDraws, model: ThresholdModel) -> np.ndarray:
    R, D = model.R, model.D
    start = draws.names.index(f"t[{model.counts.groups[0]},{model.counts.depts[0]}]")
    return draws.pooled()[:, start : start + R * D].reshape(-1, R, D)
