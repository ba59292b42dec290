"""
Leave-one-subject-out evaluation

Held-out derivative predictions, IMSE per subject, the comparison of a lagged model
against the same model without delays, and residual (drift) processes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .config import PipelineConfig
from .core import LagConfig, fit_domain
from .pipeline import (common_domain, estimate_history_surface, fit_concurrent,
                       learn_dynamics, predict_derivatives)

logger = logging.getLogger(__name__)


def imse(observed, predicted, step):
    """Integrated squared error per subject over the rows' time points"""
    return step * np.sum((np.asarray(observed) - np.asarray(predicted)) ** 2, axis=-1)


@dataclass(frozen=True, eq=False)
class PredictionReport:
    subjects: tuple
    times: np.ndarray
    observed: np.ndarray  # n x T
    predicted: np.ndarray  # n x T, subject i from the fit without subject i
    per_subject_imse: np.ndarray
    total_imse: float
    domain: range

    @property
    def residuals(self):
        return self.observed - self.predicted


def _surface_for(panel, tau0, config):
    return estimate_history_surface(panel, tau0, config.ridge,
                                    lag_bandwidth=config.surface_lag_bandwidth,
                                    time_bandwidth=config.surface_time_bandwidth)


def loo_predict(panel, lag_config, selected, surface=None, domain=None, config=None):
    """Predict every subject's X' from a refit that never sees that subject

    Lags, selection and the surface stay fixed unless config.refit_surface_per_fold
    (surface re-estimated per fold) or config.strict_loo (whole learner rerun per
    fold, evaluated on the common lag-search domain) ask otherwise.
    """
    config = config or PipelineConfig()
    grid = panel.grid
    n = panel.n_subjects
    if n < 3:
        raise ValueError('leave-one-out prediction needs n >= 3 subjects')
    selected = tuple(selected)
    if domain is None:
        if config.strict_loo:
            domain = common_domain(grid, lag_config.tau0, lag_config.search_max)
        else:
            domain = fit_domain(grid, lag_config.restricted(selected))
    if surface is None and not config.strict_loo:
        surface = _surface_for(panel, lag_config.tau0, config)

    idx = np.asarray(domain, dtype=int)
    observed = panel.derivative_matrix[:, idx]
    predicted = np.empty_like(observed)
    for i in range(n):
        fold = panel.drop_subject(i)
        held_out = panel.subset([i])
        if config.strict_loo:
            result = learn_dynamics(fold, config)
            fold_fit = fit_concurrent(result.panel, result.surface, result.lag_config,
                                      result.selection.selected, domain, smooth=False)
        else:
            fold_surface = surface
            if config.refit_surface_per_fold:
                fold_surface = _surface_for(fold, lag_config.tau0, config)
            fold_fit = fit_concurrent(fold, fold_surface, lag_config, selected, domain,
                                      smooth=False)
        predicted[i] = predict_derivatives(fold_fit, held_out)[0]

    per_subject = imse(observed, predicted, grid.step)
    total = float(np.mean(per_subject))
    logger.info(f'[OK] leave-one-out IMSE {total:.6g} over {n} subjects')
    return PredictionReport(panel.subjects, grid.points[idx], observed, predicted,
                            per_subject, total, domain)


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    lagged: PredictionReport
    zero_lag: PredictionReport
    ratio: float
    per_subject_ratio: np.ndarray

    @property
    def improves(self):
        return self.ratio < 1.0


def compare_models(panel, lagged, selected, zero_lag=None, config=None, surface=None):
    """LOO-IMSE of the lagged model relative to the model with every delay set to zero

    Both models are evaluated on the lagged model's fit domain; each gets the surface
    estimated with its own tau0 (`surface` may supply the lagged one).
    """
    config = config or PipelineConfig()
    zero_lag = lagged.zero_lag() if zero_lag is None else zero_lag
    if not isinstance(zero_lag, LagConfig):
        raise TypeError('zero_lag must be a LagConfig')
    selected = tuple(selected)
    domain = fit_domain(panel.grid, lagged.restricted(selected))
    config = replace(config, strict_loo=False)

    surfaces = {}
    if surface is not None:
        surfaces[lagged.tau0] = surface
    for cfg in (lagged, zero_lag):
        if cfg.tau0 not in surfaces:
            surfaces[cfg.tau0] = _surface_for(panel, cfg.tau0, config)

    report_lagged = loo_predict(panel, lagged, selected, surfaces[lagged.tau0], domain, config)
    if zero_lag == lagged:
        report_zero = report_lagged
    else:
        report_zero = loo_predict(panel, zero_lag, selected, surfaces[zero_lag.tau0], domain,
                                  config)
    ratio = report_lagged.total_imse / report_zero.total_imse
    with np.errstate(divide='ignore', invalid='ignore'):
        per_subject = report_lagged.per_subject_imse / report_zero.per_subject_imse
    logger.info(f'[OK] lagged / zero-lag IMSE ratio {ratio:.4f}')
    return ComparisonReport(report_lagged, report_zero, float(ratio), per_subject)


@dataclass(frozen=True, eq=False)
class ResidualReport:
    subjects: tuple
    times: np.ndarray
    residuals: np.ndarray  # n x T
    volatility: np.ndarray  # standard deviation over time per subject


def residual_processes(fit, panel):
    """Z_i(t) = X'_i(t) - fitted X'_i(t) on the fit domain, with per-subject volatility"""
    idx = np.asarray(fit.fit_domain, dtype=int)
    if idx.size == 0:
        raise ValueError('fit domain is empty')
    residuals = panel.derivative_matrix[:, idx] - predict_derivatives(fit, panel)
    ddof = 1 if idx.size > 1 else 0
    volatility = np.std(residuals, axis=1, ddof=ddof)
    return ResidualReport(panel.subjects, panel.grid.points[idx], residuals, volatility)


def summarize(report: Optional[PredictionReport]):
    """Plain dict view of a prediction report for JSON output"""
    if report is None:
        return None
    return {
        'total_imse': float(report.total_imse),
        'per_subject_imse': dict(zip(report.subjects, map(float, report.per_subject_imse))),
        'domain': [int(report.domain[0]), int(report.domain[-1])],
    }
