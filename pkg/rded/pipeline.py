"""
Dynamics learning pipeline

Two-stage learner for the hybrid delay model. The history surface is estimated
first by per-timepoint functional regression; its integral then enters as one
predictor next to the lagged covariates. Lags start from single-covariate
leave-one-subject-out searches, covariates are kept by a LASSO majority vote over
time points and the kept lags are refined by backfitting before the final fit.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import LearnerConfig, PipelineConfig, SmoothingConfig
from .core import (CoefficientCurves, FittedRded, HistorySurface, LagConfig, fit_domain,
                   quadrature_weights, validate_panel)
from .errors import EmptyDomain, RankDeficient, RdedError, StageError
from .regression import DesignProblem, lasso_path_cv_batch, loo_residuals, solve_flm, solve_wls
from .smoothing import (KernelSpec, difference_quotients, estimate_derivatives,
                        smooth_coefficients, smooth_panel, smooth_surface)

logger = logging.getLogger(__name__)

TIE_RTOL = 1e-12


@contextmanager
def run_stage(name, timings):
    """Time a stage and tag any toolkit failure inside it with the stage name"""
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (RdedError, ValueError, np.linalg.LinAlgError) as e:
        logger.debug(f'[FAIL] stage {name}: {e}')
        raise StageError(name, e) from e
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def first_argmin(scores):
    """Index of the first score within a relative tolerance of the minimum"""
    scores = np.asarray(scores, dtype=float)
    best = scores.min()
    return int(np.argmax(scores <= best + TIE_RTOL * abs(best)))


def common_domain(grid, tau0, search_max):
    """Indices where every candidate lag and the history window exist"""
    start = max(tau0, search_max)
    if start >= grid.count:
        raise EmptyDomain(f'lags up to {start} leave no usable point on a grid of {grid.count}')
    return range(start, grid.count)


# Preparation -----------------------------------------------------------------

def fill_derivatives(panel, config=None):
    """Derivative curves by local quadratic regression or difference quotients"""
    config = config or PipelineConfig()
    if config.derivative_method == 'difference_quotient':
        return panel.with_derivatives(
            np.vstack([difference_quotients(traj).values for traj in panel.response]))
    kernel = None
    if config.derivative_bandwidth is not None:
        kernel = KernelSpec.epanechnikov(config.derivative_bandwidth)
    return estimate_derivatives(panel, kernel)


def prepare_panel(panel, config=None, timings=None):
    """Smooth and impute the raw curves, then fill derivatives"""
    config = config or PipelineConfig()
    timings = {} if timings is None else timings
    with run_stage('smooth', timings):
        panel = smooth_panel(panel, KernelSpec.gaussian(config.data_bandwidth))
    with run_stage('derivatives', timings):
        return fill_derivatives(panel, config)


# History index ---------------------------------------------------------------

def estimate_history_surface(panel, tau0, ridge=None, smooth=True,
                             lag_bandwidth=None, time_bandwidth=None):
    """Per-timepoint ridge functional regression of X' on the past tau0 steps of X

    Bandwidths are in grid steps; smooth=False returns the raw per-timepoint surface.
    """
    grid = panel.grid
    if tau0 >= grid.count:
        raise EmptyDomain(f'tau0 = {tau0} leaves no usable point on a grid of {grid.count}')
    x = panel.response_matrix
    d = panel.derivative_matrix
    q = quadrature_weights(tau0, grid.step)
    lags = np.arange(tau0 + 1)
    index = np.arange(tau0, grid.count)
    raw = np.empty((tau0 + 1, index.size))
    ridges = np.empty(index.size)
    for col, k in enumerate(index):
        fit = solve_flm(x[:, k - lags], d[:, k], q, ridge)
        raw[:, col] = fit.gamma
        ridges[col] = fit.ridge
    logger.debug(f'[INFO] surface ridge range {ridges.min():.3g}..{ridges.max():.3g}')

    surface = HistorySurface(lags, index, raw, grid.step)
    if not smooth:
        return surface
    lag_bandwidth = lag_bandwidth or SmoothingConfig.SURFACE_LAG_BANDWIDTH
    time_bandwidth = time_bandwidth or SmoothingConfig.SURFACE_TIME_BANDWIDTH
    return smooth_surface(surface,
                          KernelSpec.epanechnikov(time_bandwidth * grid.step),
                          KernelSpec.epanechnikov(lag_bandwidth * grid.step))


def history_integral(panel, surface, domain=None):
    """H_i(t) = int_0^tau0 gamma(s, t) X_i(t - s) ds on the domain, as an n x T matrix"""
    grid = panel.grid
    if domain is None:
        domain = range(surface.tau0, grid.count)
    idx = np.asarray(domain, dtype=int)
    if idx.size == 0:
        raise EmptyDomain('history integral requested on an empty domain')
    if idx[0] < surface.tau0:
        raise EmptyDomain(f'history window of {surface.tau0} steps starts before the grid')
    gamma = surface.weights_at(idx)
    q = quadrature_weights(surface.tau0, grid.step)
    lagged = panel.response_matrix[:, idx[None, :] - surface.lag_axis[:, None]]
    return np.einsum('s,st,nst->nt', q, gamma, lagged)


# Concurrent designs ----------------------------------------------------------

def concurrent_designs(panel, history, lags, names, domain, intercept=True):
    """(T, n, p) stack of per-timepoint designs with columns 1, H, U_j(t - tau_j)"""
    idx = np.asarray(domain, dtype=int)
    n = panel.n_subjects
    cols = [np.ones((n, idx.size))] if intercept else []
    if history is not None:
        cols.append(np.asarray(history))
    for name in names:
        cols.append(panel.covariate_matrix(name)[:, idx - lags[name]])
    return np.stack(cols, axis=-1).transpose(1, 0, 2)


def _targets(panel, domain):
    return panel.derivative_matrix[:, np.asarray(domain, dtype=int)].T


def loo_imse(designs, targets, step):
    """(1/n) sum_i int (X'_i - X'_{i,-i})^2 dt with the integral as a grid sum"""
    resid = loo_residuals(designs, targets)
    return float(step * np.sum(resid ** 2) / resid.shape[1])


def lag_criteria(panel, covariate, search_max, domain=None):
    """Mean squared leave-one-subject-out error of X' on (1, U(t - tau)) for every tau"""
    grid = panel.grid
    domain = common_domain(grid, 0, search_max) if domain is None else domain
    if domain[0] < search_max:
        raise EmptyDomain(f'domain starts at {domain[0]}, before the largest lag {search_max}')
    targets = _targets(panel, domain)
    scores = np.empty(search_max + 1)
    for tau in range(search_max + 1):
        designs = concurrent_designs(panel, None, {covariate: tau}, (covariate,), domain)
        scores[tau] = np.mean(loo_residuals(designs, targets) ** 2)
    return scores


def initial_lag_selection(panel, covariate, search_max, domain=None):
    scores = lag_criteria(panel, covariate, search_max, domain)
    return first_argmin(scores)


# Selection -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SelectionReport:
    """Majority vote of per-timepoint LASSO fits"""

    covariates: tuple
    proportions: dict
    threshold: float
    selected: tuple
    per_time_active: np.ndarray  # covariates x timepoints
    history_proportion: float = 1.0
    lambdas: Optional[np.ndarray] = None
    threshold_scores: Optional[dict] = None


def threshold_selection(proportions, p_star):
    """Covariates active at a fraction >= p_star of the time points, in input order"""
    return tuple(name for name, p in proportions.items() if p >= p_star)


def select_variables(panel, surface, initial_lags, p_star=LearnerConfig.P_STAR, domain=None,
                     history=None):
    """LOO-tuned LASSO at every time point on (H, lagged covariates), then threshold

    p_star=None picks the threshold from the grid 0.1..0.9 by the concurrent-fit
    LOO criterion; the history predictor is always kept.
    """
    grid = panel.grid
    names = tuple(name for name in panel.covariate_names if name in initial_lags.lags)
    lags = initial_lags.lags
    if domain is None:
        domain = common_domain(grid, surface.tau0, initial_lags.max_lag)
    if history is None:
        history = history_integral(panel, surface, domain)
    targets = _targets(panel, domain)

    designs = concurrent_designs(panel, history, lags, names, domain, intercept=False)
    result = lasso_path_cv_batch(designs, targets)
    active = result.active[:, 1:].T
    n_times = active.shape[1]
    proportions = {name: float(active[j].sum()) / n_times for j, name in enumerate(names)}
    history_proportion = float(result.active[:, 0].sum()) / n_times

    scores = None
    if p_star is None:
        scores = {}
        for candidate in LearnerConfig.P_STAR_GRID:
            chosen = threshold_selection(proportions, candidate)
            scores[candidate] = loo_imse(
                concurrent_designs(panel, history, lags, chosen, domain), targets, grid.step)
        grid_values = list(scores)
        p_star = grid_values[first_argmin([scores[p] for p in grid_values])]
        logger.info(f'[INFO] threshold p*={p_star} chosen by leave-one-out')

    selected = threshold_selection(proportions, p_star)
    summary = ', '.join(f'{name}={p:.2f}' for name, p in proportions.items())
    logger.info(f'[OK] selection p*={p_star}: {list(selected)} ({summary})')
    return SelectionReport(names, proportions, float(p_star), selected, active,
                           history_proportion, result.lam, scores)


# Backfitting -----------------------------------------------------------------

@dataclass(frozen=True)
class BackfitStep:
    cycle: int
    covariate: str
    lags: dict
    criteria: tuple  # LOO-IMSE for every candidate lag


@dataclass(frozen=True, eq=False)
class BackfitTrace:
    iterations: tuple
    converged: bool
    cycles: int


def backfit_lags(panel, surface, selected, initial_lags, cycle_cap=LearnerConfig.CYCLE_CAP,
                 domain=None, history=None):
    """Coordinate-wise lag search over the selected covariates until a cycle changes nothing"""
    grid = panel.grid
    selected = tuple(selected)
    search_max = initial_lags.search_max
    lags = {name: initial_lags.lags[name] for name in selected}
    if domain is None:
        domain = common_domain(grid, surface.tau0, search_max)
    if history is None:
        history = history_integral(panel, surface, domain)
    targets = _targets(panel, domain)

    def criterion(candidate):
        designs = concurrent_designs(panel, history, candidate, selected, domain)
        return loo_imse(designs, targets, grid.step)

    steps = []
    converged = False
    cycles = 0
    for cycle in range(1, cycle_cap + 1):
        changed = False
        for name in selected:
            scores = np.array([criterion({**lags, name: tau}) for tau in range(search_max + 1)])
            best = first_argmin(scores)
            assert scores[best] <= scores[lags[name]]
            if best != lags[name]:
                logger.debug(f'[INFO] cycle {cycle}: {name} lag {lags[name]} -> {best}')
                changed = True
            lags[name] = best
            steps.append(BackfitStep(cycle, name, dict(lags), tuple(float(s) for s in scores)))
        cycles = cycle
        if not changed:
            converged = True
            break

    state = 'converged' if converged else 'stopped at the cycle cap'
    logger.info(f'[OK] backfit {state} after {cycles} cycle(s): {lags}')
    return (LagConfig(initial_lags.tau0, lags, search_max),
            BackfitTrace(tuple(steps), converged, cycles))


# Final fit -------------------------------------------------------------------

def fit_concurrent(panel, surface, lag_config, selected, domain=None, coefficient_kernel=None,
                   smooth=True):
    """Per-timepoint OLS of X' on (1, H, selected lagged covariates)"""
    grid = panel.grid
    selected = tuple(selected)
    lag_config = lag_config.restricted(selected)
    if surface.tau0 != lag_config.tau0:
        raise ValueError(f'surface spans {surface.tau0} steps, lag config says {lag_config.tau0}')
    if domain is None:
        domain = fit_domain(grid, lag_config)
    idx = np.asarray(domain, dtype=int)
    times = grid.points[idx]
    history = history_integral(panel, surface, domain)
    designs = concurrent_designs(panel, history, lag_config.lags, selected, domain)
    targets = _targets(panel, domain)

    coefs = np.empty((designs.shape[0], designs.shape[2]))
    for col in range(idx.size):
        try:
            coefs[col] = solve_wls(DesignProblem(designs[col], targets[col]))
        except RankDeficient as e:
            raise RankDeficient(e.column, float(times[col])) from e
    fitted = np.einsum('tnp,tp->tn', designs, coefs)
    residuals = (targets - fitted).T

    raw = CoefficientCurves(coefs[:, 0], coefs[:, 1],
                            {name: coefs[:, 2 + j] for j, name in enumerate(selected)})
    fit = FittedRded(raw, raw, surface, lag_config, selected, residuals, domain, times,
                     panel.subjects)
    if smooth:
        fit = smooth_coefficients(fit, coefficient_kernel)
    return fit


def predict_derivatives(fit, panel, raw=True):
    """X'_i(t) predicted by a fitted model on its fit domain, n x T"""
    history = history_integral(panel, fit.surface, fit.fit_domain)
    designs = concurrent_designs(panel, history, fit.lag_config.lags, fit.selected, fit.fit_domain)
    curves = fit.raw_coefficients if raw else fit.coefficients
    return np.einsum('tnp,tp->nt', designs, curves.columns())


# Full run --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PipelineResult:
    panel: object
    surface: HistorySurface
    initial_lags: LagConfig
    selection: SelectionReport
    lag_config: LagConfig
    trace: BackfitTrace
    fit: FittedRded
    config: PipelineConfig
    timings: dict = field(default_factory=dict)


def learn_dynamics(panel, config=None, timings=None):
    """Run every learning stage; panels that already carry derivatives are used as-is"""
    config = config or PipelineConfig()
    timings = {} if timings is None else timings

    with run_stage('validate', timings):
        validate_panel(panel)
    if panel.derivatives is None or panel.has_masks:
        panel = prepare_panel(panel, config, timings)
    grid = panel.grid

    with run_stage('surface', timings):
        surface = estimate_history_surface(panel, config.tau0, config.ridge,
                                           lag_bandwidth=config.surface_lag_bandwidth,
                                           time_bandwidth=config.surface_time_bandwidth)
        domain = common_domain(grid, config.tau0, config.search_max)
        history = history_integral(panel, surface, domain)
    logger.info(f'[OK] history surface on {surface.weights.shape[1]} time points (tau0={config.tau0})')

    with run_stage('initial_lags', timings):
        lags = {name: initial_lag_selection(panel, name, config.search_max, domain)
                for name in panel.covariate_names}
        initial = LagConfig(config.tau0, lags, config.search_max)
    logger.info(f'[OK] initial lags: {lags}')

    with run_stage('selection', timings):
        selection = select_variables(panel, surface, initial, config.p_star, domain, history)

    with run_stage('backfit', timings):
        lag_config, trace = backfit_lags(panel, surface, selection.selected, initial,
                                         config.cycle_cap, domain, history)

    with run_stage('final_fit', timings):
        fit = fit_concurrent(panel, surface, lag_config, selection.selected,
                             coefficient_kernel=KernelSpec.epanechnikov(config.coefficient_bandwidth))
    logger.info(f'[OK] final fit on {len(fit.fit_domain)} time points')

    return PipelineResult(panel, surface, initial, selection, lag_config, trace, fit, config,
                          timings)
