import json
from pathlib import Path

import numpy as np
import pytest

from rded.core import HistorySurface, LagConfig, TimeGrid, TrajectoryPanel
from rded.solver import CovariateLaw, DriftProcess, RdedSpec, generate_panel_with_truth, smooth_noise

FIXTURES = Path(__file__).parent / 'fixtures'

TRUE_LAGS = {'u1': 0, 'u2': 14, 'u3': 7, 'u4': 3}
TRUE_COEFS = {'u1': 1.0, 'u2': 0.8, 'u3': -0.6, 'u4': 0.7}
TAU0 = 14


def history_weight(s, t):
    """Net-zero weight: positive near the current time, negative further back"""
    return 0.005 * (1.0 - 2.0 * s / TAU0) + 0.0 * t


def delay_spec(lags=None, coefs=None, tau0=TAU0, weight=history_weight):
    lags = dict(TRUE_LAGS if lags is None else lags)
    coefs = dict(TRUE_COEFS if coefs is None else coefs)
    return RdedSpec(
        lag_config=LagConfig(tau0, lags, search_max=21),
        intercept=0.5,
        history_weight=weight,
        covariate_coefs=coefs,
        initial=1.0,
    )


def make_delay_panel(seed, n=50, drift=0.1, noise=0.0, bandwidth=1.5, drift_bandwidth=3.0, **kwargs):
    """Panel carrying exact derivatives, plus the truth"""
    grid = TimeGrid(0.0, 1.0, 130)
    spec = delay_spec(**kwargs)
    panel, truth = generate_panel_with_truth(
        spec, grid, n, CovariateLaw(amplitude=1.0, bandwidth=bandwidth), noise, seed,
        DriftProcess(drift, drift_bandwidth))
    return panel.with_derivatives(truth.derivatives), truth


def make_raw_panel(seed, n=50, noise=0.05, drift=0.05, **kwargs):
    """Noisy observed panel without derivatives, plus the truth"""
    grid = TimeGrid(0.0, 1.0, 130)
    panel, truth = generate_panel_with_truth(
        delay_spec(**kwargs), grid, n, CovariateLaw(amplitude=1.0, bandwidth=1.5), noise, seed,
        DriftProcess(drift, 3.0))
    return panel, truth


def truth_surface(grid, tau0=TAU0, weight=history_weight):
    return HistorySurface.from_function(weight, grid, tau0)


def random_paths(rng, n, count, bandwidth=1.5):
    return np.vstack([smooth_noise(rng, count, bandwidth) for _ in range(n)])


def panel_from(d, x=None, covariates=None, grid=None):
    d = np.asarray(d, dtype=float)
    n, count = d.shape
    grid = TimeGrid(0.0, 1.0, count) if grid is None else grid
    x = np.zeros_like(d) if x is None else x
    subjects = [f'S{i + 1:03d}' for i in range(n)]
    return TrajectoryPanel.from_arrays(subjects, grid, x, covariates or {}, derivatives=d)


@pytest.fixture
def grid130():
    return TimeGrid(0.0, 1.0, 130)


@pytest.fixture(scope='session')
def delay_panel():
    return make_delay_panel(seed=7)


@pytest.fixture(scope='session')
def simulation_config():
    return json.loads((FIXTURES / 'delay_simulation.json').read_text())
