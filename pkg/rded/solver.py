"""
Forward solver and synthetic panels

Sample-path solutions of delay models on the observation grid:

    X'(t) = a(t) + b0(t) * hist(t) + sum_j b_j(t) U_j(t - tau_j)
            + sum_j int_0^{h_j} c_j(s, t) U_j(t - s) ds + Z(t)

where hist(t) is either the discrete delay X(t - tau0) or the distributed delay
int_0^{tau0} gamma(s, t) X(t - s) ds. All integrals use the trapezoid rule on the
grid, so a solve is exactly reproducible by the learner's own quadrature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Union

import numpy as np
from numpy.polynomial import Polynomial, polynomial
from scipy.integrate import cumulative_trapezoid
from scipy.ndimage import gaussian_filter1d

from .core import (HistorySurface, LagConfig, TimeGrid, Trajectory, TrajectoryPanel,
                   quadrature_weights)
from .errors import DomainUnderflow, RdedError

logger = logging.getLogger(__name__)

Curve = Union[None, float, Callable]
Weight = Union[None, Callable, HistorySurface]


def _curve(fn, t):
    """Evaluate a coefficient curve on an array of times"""
    t = np.asarray(t, dtype=float)
    if fn is None:
        return np.zeros(t.shape)
    values = fn(t) if callable(fn) else fn
    values = np.broadcast_to(np.asarray(values, dtype=float), t.shape)
    if not np.all(np.isfinite(values)):
        raise RdedError('coefficient curve is not finite on the grid')
    return values


def _weight_table(weight, grid, horizon, indices):
    """(horizon + 1) x len(indices) table of a weight function or surface"""
    if isinstance(weight, HistorySurface):
        if weight.tau0 != horizon:
            raise RdedError(f'surface spans {weight.tau0} lag steps, model needs {horizon}')
        return weight.weights_at(indices)
    return HistorySurface.from_function(weight, grid, horizon, indices).weights


@dataclass(frozen=True, eq=False)
class RdedSpec:
    """Right-hand side of a delay model plus its initial function

    With history_weight None the history enters as b0(t) X(t - tau0); otherwise as
    b0(t) times the distributed integral (b0 defaults to 1 in that case).
    covariate_history maps a covariate name to (weight c(s, t), horizon in steps).
    """

    lag_config: LagConfig
    intercept: Curve = None
    history_coef: Curve = None
    history_weight: Weight = None
    covariate_coefs: Mapping[str, Curve] = field(default_factory=dict)
    covariate_history: Mapping[str, tuple] = field(default_factory=dict)
    initial: Curve = 0.0

    def __post_init__(self):
        missing = set(self.covariate_coefs) - set(self.lag_config.lags)
        if missing:
            raise RdedError(f'covariates without a lag: {sorted(missing)}')

    @property
    def tau0(self):
        return self.lag_config.tau0

    @property
    def covariate_names(self):
        names = list(self.covariate_coefs)
        names += [name for name in self.covariate_history if name not in self.covariate_coefs]
        return tuple(names)

    @property
    def start_index(self):
        """Grid index t0 where the initial function hands over to the solution"""
        horizons = [horizon for _, horizon in self.covariate_history.values()]
        lags = [self.lag_config.lags[name] for name in self.covariate_coefs]
        return max([self.tau0, *lags, *horizons])

    @property
    def is_distributed(self):
        return self.history_weight is not None


def _covariate_values(covariates, name, count):
    try:
        values = covariates[name]
    except KeyError:
        raise DomainUnderflow(f'no trajectory for covariate {name!r}') from None
    values = np.asarray(getattr(values, 'values', values), dtype=float)
    if values.shape != (count,):
        raise DomainUnderflow(
            f'covariate {name!r} has {values.shape[0]} values, the grid needs {count}')
    return values


def _known_terms(spec, covariates, grid, drift):
    """Right-hand side terms that do not involve X, at every grid index (0 before t0)"""
    m = spec.start_index
    t = grid.points
    k = np.arange(m, grid.count)
    known = np.zeros(grid.count)
    known[m:] = _curve(spec.intercept, t[m:])
    for name, coef in spec.covariate_coefs.items():
        u = _covariate_values(covariates, name, grid.count)
        known[m:] += _curve(coef, t[m:]) * u[k - spec.lag_config.lags[name]]
    for name, (weight, horizon) in spec.covariate_history.items():
        u = _covariate_values(covariates, name, grid.count)
        table = _weight_table(weight, grid, horizon, k)
        q = quadrature_weights(horizon, grid.step)
        lagged = u[k[None, :] - np.arange(horizon + 1)[:, None]]
        known[m:] += np.einsum('s,st,st->t', q, table, lagged)
    if drift is not None:
        drift = np.asarray(drift, dtype=float)
        if drift.shape != (grid.count,):
            raise RdedError(f'drift has {drift.shape[0]} values, the grid needs {grid.count}')
        known[m:] += drift[m:]
    return known


def _initial_segment(spec, grid):
    m = spec.start_index
    if m >= grid.count:
        raise DomainUnderflow(f'history of {m} steps does not fit a grid of {grid.count}')
    x = np.empty(grid.count)
    x[:m + 1] = _curve(spec.initial, grid.points[:m + 1])
    return x, m


def _discrete_steps(spec, grid, known, x, m):
    """Method of steps for X(t - tau0): each interval integrates an already known rhs"""
    tau0 = spec.tau0
    t = grid.points
    beta0 = _curve(spec.history_coef, t)
    a = m
    while a < grid.count - 1:
        b = min(a + tau0, grid.count - 1)
        idx = np.arange(a, b + 1)
        rhs = known[idx] + beta0[idx] * x[idx - tau0]
        x[a:b + 1] = x[a] + cumulative_trapezoid(rhs, dx=grid.step, initial=0.0)
        a = b
    return x


def _distributed_steps(spec, grid, known, x, m):
    """Trapezoid recursion for the distributed delay; the s = 0 term is implicit"""
    tau0 = spec.tau0
    h = grid.step
    t = grid.points
    beta0 = _curve(1.0 if spec.history_coef is None else spec.history_coef, t)
    indices = np.arange(m, grid.count)
    table = _weight_table(spec.history_weight, grid, tau0, indices)
    q = quadrature_weights(tau0, h)
    lags = np.arange(tau0 + 1)

    def rhs(k):
        col = table[:, k - m]
        return known[k] + beta0[k] * np.dot(q * col, x[k - lags])

    f_prev = rhs(m)
    for k in range(m + 1, grid.count):
        col = table[:, k - m]
        past = np.dot(q[1:] * col[1:], x[k - lags[1:]])
        implicit = beta0[k] * q[0] * col[0]
        denom = 1.0 - 0.5 * h * implicit
        if abs(denom) < 1e-12:
            raise RdedError(f'implicit trapezoid step is singular at t={t[k]:g}')
        x[k] = (x[k - 1] + 0.5 * h * (f_prev + known[k] + beta0[k] * past)) / denom
        f_prev = rhs(k)
    return x


def solve_steps(spec, covariates, grid, drift=None):
    """Solve a delay model with tau0 >= 1 step, interval by interval"""
    if spec.tau0 < 1:
        raise ValueError('solve_steps needs tau0 >= 1 grid step; use solve_ode')
    x, m = _initial_segment(spec, grid)
    known = _known_terms(spec, covariates, grid, drift)
    if spec.is_distributed:
        return Trajectory(grid, _distributed_steps(spec, grid, known, x, m))
    return Trajectory(grid, _discrete_steps(spec, grid, known, x, m))


def _ode_rates(spec, grid):
    """b(t) in X' = b(t) X + q(t) from t0 on, for a model without delay in X"""
    m = spec.start_index
    t = grid.points[m:]
    if spec.is_distributed:
        beta0 = _curve(1.0 if spec.history_coef is None else spec.history_coef, t)
        gamma0 = _weight_table(spec.history_weight, grid, 0, np.arange(m, grid.count))[0]
        return beta0 * gamma0
    return _curve(spec.history_coef, t)


def solve_ode(spec, covariates, grid, drift=None):
    """Integrating-factor solution when the history acts at lag zero"""
    if spec.tau0 != 0:
        raise ValueError('solve_ode needs tau0 = 0; use solve_steps')
    x, m = _initial_segment(spec, grid)
    known = _known_terms(spec, covariates, grid, drift)
    rate = _ode_rates(spec, grid)
    big_b = cumulative_trapezoid(rate, dx=grid.step, initial=0.0)
    inner = cumulative_trapezoid(known[m:] * np.exp(-big_b), dx=grid.step, initial=0.0)
    x[m:] = np.exp(big_b) * (x[m] + inner)
    return Trajectory(grid, x)


def solve(spec, covariates, grid, drift=None):
    if spec.tau0 == 0:
        return solve_ode(spec, covariates, grid, drift)
    return solve_steps(spec, covariates, grid, drift)


def right_hand_side(spec, x, covariates, grid, drift=None):
    """Model derivative X'(t_k) along a solution, for k >= t0"""
    m = spec.start_index
    x = np.asarray(getattr(x, 'values', x), dtype=float)
    known = _known_terms(spec, covariates, grid, drift)
    t = grid.points
    k = np.arange(m, grid.count)
    if spec.tau0 == 0:
        history = _ode_rates(spec, grid) * x[m:]
    elif spec.is_distributed:
        beta0 = _curve(1.0 if spec.history_coef is None else spec.history_coef, t[m:])
        table = _weight_table(spec.history_weight, grid, spec.tau0, k)
        q = quadrature_weights(spec.tau0, grid.step)
        lagged = x[k[None, :] - np.arange(spec.tau0 + 1)[:, None]]
        history = beta0 * np.einsum('s,st,st->t', q, table, lagged)
    else:
        history = _curve(spec.history_coef, t[m:]) * x[k - spec.tau0]
    return known[m:] + history


def smooth_noise(rng, count, bandwidth_steps):
    """Unit-variance Gaussian-filtered white noise"""
    white = rng.standard_normal(count)
    if bandwidth_steps <= 0:
        return white
    width = int(np.ceil(4 * bandwidth_steps))
    impulse = np.zeros(2 * width + 1)
    impulse[width] = 1.0
    norm = np.sqrt(np.sum(gaussian_filter1d(impulse, bandwidth_steps, mode='constant') ** 2))
    return gaussian_filter1d(white, bandwidth_steps, mode='reflect') / norm


@dataclass(frozen=True)
class DriftProcess:
    """Mean-zero smooth drift Z(t) with marginal standard deviation `amplitude`"""

    amplitude: float = 0.0
    bandwidth: float = 3.0  # days

    def sample(self, grid, rng):
        if self.amplitude == 0:
            return np.zeros(grid.count)
        return self.amplitude * smooth_noise(rng, grid.count, self.bandwidth / grid.step)


@dataclass(frozen=True)
class CovariateLaw:
    """i.i.d. smooth covariate paths and random shifts of the initial function"""

    amplitude: float = 1.0
    bandwidth: float = 2.0  # days
    level_sd: float = 0.0
    initial_sd: float = 0.5
    initial_slope_sd: float = 0.05  # per day

    def sample(self, names, grid, rng):
        out = {}
        for name in names:
            level = self.level_sd * rng.standard_normal() if self.level_sd else 0.0
            path = smooth_noise(rng, grid.count, self.bandwidth / grid.step) if self.amplitude else 0.0
            out[name] = level + self.amplitude * np.broadcast_to(path, (grid.count,))
        return out

    def initial_shift(self, rng):
        """(level, slope) added to the initial function, slope measured from t0"""
        level = self.initial_sd * rng.standard_normal() if self.initial_sd else 0.0
        slope = self.initial_slope_sd * rng.standard_normal() if self.initial_slope_sd else 0.0
        return level, slope


@dataclass(frozen=True, eq=False)
class SimulationTruth:
    """Noise-free paths and exact derivatives behind a generated panel"""

    spec: RdedSpec
    states: np.ndarray  # n x K solutions
    derivatives: np.ndarray  # n x K, model rhs from t0 on
    drift: np.ndarray  # n x K
    covariates: Mapping[str, np.ndarray]

    @property
    def start_index(self):
        return self.spec.start_index


def subject_names(n):
    width = max(3, len(str(n)))
    return tuple(f'S{i + 1:0{width}d}' for i in range(n))


def generate_panel_with_truth(spec, grid, n, covariate_law=None, noise=0.0, seed=0,
                              drift=None):
    """Seeded panel plus the truth it was generated from"""
    if n < 2:
        raise ValueError('a panel needs n >= 2 subjects')
    covariate_law = covariate_law or CovariateLaw()
    drift = drift or DriftProcess()
    names = spec.covariate_names
    m = spec.start_index
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]

    states = np.empty((n, grid.count))
    derivs = np.empty((n, grid.count))
    drifts = np.empty((n, grid.count))
    observed = np.empty((n, grid.count))
    covs = {name: np.empty((n, grid.count)) for name in names}
    for i, rng in enumerate(rngs):
        u = covariate_law.sample(names, grid, rng)
        level, slope = covariate_law.initial_shift(rng)
        z = drift.sample(grid, rng)
        subject_spec = spec if not (level or slope) else _shifted(spec, grid, level, slope)
        x = solve(subject_spec, u, grid, z).values
        states[i] = x
        drifts[i] = z
        derivs[i, m:] = right_hand_side(subject_spec, x, u, grid, z)
        if m > 0:
            derivs[i, :m] = np.gradient(x[:m + 1], grid.step)[:m]
        observed[i] = x + (noise * rng.standard_normal(grid.count) if noise else 0.0)
        for name in names:
            covs[name][i] = u[name]

    subjects = subject_names(n)
    panel = TrajectoryPanel.from_arrays(subjects, grid, observed, covs)
    truth = SimulationTruth(spec, states, derivs, drifts, covs)
    logger.debug(f'[OK] generated {n} subjects on {grid.count} points (seed={seed})')
    return panel, truth


def _shifted(spec, grid, level, slope):
    initial = spec.initial
    t0 = grid.points[min(spec.start_index, grid.count - 1)]
    return replace(spec, initial=lambda t: _curve(initial, t) + level + slope * (np.asarray(t) - t0))


def generate_panel(spec, grid, n, covariate_law=None, noise=0.0, seed=0, drift=None):
    """Seeded synthetic panel: covariates, initial functions, drift and noise per subject"""
    panel, _ = generate_panel_with_truth(spec, grid, n, covariate_law, noise, seed, drift)
    return panel


# Simulation files ------------------------------------------------------------

def curve_from_config(value, grid):
    """Curve from a number, {"polynomial": [...]} or {"tabulated": [...]}"""
    if value is None or isinstance(value, (int, float)):
        return value
    if not isinstance(value, dict) or len(value) != 1:
        raise RdedError(f'cannot read curve {value!r}')
    (kind, data), = value.items()
    if kind == 'polynomial':
        poly = Polynomial(np.asarray(data, dtype=float))
        return lambda t: poly(np.asarray(t) - grid.start)
    if kind == 'tabulated':
        table = np.asarray(data, dtype=float)
        if table.shape != (grid.count,):
            raise RdedError(f'tabulated curve has {table.size} values for {grid.count} points')
        return lambda t: table[np.rint((np.asarray(t) - grid.start) / grid.step).astype(int)]
    raise RdedError(f'unknown curve kind {kind!r}')


def weight_from_config(value, grid, horizon):
    """History weight from {"polynomial2d"}, {"separable"} or {"tabulated"}"""
    if value is None:
        return None
    if not isinstance(value, dict) or len(value) != 1:
        raise RdedError(f'cannot read history weight {value!r}')
    (kind, data), = value.items()
    if kind == 'polynomial2d':
        coef = np.atleast_2d(np.asarray(data, dtype=float))
        return lambda s, t: polynomial.polyval2d(s, np.asarray(t) - grid.start, coef)
    if kind == 'separable':
        lag = curve_from_config(data.get('lag', 1.0), TimeGrid(0.0, grid.step, horizon + 1))
        time = curve_from_config(data.get('time', 1.0), grid)
        return lambda s, t: _curve(lag, s) * _curve(time, t)
    if kind == 'tabulated':
        table = np.asarray(data, dtype=float)
        if table.shape != (grid.count, horizon + 1):
            raise RdedError(f'tabulated weight must be {grid.count} x {horizon + 1}')
        return HistorySurface(np.arange(horizon + 1), np.arange(grid.count), table.T, grid.step)
    raise RdedError(f'unknown history weight kind {kind!r}')


@dataclass(frozen=True, eq=False)
class Simulation:
    """Everything needed to regenerate a simulated panel"""

    spec: RdedSpec
    grid: TimeGrid
    n: int
    covariate_law: CovariateLaw
    drift: DriftProcess
    noise: float
    seed: int

    def generate(self):
        return generate_panel_with_truth(self.spec, self.grid, self.n, self.covariate_law,
                                         self.noise, self.seed, self.drift)


def simulation_from_config(cfg, seed=None):
    """Build a Simulation from a SimulationConfig"""
    grid = TimeGrid(cfg.start, 1.0, cfg.count)
    coefs, lags, histories = {}, {}, {}
    for item in cfg.covariates:
        name = item['name']
        lags[name] = int(item.get('lag', 0))
        coefs[name] = curve_from_config(item.get('coef', 0.0), grid)
        if item.get('history_weight') is not None:
            horizon = int(item.get('history_horizon', 0))
            histories[name] = (weight_from_config(item['history_weight'], grid, horizon), horizon)
    lag_config = LagConfig(cfg.tau0, lags, max(cfg.search_max, cfg.tau0, *lags.values(), 0))
    spec = RdedSpec(
        lag_config=lag_config,
        intercept=curve_from_config(cfg.intercept, grid),
        history_coef=curve_from_config(cfg.history_coef, grid),
        history_weight=weight_from_config(cfg.history_weight, grid, cfg.tau0),
        covariate_coefs=coefs,
        covariate_history=histories,
        initial=None,
    )
    t0 = grid.points[min(spec.start_index, grid.count - 1)]
    level, slope = cfg.initial_level, cfg.initial_slope
    spec = replace(spec, initial=lambda t: level + slope * (np.asarray(t) - t0))
    law = CovariateLaw(cfg.covariate_amplitude, cfg.covariate_bandwidth,
                       cfg.covariate_level_sd, cfg.initial_sd, cfg.initial_slope_sd)
    return Simulation(spec, grid, cfg.n, law, DriftProcess(cfg.drift_amplitude, cfg.drift_bandwidth),
                      cfg.noise, cfg.seed if seed is None else seed)

