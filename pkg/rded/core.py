"""
Core domain types

Time grid, trajectories, panels, lag configurations, history surfaces and fitted
models shared by every other module. All types are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import EmptyDomain, PanelValidationError, Violation, ViolationKind


def _frozen(values, dtype=float):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant observation grid t_k = start + k * step, k = 0..count-1"""

    start: float
    step: float
    count: int

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f'grid step must be > 0, got {self.step}')
        if int(self.count) != self.count or self.count < 1:
            raise ValueError(f'grid count must be a positive integer, got {self.count}')
        object.__setattr__(self, 'start', float(self.start))
        object.__setattr__(self, 'step', float(self.step))
        object.__setattr__(self, 'count', int(self.count))

    @property
    def points(self):
        return self.start + self.step * np.arange(self.count)

    @property
    def end(self):
        return self.start + self.step * (self.count - 1)

    def __len__(self):
        return self.count


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Values of one process on a grid, with an optional missing-value mask"""

    grid: TimeGrid
    values: np.ndarray
    mask: Optional[np.ndarray] = None  # True marks a missing raw observation

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(self.values))
        if self.mask is not None:
            mask = _frozen(self.mask, dtype=bool)
            object.__setattr__(self, 'mask', mask if mask.any() else None)

    @property
    def observed(self):
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return ~self.mask


@dataclass(frozen=True, eq=False)
class TrajectoryPanel:
    """n subjects, one response process, J named covariate processes and derivatives"""

    subjects: tuple
    response: tuple
    covariates: Mapping[str, tuple] = field(default_factory=dict)
    derivatives: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, 'subjects', tuple(str(s) for s in self.subjects))
        object.__setattr__(self, 'response', tuple(self.response))
        object.__setattr__(self, 'covariates',
                           {name: tuple(trajs) for name, trajs in self.covariates.items()})
        if self.derivatives is not None:
            object.__setattr__(self, 'derivatives', tuple(self.derivatives))

    @classmethod
    def from_arrays(cls, subjects, grid, response, covariates=None, derivatives=None,
                    response_mask=None, covariate_masks=None):
        """Build a panel from n x K matrices"""
        response = np.asarray(response, dtype=float)
        covariates = covariates or {}
        covariate_masks = covariate_masks or {}

        def rows(matrix, masks=None):
            matrix = np.asarray(matrix, dtype=float)
            return tuple(
                Trajectory(grid, matrix[i], None if masks is None else np.asarray(masks)[i])
                for i in range(matrix.shape[0])
            )

        return cls(
            subjects=tuple(subjects),
            response=rows(response, response_mask),
            covariates={name: rows(m, covariate_masks.get(name)) for name, m in covariates.items()},
            derivatives=None if derivatives is None else rows(derivatives),
        )

    @property
    def grid(self):
        return self.response[0].grid

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def covariate_names(self):
        return tuple(self.covariates)

    @property
    def has_masks(self):
        trajs = list(self.response) + [t for ts in self.covariates.values() for t in ts]
        return any(t.mask is not None for t in trajs)

    @cached_property
    def response_matrix(self):
        return _frozen(np.vstack([t.values for t in self.response]))

    @cached_property
    def derivative_matrix(self):
        if self.derivatives is None:
            raise ValueError('panel has no derivatives; run smoothing.estimate_derivatives first')
        return _frozen(np.vstack([t.values for t in self.derivatives]))

    def covariate_matrix(self, name):
        cache = self.__dict__.setdefault('_covariate_cache', {})
        if name not in cache:
            cache[name] = _frozen(np.vstack([t.values for t in self.covariates[name]]))
        return cache[name]

    def with_derivatives(self, matrix):
        grid = self.grid
        matrix = np.asarray(matrix, dtype=float)
        return replace(self, derivatives=tuple(Trajectory(grid, row) for row in matrix))

    def subset(self, indices):
        indices = list(indices)
        pick = lambda seq: tuple(seq[i] for i in indices)
        return TrajectoryPanel(
            subjects=pick(self.subjects),
            response=pick(self.response),
            covariates={name: pick(trajs) for name, trajs in self.covariates.items()},
            derivatives=None if self.derivatives is None else pick(self.derivatives),
        )

    def drop_subject(self, index):
        return self.subset(i for i in range(self.n_subjects) if i != index)

    def permuted(self, order):
        return self.subset(order)

    def restrict_covariates(self, names):
        return replace(self, covariates={name: self.covariates[name] for name in names})


def validate_panel(panel):
    """Return the panel if every invariant holds, else raise with all violations"""
    violations = []
    if panel.n_subjects < 2:
        violations.append(Violation(ViolationKind.TOO_FEW_SUBJECTS,
                                    f'{panel.n_subjects} subject(s); leave-one-out needs at least 2'))
    if not panel.response:
        raise PanelValidationError(violations or [
            Violation(ViolationKind.TOO_FEW_SUBJECTS, 'panel has no responses')])
    grid = panel.grid

    groups = [('response', panel.response)]
    groups += [(f'covariate {name}', trajs) for name, trajs in panel.covariates.items()]
    if panel.derivatives is not None:
        groups.append(('derivative', panel.derivatives))

    for label, trajs in groups:
        if len(trajs) != panel.n_subjects:
            violations.append(Violation(ViolationKind.GRID_MISMATCH,
                                        f'{label} has {len(trajs)} trajectories for {panel.n_subjects} subjects'))
        for subject, traj in zip(panel.subjects, trajs):
            if traj.grid != grid or traj.values.shape != (grid.count,):
                violations.append(Violation(
                    ViolationKind.GRID_MISMATCH,
                    f'{label} of {subject} has K={traj.values.shape[0]} on {traj.grid}, '
                    f'expected K={grid.count} on {grid}'))
                continue
            observed = traj.observed
            if traj.mask is not None and traj.mask.shape != traj.values.shape:
                violations.append(Violation(ViolationKind.GRID_MISMATCH,
                                            f'{label} mask of {subject} has wrong length'))
                continue
            bad = ~np.isfinite(traj.values) & observed
            if bad.any():
                violations.append(Violation(
                    ViolationKind.NON_FINITE,
                    f'{label} of {subject} has {int(bad.sum())} non-finite observed value(s)'))

    if violations:
        raise PanelValidationError(violations)
    return panel


@dataclass(frozen=True)
class LagConfig:
    """Distributed-delay horizon tau0 and per-covariate discrete lags, in grid steps"""

    tau0: int
    lags: Mapping[str, int] = field(default_factory=dict)
    search_max: int = 21

    def __post_init__(self):
        lags = {str(name): int(lag) for name, lag in dict(self.lags).items()}
        object.__setattr__(self, 'lags', lags)
        if int(self.tau0) != self.tau0 or self.tau0 < 0:
            raise ValueError(f'tau0 must be a nonnegative integer, got {self.tau0}')
        object.__setattr__(self, 'tau0', int(self.tau0))
        if self.search_max < 0:
            raise ValueError('search_max must be nonnegative')
        for name, lag in lags.items():
            if not 0 <= lag <= self.search_max:
                raise ValueError(f'lag of {name} = {lag} outside 0..{self.search_max}')

    def __hash__(self):
        return hash((self.tau0, tuple(self.lags.items()), self.search_max))

    @property
    def max_lag(self):
        return max([self.tau0, *self.lags.values()])

    def with_lag(self, name, lag):
        return replace(self, lags={**self.lags, name: lag})

    def restricted(self, names):
        return replace(self, lags={name: self.lags[name] for name in names})

    def zero_lag(self):
        """All covariate lags and tau0 set to zero, as in a RDE without delays"""
        return replace(self, tau0=0, lags={name: 0 for name in self.lags})


def fit_domain(grid, lag_config):
    """Grid indices (0-based) where every lagged value and the history window exist"""
    start = lag_config.max_lag
    if start >= grid.count:
        raise EmptyDomain(f'max lag {start} leaves no usable point on a grid of {grid.count}')
    return range(start, grid.count)


def quadrature_weights(tau0, step):
    """Trapezoid weights over s = 0..tau0 steps; a zero-width window is a point evaluation"""
    if tau0 == 0:
        return np.ones(1)
    w = np.full(tau0 + 1, float(step))
    w[0] = w[-1] = 0.5 * step
    return w


@dataclass(frozen=True, eq=False)
class HistorySurface:
    """History index gamma(s, t) tabulated on lag steps x grid indices"""

    lag_axis: np.ndarray
    time_index: np.ndarray
    weights: np.ndarray
    step: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'lag_axis', _frozen(self.lag_axis, dtype=int))
        object.__setattr__(self, 'time_index', _frozen(self.time_index, dtype=int))
        object.__setattr__(self, 'weights', _frozen(self.weights))
        expected = (len(self.lag_axis), len(self.time_index))
        if self.weights.shape != expected:
            raise ValueError(f'surface weights have shape {self.weights.shape}, expected {expected}')
        if not np.all(np.isfinite(self.weights)):
            raise ValueError('surface weights must be finite')

    @classmethod
    def from_function(cls, gamma: Callable, grid: TimeGrid, tau0: int, time_index=None):
        """Tabulate gamma(s_days, t) on the grid; default time index is tau0..K-1"""
        if time_index is None:
            time_index = np.arange(tau0, grid.count)
        time_index = np.asarray(time_index, dtype=int)
        s = np.arange(tau0 + 1) * grid.step
        t = grid.points[time_index]
        values = np.asarray(gamma(s[:, None], t[None, :]), dtype=float)
        values = np.broadcast_to(values, (tau0 + 1, len(time_index)))
        return cls(np.arange(tau0 + 1), time_index, values, grid.step)

    @property
    def tau0(self):
        return int(self.lag_axis[-1])

    def times(self, grid):
        return grid.points[self.time_index]

    def weights_at(self, indices):
        """Columns of gamma for the given grid indices"""
        indices = np.asarray(indices, dtype=int)
        pos = np.searchsorted(self.time_index, indices)
        ok = (pos < len(self.time_index))
        ok[ok] = self.time_index[pos[ok]] == indices[ok]
        if not np.all(ok):
            raise EmptyDomain('requested time points lie outside the history surface domain')
        return self.weights[:, pos]


@dataclass(frozen=True, eq=False)
class CoefficientCurves:
    """alpha(t), beta_0(t) and beta_j(t) on the fit domain"""

    intercept: np.ndarray
    history: np.ndarray
    covariates: Mapping[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, 'intercept', _frozen(self.intercept))
        object.__setattr__(self, 'history', _frozen(self.history))
        object.__setattr__(self, 'covariates',
                           {name: _frozen(v) for name, v in self.covariates.items()})

    def columns(self):
        """Coefficient matrix T x p in design column order (1, H, U_j...)"""
        cols = [self.intercept, self.history, *self.covariates.values()]
        return np.column_stack(cols)

    def map(self, fn):
        return CoefficientCurves(fn(self.intercept), fn(self.history),
                                 {name: fn(v) for name, v in self.covariates.items()})


@dataclass(frozen=True, eq=False)
class FittedRded:
    """Fitted hybrid RDED: reported (smoothed) and raw coefficient curves plus residuals"""

    coefficients: CoefficientCurves
    raw_coefficients: CoefficientCurves
    surface: HistorySurface
    lag_config: LagConfig
    selected: tuple
    residuals: np.ndarray
    fit_domain: range
    times: np.ndarray
    subjects: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'selected', tuple(self.selected))
        object.__setattr__(self, 'residuals', _frozen(self.residuals))
        object.__setattr__(self, 'times', _frozen(self.times))

    @property
    def intercept(self):
        return self.coefficients.intercept

    @property
    def history_coef(self):
        return self.coefficients.history

    @property
    def covariate_coefs(self):
        return self.coefficients.covariates
