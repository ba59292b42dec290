"""
RDED Configuration

Centralized defaults for smoothing, learning and output settings.
Can be overridden with environment variables; run and simulation settings are
read from JSON files given on the command line.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .errors import ConfigError


class SmoothingConfig:
    """Kernel smoother defaults (bandwidths in days unless noted)"""

    DATA_BANDWIDTH = float(os.getenv('RDED_DATA_BANDWIDTH', '1.5'))
    COEFFICIENT_BANDWIDTH = float(os.getenv('RDED_COEFFICIENT_BANDWIDTH', '20'))

    # Derivatives: local quadratic, bandwidth by leave-one-point-out CV
    DERIVATIVE_DEGREE = 2
    DERIVATIVE_CV_GRID = 8

    # History surface, in grid steps
    SURFACE_LAG_BANDWIDTH = 2.0
    SURFACE_TIME_BANDWIDTH = 10.0
    SURFACE_MIN_WINDOW_POINTS = 4

    MAX_BANDWIDTH_DOUBLINGS = 3


class LearnerConfig:
    """Lag search, selection and solver defaults"""

    TAU0 = int(os.getenv('RDED_TAU0', '14'))
    SEARCH_MAX = int(os.getenv('RDED_SEARCH_MAX', '21'))
    P_STAR = float(os.getenv('RDED_P_STAR', '0.3'))
    P_STAR_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
    CYCLE_CAP = 10

    LASSO_PATH_LENGTH = 50
    LASSO_PATH_RATIO = 1e-3
    LASSO_TOL = 1e-10
    LASSO_MAX_SWEEPS = 10_000

    RIDGE_GRID_SIZE = 30
    RIDGE_GRID_RANGE = (1e-8, 1e2)  # relative to the largest squared singular value


class OutputConfig:
    """Artifact naming and number formatting"""

    FLOAT_FORMAT = '%.17g'
    FIT_FILE = 'fit.json'
    RESIDUALS_FILE = 'residuals.csv'
    PREDICTIONS_FILE = 'predictions.csv'
    SURFACE_FILE = 'surface.csv'
    MANIFEST_FILE = 'run_manifest.json'
    COMPARISON_FILE = 'comparison.json'
    DATA_FILE = 'data.csv'
    TRUTH_FILE = 'truth.json'


DERIVATIVE_METHODS = ('local_poly', 'difference_quotient')


def _check_positive(name, value):
    if value is None or not value > 0:
        raise ConfigError(f'{name} must be > 0, got {value!r}')


@dataclass(frozen=True)
class PipelineConfig:
    """Settings consumed by the learning pipeline"""

    tau0: int = LearnerConfig.TAU0
    search_max: int = LearnerConfig.SEARCH_MAX
    p_star: Optional[float] = LearnerConfig.P_STAR  # None -> chosen by LOO-CV
    cycle_cap: int = LearnerConfig.CYCLE_CAP
    ridge: Optional[float] = None  # None -> GCV
    data_bandwidth: float = SmoothingConfig.DATA_BANDWIDTH
    coefficient_bandwidth: float = SmoothingConfig.COEFFICIENT_BANDWIDTH
    derivative_bandwidth: Optional[float] = None  # None -> CV
    derivative_method: str = 'local_poly'
    surface_lag_bandwidth: float = SmoothingConfig.SURFACE_LAG_BANDWIDTH
    surface_time_bandwidth: float = SmoothingConfig.SURFACE_TIME_BANDWIDTH
    strict_loo: bool = False
    refit_surface_per_fold: bool = False

    def __post_init__(self):
        if self.tau0 < 0 or self.search_max < 0:
            raise ConfigError('tau0 and search_max must be nonnegative')
        if self.cycle_cap < 0:
            raise ConfigError('cycle_cap must be nonnegative')
        if self.p_star is not None and not 0.0 <= self.p_star <= 1.0:
            raise ConfigError(f'p_star must lie in [0, 1], got {self.p_star}')
        if self.derivative_method not in DERIVATIVE_METHODS:
            raise ConfigError(f'derivative_method must be one of {DERIVATIVE_METHODS}')
        for name in ('data_bandwidth', 'coefficient_bandwidth',
                     'surface_lag_bandwidth', 'surface_time_bandwidth'):
            _check_positive(name, getattr(self, name))
        if self.derivative_bandwidth is not None:
            _check_positive('derivative_bandwidth', self.derivative_bandwidth)
        if self.ridge is not None and not self.ridge >= 0:
            raise ConfigError(f'ridge must be nonnegative, got {self.ridge}')


def _cv_or_float(name, value, keyword='cv'):
    """Parse a number or the literal keyword ("cv" unless given), returned as None"""
    if value is None or (isinstance(value, str) and value.lower() == keyword):
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f'{name} must be a number or "{keyword}", got {value!r}') from None


@dataclass
class RunConfig:
    """Configuration of one `fit` / `evaluate` / `compare` run"""

    input_path: str = ''
    response_name: str = 'cases'
    covariate_names: list = field(default_factory=list)
    tau0: int = LearnerConfig.TAU0
    search_max: int = LearnerConfig.SEARCH_MAX
    p_star: Union[float, str] = LearnerConfig.P_STAR
    data_bandwidth: float = SmoothingConfig.DATA_BANDWIDTH
    coefficient_bandwidth: float = SmoothingConfig.COEFFICIENT_BANDWIDTH
    derivative_bandwidth: Union[float, str] = 'cv'
    derivative_method: str = 'local_poly'
    cycle_cap: int = LearnerConfig.CYCLE_CAP
    ridge: Union[float, str] = 'gcv'
    surface_lag_bandwidth: float = SmoothingConfig.SURFACE_LAG_BANDWIDTH
    surface_time_bandwidth: float = SmoothingConfig.SURFACE_TIME_BANDWIDTH
    seed: int = 0
    output_dir: str = 'out'
    strict_loo: bool = False
    refit_surface_per_fold: bool = False
    include_subjects: Optional[list] = None
    exclude_subjects: Optional[list] = None

    def __post_init__(self):
        self.pipeline_config()

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f'unknown run config keys: {unknown}')
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f'cannot read run config {path}: {e}') from e
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)

    def pipeline_config(self):
        return PipelineConfig(
            tau0=int(self.tau0),
            search_max=int(self.search_max),
            p_star=_cv_or_float('p_star', self.p_star),
            cycle_cap=int(self.cycle_cap),
            ridge=_cv_or_float('ridge', self.ridge, keyword='gcv'),
            data_bandwidth=float(self.data_bandwidth),
            coefficient_bandwidth=float(self.coefficient_bandwidth),
            derivative_bandwidth=_cv_or_float('derivative_bandwidth', self.derivative_bandwidth),
            derivative_method=self.derivative_method,
            surface_lag_bandwidth=float(self.surface_lag_bandwidth),
            surface_time_bandwidth=float(self.surface_time_bandwidth),
            strict_loo=bool(self.strict_loo),
            refit_surface_per_fold=bool(self.refit_surface_per_fold),
        )


@dataclass
class SimulationConfig:
    """Generator specification for the `simulate` subcommand

    Curves are a number, {"polynomial": [c0, c1, ...]} in t (days since start) or
    {"tabulated": [one value per grid point]}. The history weight is null,
    {"polynomial2d": [[a_ij]]} meaning sum a_ij s^i t^j, {"separable": {"lag": curve,
    "time": curve}} or {"tabulated": [[per lag step] per grid point... ]}.
    """

    n: int = 20
    count: int = 130
    start: float = 0.0
    tau0: int = 0
    search_max: int = LearnerConfig.SEARCH_MAX
    seed: int = 0
    noise: float = 0.0
    drift_amplitude: float = 0.0
    drift_bandwidth: float = 3.0
    response_name: str = 'cases'
    intercept: object = 0.0
    history_coef: object = None
    history_weight: object = None
    covariates: list = field(default_factory=list)  # [{"name", "coef", "lag"}]
    covariate_amplitude: float = 1.0
    covariate_bandwidth: float = 2.0
    covariate_level_sd: float = 0.0
    initial_level: float = 1.0
    initial_sd: float = 0.0
    initial_slope_sd: float = 0.0
    initial_slope: float = 0.0
    origin_date: str = '2020-04-05'

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError('simulation needs n >= 2 subjects')
        if self.count < 1:
            raise ConfigError('simulation needs count >= 1 grid points')
        if self.tau0 < 0:
            raise ConfigError('tau0 must be nonnegative')
        if min(self.noise, self.drift_amplitude, self.initial_sd, self.initial_slope_sd) < 0:
            raise ConfigError('noise, drift_amplitude and initial sds must be nonnegative')
        _check_positive('drift_bandwidth', self.drift_bandwidth)
        _check_positive('covariate_bandwidth', self.covariate_bandwidth)
        names = [c.get('name') for c in self.covariates]
        if any(not name for name in names) or len(set(names)) != len(names):
            raise ConfigError('every covariate needs a unique name')
        if self.response_name in names:
            raise ConfigError('response name collides with a covariate name')
        for c in self.covariates:
            lag = int(c.get('lag', 0))
            if not 0 <= lag <= self.search_max:
                raise ConfigError(f'lag of {c["name"]} must lie in 0..{self.search_max}')

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f'unknown simulation config keys: {unknown}')
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f'cannot read simulation config {path}: {e}') from e
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)
