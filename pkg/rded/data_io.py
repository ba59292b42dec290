"""
Data and artifact I/O

Long ("tidy") CSV panels with one row per (subject, date, variable), atomic
artifact writing and the JSON/CSV report layouts emitted by the command line.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import OutputConfig
from .core import TimeGrid, TrajectoryPanel, validate_panel
from .errors import ConfigError, DuplicateRow, IrregularGrid, ParseError

logger = logging.getLogger(__name__)

LONG_COLUMNS = ['subject', 'date', 'variable', 'value']
DATE_FORMAT = '%Y-%m-%d'


def _parse_value(text):
    try:
        value = float(text)
    except ValueError:
        return np.nan
    return value if np.isfinite(value) else np.nan


def read_long_frame(path):
    """Read and check a long CSV; values are parsed exactly, line numbers are 1-based"""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.EmptyDataError:
        raise ParseError(1, 'file is empty') from None
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        raise ParseError(int(match.group(1)) if match else 0, str(e)) from e
    except UnicodeDecodeError as e:
        raise ParseError(0, f'not UTF-8: {e}') from e
    except OSError as e:
        raise ConfigError(f'cannot read input {path}: {e}') from e

    if list(frame.columns) != LONG_COLUMNS:
        raise ParseError(1, f'header must be {",".join(LONG_COLUMNS)}, got {",".join(frame.columns)}')

    dates = pd.to_datetime(frame['date'], format=DATE_FORMAT, errors='coerce')
    values = frame['value'].map(_parse_value)
    for row in range(len(frame)):
        line = row + 2
        if not frame.at[row, 'subject'] or not frame.at[row, 'variable']:
            raise ParseError(line, 'subject and variable must be non-empty')
        if pd.isna(dates.iat[row]):
            raise ParseError(line, f'bad ISO-8601 date {frame.at[row, "date"]!r}')
        if pd.isna(values.iat[row]):
            raise ParseError(line, f'bad value {frame.at[row, "value"]!r}')

    frame = frame.assign(date=dates, value=values.astype(float))
    duplicated = frame.duplicated(['subject', 'date', 'variable'])
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0])
        key = (frame.at[row, 'subject'], frame.at[row, 'date'].strftime(DATE_FORMAT),
               frame.at[row, 'variable'])
        raise DuplicateRow(row + 2, key)
    return frame


def _check_daily(dates, label):
    offsets = np.unique((dates - dates.min()).dt.days.to_numpy())
    days = np.diff(offsets)
    if days.size and np.any(days != 1):
        gap = int(days[days != 1][0])
        raise IrregularGrid(f'{label}: dates are not consecutive days (step of {gap} days)')


def ingest_long_csv(path, response_name='cases', covariate_names=None, include_subjects=None,
                    exclude_subjects=None):
    """Pivot a long CSV into a panel on the common daily grid

    Absent (subject, date, variable) rows become masked entries; subjects with no row
    at all for a used variable are dropped with a warning.
    """
    frame = read_long_frame(path)
    if include_subjects is not None:
        frame = frame[frame['subject'].isin(set(map(str, include_subjects)))]
    if exclude_subjects:
        frame = frame[~frame['subject'].isin(set(map(str, exclude_subjects)))]
    if frame.empty:
        raise ConfigError('no rows left after subject filtering')

    variables = set(frame['variable'])
    if response_name not in variables:
        raise ConfigError(f'response variable {response_name!r} not in {sorted(variables)}')
    if covariate_names is None:
        covariate_names = sorted(variables - {response_name})
    missing = [name for name in covariate_names if name not in variables]
    if missing:
        raise ConfigError(f'covariates not in the data: {missing}')
    used = [response_name, *covariate_names]
    frame = frame[frame['variable'].isin(used)]

    for subject, rows in frame.groupby('subject', sort=True):
        _check_daily(rows['date'], f'subject {subject}')
    _check_daily(frame['date'], 'panel')

    subjects = []
    for subject, rows in frame.groupby('subject', sort=True):
        absent = [name for name in used if name not in set(rows['variable'])]
        if absent:
            logger.warning(f'[WARN] dropping subject {subject}: no rows for {absent}')
            continue
        subjects.append(subject)
    frame = frame[frame['subject'].isin(subjects)]

    origin = frame['date'].min()
    count = int((frame['date'].max() - origin).days) + 1
    grid = TimeGrid(0.0, 1.0, count)
    pos = {subject: i for i, subject in enumerate(subjects)}
    matrices = {name: np.full((len(subjects), count), np.nan) for name in used}
    rows = frame['subject'].map(pos).to_numpy()
    cols = (frame['date'] - origin).dt.days.to_numpy()
    for name in used:
        pick = (frame['variable'] == name).to_numpy()
        matrices[name][rows[pick], cols[pick]] = frame['value'].to_numpy()[pick]

    masks = {name: np.isnan(m) for name, m in matrices.items()}
    panel = TrajectoryPanel.from_arrays(
        subjects, grid, matrices[response_name],
        {name: matrices[name] for name in covariate_names},
        response_mask=masks[response_name],
        covariate_masks={name: masks[name] for name in covariate_names},
    )
    logger.info(f'[OK] ingested {len(subjects)} subjects x {count} days from '
                f'{origin.strftime(DATE_FORMAT)} ({len(covariate_names)} covariates)')
    return validate_panel(panel)


def long_frame(panel, response_name='cases', origin_date='2020-04-05'):
    """Long rows (subject, date, variable, value) for the observed panel entries"""
    origin = pd.Timestamp(origin_date)
    grid = panel.grid
    dates = [(origin + pd.Timedelta(days=k)).strftime(DATE_FORMAT) for k in range(grid.count)]
    groups = [(response_name, panel.response)] + list(panel.covariates.items())
    records = []
    for i, subject in enumerate(panel.subjects):
        for k in range(grid.count):
            for name, trajs in groups:
                traj = trajs[i]
                if traj.observed[k]:
                    records.append((subject, dates[k], name, traj.values[k]))
    return pd.DataFrame.from_records(records, columns=LONG_COLUMNS)


def write_long_csv(panel, path, response_name='cases', origin_date='2020-04-05'):
    frame = long_frame(panel, response_name, origin_date)
    frame.to_csv(path, index=False, float_format=OutputConfig.FLOAT_FORMAT, lineterminator='\n')
    return path


class ArtifactWriter:
    """Atomic writes into one output directory; a failed run removes what it wrote"""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.written = []

    def __enter__(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.rollback()
        return False

    def write_text(self, name, text):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        target = self.out_dir / name
        fd, tmp = tempfile.mkstemp(prefix=f'.{name}.', suffix='.tmp', dir=self.out_dir)
        try:
            with os.fdopen(fd, 'w', encoding='utf-8', newline='') as fh:
                fh.write(text)
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self.written.append(target)
        logger.debug(f'[OK] wrote {target}')
        return target

    def write_json(self, name, payload):
        return self.write_text(name, json.dumps(payload, indent=2) + '\n')

    def write_frame(self, name, frame):
        return self.write_text(name, frame.to_csv(index=False, float_format=OutputConfig.FLOAT_FORMAT,
                                                  lineterminator='\n'))

    def rollback(self):
        for path in reversed(self.written):
            path.unlink(missing_ok=True)
            logger.warning(f'[WARN] removed partial artifact {path}')
        self.written.clear()


# Report layouts --------------------------------------------------------------

def _floats(values):
    return [float(v) for v in np.asarray(values).ravel()]


def _curves(curves):
    return {
        'intercept': _floats(curves.intercept),
        'history': _floats(curves.history),
        'covariates': {name: _floats(v) for name, v in curves.covariates.items()},
    }


def fit_payload(result, response_name='cases'):
    """fit.json content: curves, surface, lags, selection and backfit trace"""
    fit = result.fit
    grid = result.panel.grid
    surface = result.surface
    selection = result.selection
    scores = selection.threshold_scores
    return {
        'version': __version__,
        'response': response_name,
        'subjects': list(fit.subjects),
        'tau0': result.lag_config.tau0,
        'search_max': result.lag_config.search_max,
        'initial_lags': dict(result.initial_lags.lags),
        'lags': dict(result.lag_config.lags),
        'selected': list(fit.selected),
        'fit_domain': [int(fit.fit_domain[0]), int(fit.fit_domain[-1])],
        'times': _floats(fit.times),
        'coefficients': _curves(fit.coefficients),
        'raw_coefficients': _curves(fit.raw_coefficients),
        'surface': {
            'lag_days': _floats(surface.lag_axis * surface.step),
            'times': _floats(surface.times(grid)),
            'gamma': [_floats(row) for row in surface.weights],
        },
        'selection': {
            'threshold': selection.threshold,
            'proportions': dict(selection.proportions),
            'history_proportion': selection.history_proportion,
            'selected': list(selection.selected),
            'lambdas': None if selection.lambdas is None else _floats(selection.lambdas),
            'threshold_scores': None if scores is None else {str(p): float(s) for p, s in scores.items()},
        },
        'backfit': {
            'converged': result.trace.converged,
            'cycles': result.trace.cycles,
            'iterations': [
                {'cycle': step.cycle, 'covariate': step.covariate, 'lags': step.lags,
                 'criteria': list(step.criteria)}
                for step in result.trace.iterations
            ],
        },
    }


def _curve_frame(subjects, times, columns):
    n, t = len(subjects), len(times)
    data = {'subject': np.repeat(np.asarray(subjects, dtype=object), t),
            'time': np.tile(np.asarray(times, dtype=float), n)}
    for name, matrix in columns.items():
        data[name] = np.asarray(matrix, dtype=float).reshape(n * t)
    return pd.DataFrame(data)


def residuals_frame(report):
    return _curve_frame(report.subjects, report.times, {'residual': report.residuals})


def predictions_frame(lagged, zero_lag=None):
    columns = {'observed': lagged.observed, 'predicted': lagged.predicted}
    if zero_lag is not None:
        columns['predicted_zero_lag'] = zero_lag.predicted
    return _curve_frame(lagged.subjects, lagged.times, columns)


def surface_frame(surface, grid):
    s = surface.lag_axis * surface.step
    t = surface.times(grid)
    return pd.DataFrame({
        's': np.repeat(s.astype(float), t.size),
        't': np.tile(t, s.size),
        'gamma': surface.weights.reshape(-1),
    })
