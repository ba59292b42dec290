"""
Error types

Every failure the toolkit reports on purpose derives from RdedError so the CLI can
turn it into a stage-tagged diagnostic.
"""

from dataclasses import dataclass
from enum import Enum


class RdedError(Exception):
    """Base class for toolkit errors"""


class ViolationKind(str, Enum):
    GRID_MISMATCH = 'GridMismatch'
    NON_FINITE = 'NonFinite'
    TOO_FEW_SUBJECTS = 'TooFewSubjects'


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    message: str

    def __str__(self):
        return f'{self.kind.value}: {self.message}'


class PanelValidationError(RdedError):
    """Raised with the full list of panel invariant violations"""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__('; '.join(str(v) for v in self.violations))

    @property
    def kinds(self):
        return {v.kind for v in self.violations}


class EmptyDomain(RdedError):
    """No grid index has every lagged value available"""


class SingularDesign(RdedError):
    """Local polynomial design is rank deficient at an evaluation point"""

    def __init__(self, message, eval_at=None, subject=None):
        self.eval_at = eval_at
        self.subject = subject
        super().__init__(message)


class RankDeficient(RdedError):
    """Least-squares design lost full column rank"""

    def __init__(self, column, time=None):
        self.column = column
        self.time = time
        where = '' if time is None else f' at t={time:g}'
        super().__init__(f'design column {column} is linearly dependent{where}')


class NoConvergence(RdedError):
    """Coordinate descent hit its sweep cap"""

    def __init__(self, sweeps, max_violation):
        self.sweeps = sweeps
        self.max_violation = max_violation
        super().__init__(f'no convergence after {sweeps} sweeps (max KKT violation {max_violation:.3e})')


class DomainUnderflow(RdedError):
    """A covariate or initial segment does not reach far enough into the past"""


class ParseError(RdedError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f'line {line}: {message}')


class IrregularGrid(RdedError):
    """Observation dates are not on a gap-free daily grid"""


class DuplicateRow(RdedError):
    def __init__(self, line, key):
        self.line = line
        self.key = key
        super().__init__(f'line {line}: duplicate row for {key}')


class ConfigError(RdedError):
    """Invalid run or simulation configuration"""


class StageError(RdedError):
    """Wraps a failure with the name of the pipeline stage it happened in"""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f'stage={stage}: {type(cause).__name__}: {cause}')
