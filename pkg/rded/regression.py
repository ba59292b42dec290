"""
Least-squares workhorses

Weighted least squares, leave-one-out residuals for batches of per-timepoint OLS
problems, ridge scalar-on-function regression with GCV, and LASSO by cyclic
coordinate descent with leave-one-out tuning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .config import LearnerConfig
from .errors import NoConvergence, RankDeficient

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass(frozen=True)
class Penalty:
    kind: str = 'none'  # none | ridge | lasso
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ('none', 'ridge', 'lasso'):
            raise ValueError(f'unknown penalty {self.kind!r}')
        if self.lam < 0:
            raise ValueError('penalty parameter must be >= 0')

    @classmethod
    def ridge(cls, lam):
        return cls('ridge', lam)

    @classmethod
    def lasso(cls, lam):
        return cls('lasso', lam)


@dataclass(frozen=True, eq=False)
class DesignProblem:
    """n x p design, response, optional nonnegative weights and a penalty

    For LASSO problems the design holds the predictors only; the intercept is
    fitted implicitly and never penalized.
    """

    design: np.ndarray
    response: np.ndarray
    weights: Optional[np.ndarray] = None
    penalty: Penalty = field(default_factory=Penalty)
    intercept_penalized: bool = False

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design, dtype=float))
        response = np.asarray(self.response, dtype=float).ravel()
        if design.shape[0] != response.shape[0]:
            raise ValueError(f'design has {design.shape[0]} rows, response {response.shape[0]}')
        object.__setattr__(self, 'design', design)
        object.__setattr__(self, 'response', response)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.shape != response.shape or np.any(w < 0) or not w.sum() > 0:
                raise ValueError('weights must be nonnegative, one per row, with positive sum')
            object.__setattr__(self, 'weights', w)
        if self.intercept_penalized:
            raise ValueError('the intercept is never penalized')

    @property
    def n(self):
        return self.design.shape[0]

    def normalized_weights(self):
        """Weights rescaled to sum to n (ones when absent)"""
        if self.weights is None:
            return np.ones(self.n)
        return self.weights * (self.n / self.weights.sum())


def solve_wls(problem):
    """Minimize sum w_i (y_i - x_i'b)^2; RankDeficient names the first dependent column"""
    sw = np.sqrt(problem.normalized_weights())
    a = problem.design * sw[:, None]
    q, r = linalg.qr(a, mode='economic')
    diag = np.abs(np.diag(r))
    p = a.shape[1]
    if diag.size < p:
        raise RankDeficient(diag.size)
    scale = max(diag.max(initial=0.0), np.finfo(float).tiny)
    bad = np.flatnonzero(diag <= RANK_TOL * scale)
    if bad.size:
        raise RankDeficient(int(bad[0]))
    return linalg.solve_triangular(r, q.T @ (problem.response * sw))


def loo_residuals(designs, responses):
    """Leave-one-out residuals of many OLS problems at once

    designs: (B, n, p), responses: (B, n). Uses e_i / (1 - h_ii), which equals the
    residual of a refit without row i; pseudo-inverses keep degenerate slices finite.
    """
    designs = np.asarray(designs, dtype=float)
    responses = np.asarray(responses, dtype=float)
    pinv = np.linalg.pinv(designs)  # (B, p, n)
    coef = np.einsum('bpn,bn->bp', pinv, responses)
    fitted = np.einsum('bnp,bp->bn', designs, coef)
    leverage = np.einsum('bnp,bpn->bn', designs, pinv)
    return (responses - fitted) / np.maximum(1.0 - leverage, 1e-12)


@dataclass(frozen=True, eq=False)
class FlmResult:
    intercept: float
    gamma: np.ndarray
    ridge: float
    gcv: Optional[np.ndarray] = None


def ridge_grid(singular_values, size=LearnerConfig.RIDGE_GRID_SIZE,
               span=LearnerConfig.RIDGE_GRID_RANGE):
    top = float(singular_values.max(initial=0.0)) ** 2
    top = top if top > 0 else 1.0
    return top * np.geomspace(span[0], span[1], size)


def solve_flm(history_matrix, response, quadrature_weights, ridge=None):
    """Ridge scalar-on-function regression at one time point

    Model y_i = a + sum_s w_s gamma_s X_i(t - s): the integral is discretized by the
    quadrature weights w and gamma is ridge-penalized (intercept free). When ridge
    is None it is chosen by generalized cross-validation over a log grid.
    """
    x = np.asarray(history_matrix, dtype=float) * np.asarray(quadrature_weights, dtype=float)
    y = np.asarray(response, dtype=float)
    n = y.shape[0]
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    yc = y - y_mean
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    uty = u.T @ yc

    def coefficients(lam):
        with np.errstate(divide='ignore', invalid='ignore'):
            factor = np.where(s > 0, s / (s * s + lam), 0.0)
        return vt.T @ (factor * uty)

    scores = None
    if ridge is None:
        grid = ridge_grid(s)
        scores = np.empty(grid.size)
        resid_outside = yc @ yc - uty @ uty
        for m, lam in enumerate(grid):
            shrink = s * s / (s * s + lam)
            rss = resid_outside + np.sum(((1.0 - shrink) * uty) ** 2)
            df = shrink.sum() + 1.0
            scores[m] = n * rss / max(n - df, 1e-12) ** 2
        ridge = float(grid[int(np.argmin(scores))])

    gamma = coefficients(ridge)
    return FlmResult(float(y_mean - x_mean @ gamma), gamma, float(ridge), scores)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _standardize(x, y, w):
    """Weighted centering/scaling; constant columns get scale 1 and stay at zero"""
    wsum = w.sum(axis=-1, keepdims=True)
    mu = np.einsum('...n,...np->...p', w, x) / wsum
    xc = x - mu[..., None, :]
    var = np.einsum('...n,...np->...p', w, xc * xc) / wsum
    sd = np.sqrt(var)
    constant = sd <= 1e-12 * (1.0 + np.abs(mu))
    sd = np.where(constant, 1.0, sd)
    xs = np.where(constant[..., None, :], 0.0, xc / sd[..., None, :])
    y_mean = np.asarray(np.einsum('...n,...n->...', w, y) / wsum[..., 0])
    return xs, y - y_mean[..., None], mu, sd, y_mean, constant


def _gram(xs, yc, w):
    n = np.asarray(w.sum(axis=-1))
    g = np.einsum('...n,...np,...nq->...pq', w, xs, xs) / n[..., None, None]
    c = np.einsum('...n,...np,...n->...p', w, xs, yc) / n[..., None]
    return g, c


def _lasso_objective(g, c, b, lam):
    return 0.5 * np.einsum('...p,...pq,...q->...', b, g, b) - np.einsum('...p,...p->...', c, b) \
        + lam * np.abs(b).sum(axis=-1)


def coordinate_descent(g, c, lam, b0=None, tol=LearnerConfig.LASSO_TOL,
                       max_sweeps=LearnerConfig.LASSO_MAX_SWEEPS, track_objective=False):
    """Cyclic coordinate descent on 0.5 b'Gb - c'b + lam |b|_1 for a batch of problems

    g: (F, p, p), c: (F, p), lam: scalar or (F,). Columns with G_jj = 0 stay at zero.
    Returns (b, sweeps, objective path or None).
    """
    g = np.asarray(g, dtype=float)
    c = np.asarray(c, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), c.shape[:1])
    b = np.zeros_like(c) if b0 is None else np.array(b0, dtype=float)
    diag = np.einsum('fjj->fj', g)
    live = diag > 0
    safe_diag = np.where(live, diag, 1.0)
    p = c.shape[1]
    path = [_lasso_objective(g, c, b, lam)] if track_objective else None

    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in range(p):
            z = c[:, j] - np.einsum('fk,fk->f', g[:, j, :], b) + diag[:, j] * b[:, j]
            new = np.where(live[:, j], soft_threshold(z, lam) / safe_diag[:, j], 0.0)
            change = np.abs(new - b[:, j])
            if change.size:
                max_change = max(max_change, float(change.max()))
            b[:, j] = new
        if track_objective:
            path.append(_lasso_objective(g, c, b, lam))
        if max_change < tol:
            return b, sweep, path
    violation = float(np.max(kkt_violation(g, c, b, lam), initial=0.0))
    raise NoConvergence(max_sweeps, violation)


def kkt_violation(g, c, b, lam):
    """Largest KKT violation per problem in the standardized frame"""
    grad = np.einsum('fpq,fq->fp', g, b) - c
    lam = np.broadcast_to(np.asarray(lam, dtype=float), c.shape[:1])[:, None]
    active = b != 0
    live = np.einsum('fjj->fj', g) > 0
    zero_part = np.maximum(np.abs(grad) - lam, 0.0)
    active_part = np.abs(grad + lam * np.sign(b))
    viol = np.where(active, active_part, zero_part)
    return np.where(live, viol, 0.0).max(axis=1, initial=0.0)


@dataclass(frozen=True, eq=False)
class LassoResult:
    intercept: float
    coefficients: np.ndarray
    lam: float
    sweeps: int
    kkt_violation: float
    objective_path: Optional[np.ndarray] = None
    standardized: Optional[np.ndarray] = None

    @property
    def active(self):
        return self.coefficients != 0


def _to_original_scale(bs, mu, sd, y_mean):
    beta = bs / sd
    intercept = y_mean - np.einsum('...p,...p->...', beta, mu)
    return intercept, beta


def solve_lasso(problem, tol=LearnerConfig.LASSO_TOL, max_sweeps=LearnerConfig.LASSO_MAX_SWEEPS):
    """LASSO on internally standardized columns, reported on the original scale"""
    if problem.penalty.kind != 'lasso':
        raise ValueError('solve_lasso needs a lasso penalty')
    w = problem.normalized_weights()
    xs, yc, mu, sd, y_mean, _ = _standardize(problem.design, problem.response, w)
    g, c = _gram(xs, yc, w)
    lam = problem.penalty.lam
    b, sweeps, path = coordinate_descent(g[None], c[None], lam, tol=tol,
                                         max_sweeps=max_sweeps, track_objective=True)
    violation = float(kkt_violation(g[None], c[None], b, lam)[0])
    intercept, beta = _to_original_scale(b[0], mu, sd, y_mean)
    logger.debug(f'[OK] lasso lam={lam:.4g} converged in {sweeps} sweeps (KKT {violation:.2e})')
    return LassoResult(float(intercept), beta, float(lam), sweeps, violation,
                       np.array([float(v[0]) for v in path]), b[0])


def lambda_max(problem_or_design, response=None, weights=None):
    """Smallest lambda with all slopes zero, in the standardized frame"""
    if isinstance(problem_or_design, DesignProblem):
        design, response = problem_or_design.design, problem_or_design.response
        w = problem_or_design.normalized_weights()
    else:
        design = np.asarray(problem_or_design, dtype=float)
        w = np.ones(design.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    xs, yc, *_ = _standardize(design, np.asarray(response, dtype=float), w)
    _, c = _gram(xs, yc, w)
    return float(np.abs(c).max(initial=0.0))


@dataclass(frozen=True, eq=False)
class LassoCvResult:
    """LOO-tuned LASSO for a batch of B problems"""

    lam: np.ndarray  # (B,)
    intercept: np.ndarray  # (B,)
    coefficients: np.ndarray  # (B, p)
    lambdas: np.ndarray  # (B, L)
    cv_error: np.ndarray  # (B, L)

    @property
    def active(self):
        return self.coefficients != 0


def _pick_sparse_argmin(errors):
    """First index (largest lambda) reaching the minimum, with a relative tie tolerance"""
    best = errors.min(axis=-1, keepdims=True)
    tied = errors <= best + 1e-12 * np.abs(best)
    return np.argmax(tied, axis=-1)


def lasso_path_cv_batch(designs, responses, n_lambdas=LearnerConfig.LASSO_PATH_LENGTH,
                        ratio=LearnerConfig.LASSO_PATH_RATIO, tol=LearnerConfig.LASSO_TOL,
                        max_sweeps=LearnerConfig.LASSO_MAX_SWEEPS):
    """Leave-one-out LASSO path for B problems sharing n and p

    Each problem gets a log grid from its own lambda_max down to ratio * lambda_max;
    every (problem, held-out row) pair is solved along the grid with warm starts.
    """
    x = np.asarray(designs, dtype=float)
    y = np.asarray(responses, dtype=float)
    n_problems, n, p = x.shape
    if n < 3:
        raise ValueError('leave-one-out LASSO needs n >= 3')
    ones = np.ones((n_problems, n))

    xs, yc, mu, sd, y_mean, _ = _standardize(x, y, ones)
    g_full, c_full = _gram(xs, yc, ones)
    lam_max = np.abs(c_full).max(axis=1, initial=0.0)
    lambdas = lam_max[:, None] * np.geomspace(1.0, ratio, n_lambdas)[None, :]

    # Folds: row i held out -> (B, n, n-1, p)
    keep = np.array([np.delete(np.arange(n), i) for i in range(n)])
    xf = x[:, keep, :]
    yf = y[:, keep]
    wf = np.ones(yf.shape)
    xs_f, yc_f, mu_f, sd_f, ym_f, const_f = _standardize(xf, yf, wf)
    g_f, c_f = _gram(xs_f, yc_f, wf)
    folds = n_problems * n
    g_f = g_f.reshape(folds, p, p)
    c_f = c_f.reshape(folds, p)

    held_x = (x - mu_f) / sd_f  # (B, n, p): row i standardized with fold i statistics
    held_x = np.where(const_f, 0.0, held_x)
    b = np.zeros((folds, p))
    errors = np.empty((n_problems, n_lambdas))
    for m in range(n_lambdas):
        lam = np.repeat(lambdas[:, m], n)
        b, _, _ = coordinate_descent(g_f, c_f, lam, b0=b, tol=tol, max_sweeps=max_sweeps)
        pred = ym_f + np.einsum('bip,bip->bi', held_x, b.reshape(n_problems, n, p))
        errors[:, m] = np.mean((y - pred) ** 2, axis=1)

    best = _pick_sparse_argmin(errors)
    lam_star = lambdas[np.arange(n_problems), best]
    b_full, _, _ = coordinate_descent(g_full, c_full, lam_star, tol=tol, max_sweeps=max_sweeps)
    intercept, beta = _to_original_scale(b_full, mu, sd, y_mean)
    return LassoCvResult(lam_star, intercept, beta, lambdas, errors)


def lasso_path_cv(problem, **kwargs):
    """Leave-one-out tuned LASSO for a single problem: (lambda*, LassoResult)"""
    if problem.weights is not None:
        raise ValueError('lasso_path_cv does not support observation weights')
    result = lasso_path_cv_batch(problem.design[None], problem.response[None], **kwargs)
    lam = float(result.lam[0])
    fitted = solve_lasso(DesignProblem(problem.design, problem.response, penalty=Penalty.lasso(lam)))
    return lam, fitted
