"""
Kernel smoothers

Local polynomial curve and derivative estimation, missing-value imputation, the
separable 2-D smoother for history surfaces and the final coefficient smoother.
Every smoother here is linear in the data, so each one is built as a weight matrix
and applied to all subjects at once.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .config import SmoothingConfig
from .core import HistorySurface, Trajectory
from .errors import SingularDesign

logger = logging.getLogger(__name__)


class KernelFamily(str, Enum):
    EPANECHNIKOV = 'epanechnikov'
    GAUSSIAN = 'gaussian'


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily
    bandwidth: float

    def __post_init__(self):
        object.__setattr__(self, 'family', KernelFamily(self.family))
        if not self.bandwidth > 0:
            raise ValueError(f'bandwidth must be > 0, got {self.bandwidth}')

    @classmethod
    def epanechnikov(cls, bandwidth):
        return cls(KernelFamily.EPANECHNIKOV, bandwidth)

    @classmethod
    def gaussian(cls, bandwidth):
        return cls(KernelFamily.GAUSSIAN, bandwidth)

    def weights(self, u):
        u = np.asarray(u, dtype=float)
        if self.family is KernelFamily.EPANECHNIKOV:
            return np.maximum(0.0, 0.75 * (1.0 - u * u))
        # Unnormalized: the constant cancels in weighted least squares
        return np.exp(-0.5 * u * u)

    def widened(self, factor=2.0):
        return replace(self, bandwidth=self.bandwidth * factor)


def local_poly_matrix(x, eval_at, degree, kernel, deriv_order=0, observed=None):
    """Weight matrix W with estimate = W @ y for a local polynomial fit

    Row m holds the equivalent kernel of the degree-L weighted least-squares fit
    centered at eval_at[m], scaled to return nu! * theta_nu. Points with zero kernel
    weight or observed == False get weight zero.
    """
    if deriv_order > degree:
        raise ValueError(f'derivative order {deriv_order} exceeds degree {degree}')
    x = np.asarray(x, dtype=float)
    eval_at = np.atleast_1d(np.asarray(eval_at, dtype=float))
    if observed is None:
        observed = np.ones(x.shape, dtype=bool)
    h = kernel.bandwidth
    scale = math.factorial(deriv_order) / h ** deriv_order
    out = np.zeros((eval_at.size, x.size))

    for m, center in enumerate(eval_at):
        u = (x - center) / h
        w = kernel.weights(u) * observed
        idx = np.flatnonzero(w > 0)
        if idx.size < degree + 1:
            raise SingularDesign(
                f'{idx.size} point(s) in the window at t={center:g}, need {degree + 1}',
                eval_at=center)
        sw = np.sqrt(w[idx])
        design = np.vander(u[idx], degree + 1, increasing=True) * sw[:, None]
        if np.linalg.matrix_rank(design) < degree + 1:
            raise SingularDesign(f'rank-deficient local design at t={center:g}', eval_at=center)
        out[m, idx] = np.linalg.pinv(design)[deriv_order] * sw * scale
    return out


def with_bandwidth_retry(build, kernel, retries=SmoothingConfig.MAX_BANDWIDTH_DOUBLINGS):
    """Call build(kernel), doubling the bandwidth on SingularDesign up to `retries` times"""
    for attempt in range(retries + 1):
        try:
            return build(kernel), kernel
        except SingularDesign:
            if attempt == retries:
                raise
            logger.debug(f'[WARN] singular local design at h={kernel.bandwidth:g}, doubling')
            kernel = kernel.widened()


def local_poly(t, y, degree, kernel, eval_at, deriv_order=0):
    """nu-th derivative estimate at one point from a degree-L local polynomial fit"""
    y = np.asarray(y, dtype=float)
    row = local_poly_matrix(t, [eval_at], degree, kernel, deriv_order)[0]
    return float(row @ y)


def _imputation_weights(grid, observed, kernel):
    if observed.sum() < 2:
        raise SingularDesign(f'only {int(observed.sum())} observed point(s); need 2')
    t = grid.points
    weights, _ = with_bandwidth_retry(
        lambda k: local_poly_matrix(t, t, 1, k, 0, observed), kernel)
    return weights


def smooth_trajectory(traj, kernel, cache=None):
    """Local linear smooth at every grid point from observed values; imputes masked ones

    `cache` maps an observation pattern to its smoother matrix and may be shared
    between trajectories on the same grid.
    """
    observed = traj.observed & np.isfinite(traj.values)
    key = observed.tobytes()
    if cache is None or key not in cache:
        weights = _imputation_weights(traj.grid, observed, kernel)
        if cache is not None:
            cache[key] = weights
    else:
        weights = cache[key]
    y = np.where(observed, traj.values, 0.0)
    return Trajectory(traj.grid, weights @ y)


def smooth_panel(panel, kernel):
    """Smooth and impute every response and covariate trajectory"""
    cache = {}

    def smooth_all(trajs, label):
        out = []
        for subject, traj in zip(panel.subjects, trajs):
            try:
                out.append(smooth_trajectory(traj, kernel, cache))
            except SingularDesign as e:
                raise SingularDesign(f'{label} of {subject}: {e}', e.eval_at, subject) from e
        return tuple(out)

    return replace(
        panel,
        response=smooth_all(panel.response, 'response'),
        covariates={name: smooth_all(trajs, name) for name, trajs in panel.covariates.items()},
        derivatives=None,
    )


def derivative_bandwidth_grid(grid, degree=SmoothingConfig.DERIVATIVE_DEGREE,
                              size=SmoothingConfig.DERIVATIVE_CV_GRID):
    """Log grid of candidate bandwidths, smallest one keeping degree+2 points at the edges"""
    low = (degree + 2) * grid.step
    span = grid.step * (grid.count - 1)
    high = max(2.0 * low, span / 4.0)
    return np.geomspace(low, high, size)


def _loo_scores(weights, y):
    """Leave-one-point-out squared errors per row of y for a linear smoother"""
    lev = np.diag(weights)
    resid = (y - y @ weights.T) / np.maximum(1.0 - lev, 1e-12)
    return np.mean(resid ** 2, axis=1)


def estimate_derivatives(panel, kernel=None, degree=SmoothingConfig.DERIVATIVE_DEGREE):
    """Fill panel derivatives by local quadratic regression (nu = 1)

    With kernel=None the bandwidth is chosen per subject by leave-one-point-out CV of
    the curve fit (nu = 0) over an Epanechnikov log grid, then reused for nu = 1.
    """
    if panel.has_masks:
        raise ValueError('panel has masked values; smooth_panel must run first')
    grid = panel.grid
    t = grid.points
    y = panel.response_matrix

    if kernel is not None:
        try:
            weights, used = with_bandwidth_retry(
                lambda k: local_poly_matrix(t, t, degree, k, 1), kernel)
        except SingularDesign as e:
            raise SingularDesign(f'derivative estimation: {e}', e.eval_at) from e
        logger.debug(f'[INFO] derivative bandwidth fixed at {used.bandwidth:g}')
        return panel.with_derivatives(y @ weights.T)

    candidates = []
    for h in derivative_bandwidth_grid(grid, degree):
        k = KernelSpec.epanechnikov(h)
        try:
            fit = local_poly_matrix(t, t, degree, k, 0)
        except SingularDesign:
            continue
        candidates.append((k, _loo_scores(fit, y)))
    if not candidates:
        raise SingularDesign('no candidate bandwidth gives a full-rank local design')

    scores = np.vstack([s for _, s in candidates])  # bandwidths x subjects
    choice = np.argmin(scores, axis=0)
    derivatives = np.empty_like(y)
    for c in np.unique(choice):
        rows = np.flatnonzero(choice == c)
        weights = local_poly_matrix(t, t, degree, candidates[c][0], 1)
        derivatives[rows] = y[rows] @ weights.T
    for subject, c in zip(panel.subjects, choice):
        logger.debug(f'[INFO] {subject}: derivative bandwidth {candidates[c][0].bandwidth:.3g}')
    return panel.with_derivatives(derivatives)


def difference_quotients(traj):
    """Central difference quotients (one-sided at the ends)"""
    return Trajectory(traj.grid, np.gradient(traj.values, traj.grid.step))


def window_bandwidth(points, kernel, min_points=SmoothingConfig.SURFACE_MIN_WINDOW_POINTS):
    """Smallest bandwidth, at least the kernel's, giving every window min_points nonzero weights"""
    points = np.asarray(points, dtype=float)
    if kernel.family is not KernelFamily.EPANECHNIKOV or points.size < 2:
        return kernel.bandwidth
    count = min(min_points, points.size)
    gaps = np.sort(np.abs(points[:, None] - points[None, :]), axis=1)
    reach = gaps[:, count - 1].max()
    spacing = np.diff(np.unique(points)).min()
    return max(kernel.bandwidth, reach + 0.5 * spacing)


def _axis_smoother(points, kernel):
    """1-D local linear smoother matrix on an axis; identity for a single point"""
    if points.size == 1:
        return np.ones((1, 1))
    kernel = replace(kernel, bandwidth=window_bandwidth(points, kernel))
    weights, _ = with_bandwidth_retry(
        lambda k: local_poly_matrix(points, points, 1, k, 0), kernel)
    return weights


def smooth_surface(raw, kernel=None, lag_kernel=None):
    """Product-kernel local linear smooth of gamma(s, t) on its own axes

    The tensor-product local linear fit separates into a smooth along s followed by
    a smooth along t, so it reproduces bilinear surfaces exactly.
    """
    step = raw.step
    if kernel is None:
        kernel = KernelSpec.epanechnikov(SmoothingConfig.SURFACE_TIME_BANDWIDTH * step)
    if lag_kernel is None:
        lag_kernel = KernelSpec.epanechnikov(SmoothingConfig.SURFACE_LAG_BANDWIDTH * step)
    s_weights = _axis_smoother(raw.lag_axis * step, lag_kernel)
    t_weights = _axis_smoother(raw.time_index * step, kernel)
    smoothed = s_weights @ raw.weights @ t_weights.T
    return HistorySurface(raw.lag_axis, raw.time_index, smoothed, step)


def smooth_coefficients(fit, kernel=None):
    """Replace reported coefficient curves by local linear smooths of the raw ones"""
    if kernel is None:
        kernel = KernelSpec.epanechnikov(SmoothingConfig.COEFFICIENT_BANDWIDTH)
    t = np.asarray(fit.times)
    if t.size == 1:
        return replace(fit, coefficients=fit.raw_coefficients)
    weights, _ = with_bandwidth_retry(lambda k: local_poly_matrix(t, t, 1, k, 0), kernel)
    smoothed = fit.raw_coefficients.map(lambda curve: weights @ curve)
    return replace(fit, coefficients=smoothed)
