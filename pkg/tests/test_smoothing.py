import numpy as np
import pytest

from rded.core import (CoefficientCurves, FittedRded, HistorySurface, LagConfig, TimeGrid,
                       Trajectory, TrajectoryPanel)
from rded.errors import SingularDesign
from rded.smoothing import (KernelSpec, derivative_bandwidth_grid, difference_quotients,
                            estimate_derivatives, local_poly, local_poly_matrix, smooth_coefficients,
                            smooth_panel, smooth_surface, smooth_trajectory, window_bandwidth)


def _single(values, grid):
    return TrajectoryPanel.from_arrays(['a'], grid, np.atleast_2d(values))


class TestLocalPoly:
    @pytest.mark.parametrize('degree', [0, 1, 2, 3])
    @pytest.mark.parametrize('family', ['epanechnikov', 'gaussian'])
    def test_reproduces_polynomials(self, degree, family):
        t = np.linspace(0, 5, 41)
        y = np.polynomial.polynomial.polyval(t, [0.3, -1.2, 0.5, 0.1][:degree + 1])
        kernel = KernelSpec(family, 0.9)
        for t0 in (0.0, 1.3, 5.0):
            assert local_poly(t, y, degree, kernel, t0) == pytest.approx(
                np.polynomial.polynomial.polyval(t0, [0.3, -1.2, 0.5, 0.1][:degree + 1]), abs=1e-9)

    def test_first_derivative_of_square(self):
        t = np.linspace(0, 4, 41)
        kernel = KernelSpec.epanechnikov(0.5)
        for t0 in (0.0, 2.05, 4.0):
            assert local_poly(t, t ** 2, 2, kernel, t0, deriv_order=1) == pytest.approx(2 * t0, abs=1e-9)

    def test_linear_in_data(self):
        rng = np.random.default_rng(0)
        t = np.linspace(0, 1, 30)
        y, z = rng.standard_normal((2, 30))
        kernel = KernelSpec.gaussian(0.1)
        lhs = local_poly(t, 2 * y + 3 * z, 1, kernel, 0.4)
        rhs = 2 * local_poly(t, y, 1, kernel, 0.4) + 3 * local_poly(t, z, 1, kernel, 0.4)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_randomized_reproduction_and_linearity(self):
        rng = np.random.default_rng(2024)
        t = np.linspace(0.0, 10.0, 41)
        families = ['epanechnikov', 'gaussian']
        for _ in range(1000):
            degree = int(rng.integers(0, 4))
            nu = int(rng.integers(0, degree + 1))
            kernel = KernelSpec(families[int(rng.integers(2))], rng.uniform(1.0, 4.0))
            t0 = rng.uniform(0.0, 10.0)
            poly = np.polynomial.Polynomial(rng.standard_normal(degree + 1), domain=[0, 10], window=[-1, 1])
            truth = poly.deriv(nu)(t0) if nu else poly(t0)
            est = local_poly(t, poly(t), degree, kernel, t0, deriv_order=nu)
            assert abs(est - truth) <= 1e-9 * max(1.0, abs(truth))

            y, z = rng.standard_normal((2, t.size))
            a, b = rng.standard_normal(2)
            lhs = local_poly(t, a * y + b * z, degree, kernel, t0, deriv_order=nu)
            rhs = (a * local_poly(t, y, degree, kernel, t0, deriv_order=nu)
                   + b * local_poly(t, z, degree, kernel, t0, deriv_order=nu))
            assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))

    def test_epanechnikov_support(self):
        t = np.arange(20.0)
        w = local_poly_matrix(t, [10.0], 1, KernelSpec.epanechnikov(3.0))[0]
        assert np.all(w[np.abs(t - 10.0) >= 3.0] == 0.0)
        assert np.all(w[np.abs(t - 10.0) < 3.0] != 0.0)

    def test_too_few_points(self):
        t = np.arange(10.0)
        with pytest.raises(SingularDesign) as info:
            local_poly_matrix(t, [4.0], 2, KernelSpec.epanechnikov(1.0))
        assert info.value.eval_at == 4.0

    def test_derivative_order_above_degree(self):
        with pytest.raises(ValueError):
            local_poly(np.arange(5.0), np.zeros(5), 1, KernelSpec.gaussian(1.0), 2.0, deriv_order=2)

    def test_derivative_beats_presmoothed_differences(self):
        grid = TimeGrid(0.0, 0.1, 130)
        t = grid.points
        rng = np.random.default_rng(42)
        y = np.sin(t) + 0.05 * rng.standard_normal(t.size)
        panel = estimate_derivatives(_single(y, grid))
        ours = panel.derivative_matrix[0]
        presmoothed = smooth_trajectory(Trajectory(grid, y), KernelSpec.gaussian(0.15))
        oracle = difference_quotients(presmoothed).values
        rmse = lambda d: np.sqrt(np.mean((d - np.cos(t)) ** 2))
        assert rmse(ours) <= 1.5 * rmse(oracle)


class TestImputation:
    def test_masked_point_matches_direct_fit(self):
        grid = TimeGrid(0.0, 1.0, 30)
        rng = np.random.default_rng(1)
        y = 2.0 + 0.5 * grid.points + 0.1 * rng.standard_normal(30)
        mask = np.zeros(30, dtype=bool)
        mask[12] = True
        kernel = KernelSpec.gaussian(1.5)
        smoothed = smooth_trajectory(Trajectory(grid, y, mask), kernel).values

        keep = ~mask
        u = (grid.points[keep] - 12.0) / 1.5
        sw = np.sqrt(np.exp(-0.5 * u * u))
        design = np.column_stack([np.ones(u.size), u]) * sw[:, None]
        oracle = np.linalg.lstsq(design, y[keep] * sw, rcond=None)[0][0]
        assert smoothed[12] == pytest.approx(oracle, abs=1e-10)

    def test_line_survives_masking(self):
        grid = TimeGrid(0.0, 1.0, 25)
        y = 1.0 - 0.2 * grid.points
        mask = np.zeros(25, dtype=bool)
        mask[[0, 5, 6, 24]] = True
        smoothed = smooth_trajectory(Trajectory(grid, np.where(mask, np.nan, y), mask),
                                     KernelSpec.gaussian(1.5)).values
        assert np.allclose(smoothed, y, atol=1e-10)

    def test_all_masked(self):
        grid = TimeGrid(0.0, 1.0, 10)
        with pytest.raises(SingularDesign):
            smooth_trajectory(Trajectory(grid, np.zeros(10), np.ones(10, dtype=bool)),
                              KernelSpec.gaussian(1.5))

    def test_smooth_panel_names_the_subject(self):
        grid = TimeGrid(0.0, 1.0, 10)
        mask = np.zeros((2, 10), dtype=bool)
        mask[1] = True
        mask[1, 0] = False
        panel = TrajectoryPanel.from_arrays(['a', 'b'], grid, np.zeros((2, 10)), response_mask=mask)
        with pytest.raises(SingularDesign) as info:
            smooth_panel(panel, KernelSpec.gaussian(1.5))
        assert info.value.subject == 'b'

    def test_smooth_panel_clears_masks(self):
        grid = TimeGrid(0.0, 1.0, 20)
        mask = np.zeros((2, 20), dtype=bool)
        mask[0, 7] = True
        panel = TrajectoryPanel.from_arrays(['a', 'b'], grid, np.ones((2, 20)), {'u': np.ones((2, 20))},
                                            response_mask=mask)
        smoothed = smooth_panel(panel, KernelSpec.gaussian(1.5))
        assert not smoothed.has_masks
        assert np.allclose(smoothed.response_matrix, 1.0)


class TestDerivatives:
    def test_constant_has_zero_derivative(self):
        grid = TimeGrid(0.0, 1.0, 40)
        panel = estimate_derivatives(_single(np.full(40, 3.0), grid))
        assert np.allclose(panel.derivative_matrix, 0.0, atol=1e-10)

    def test_square(self):
        grid = TimeGrid(0.0, 0.5, 40)
        t = grid.points
        panel = estimate_derivatives(_single(t ** 2, grid))
        assert np.allclose(panel.derivative_matrix[0], 2 * t, atol=1e-8)

    def test_fixed_bandwidth(self):
        grid = TimeGrid(0.0, 1.0, 30)
        t = grid.points
        panel = estimate_derivatives(_single(3 * t - 1, grid), KernelSpec.epanechnikov(4.0))
        assert np.allclose(panel.derivative_matrix, 3.0, atol=1e-10)

    def test_beats_raw_differences_on_noisy_logistic(self):
        grid = TimeGrid(0.0, 1.0, 130)
        t = grid.points
        rng = np.random.default_rng(8)
        curve = 1000 / (1 + np.exp(-(t - 65) / 10))
        slope = curve * (1 - curve / 1000) / 10
        y = curve + 5 * rng.standard_normal((3, t.size))
        panel = estimate_derivatives(TrajectoryPanel.from_arrays(['a', 'b', 'c'], grid, y))
        raw = np.vstack([np.gradient(row, grid.step) for row in y])
        err = lambda d: np.sum((d - slope) ** 2)
        assert err(panel.derivative_matrix) < err(raw)

    def test_rejects_masked_panel(self):
        grid = TimeGrid(0.0, 1.0, 10)
        mask = np.zeros((2, 10), dtype=bool)
        mask[0, 3] = True
        panel = TrajectoryPanel.from_arrays(['a', 'b'], grid, np.zeros((2, 10)), response_mask=mask)
        with pytest.raises(ValueError):
            estimate_derivatives(panel)

    def test_bandwidth_grid(self):
        bands = derivative_bandwidth_grid(TimeGrid(0.0, 1.0, 130))
        assert bands[0] == pytest.approx(4.0)
        assert bands[-1] == pytest.approx(129 / 4)
        assert np.all(np.diff(bands) > 0)


def _surface(weights):
    weights = np.asarray(weights, dtype=float)
    return HistorySurface(np.arange(weights.shape[0]), np.arange(14, 14 + weights.shape[1]), weights)


class TestSurfaceSmoothing:
    def test_bilinear_unchanged(self):
        s = np.arange(15.0)[:, None]
        t = np.arange(14.0, 130.0)[None, :]
        plane = 0.3 - 0.02 * s + 0.001 * t + 0.0005 * s * t
        smoothed = smooth_surface(_surface(plane))
        assert np.allclose(smoothed.weights, plane, atol=1e-10)

    def test_spike_is_damped(self):
        s = np.arange(15.0)[:, None]
        t = np.arange(14.0, 130.0)[None, :]
        plane = 0.1 + 0.01 * s - 0.001 * t + 0 * s * t
        spiked = plane.copy()
        spiked[7, 46] += 1.0
        smoothed = smooth_surface(_surface(spiked)).weights
        assert 0 < smoothed[7, 46] - plane[7, 46] < 1.0

    def test_noise_is_reduced(self):
        s = np.arange(15.0)[:, None]
        t = np.arange(14.0, 130.0)[None, :]
        truth = np.sin(s) * np.cos(t / 20)
        rng = np.random.default_rng(2)
        noisy = truth + 0.5 * rng.standard_normal(truth.shape)
        smoothed = smooth_surface(_surface(noisy)).weights
        rmse = lambda w: np.sqrt(np.mean((w - truth) ** 2))
        assert rmse(smoothed) < rmse(noisy)

    def test_spike_at_lag_edge_is_damped(self):
        s = np.arange(15.0)[:, None]
        t = np.arange(14.0, 130.0)[None, :]
        plane = 0.1 + 0.01 * s - 0.001 * t + 0 * s * t
        spiked = plane.copy()
        spiked[0, 46] += 1.0
        spiked[14, 80] += 1.0
        smoothed = smooth_surface(_surface(spiked)).weights
        assert 0 < smoothed[0, 46] - plane[0, 46] < 0.5
        assert 0 < smoothed[14, 80] - plane[14, 80] < 0.5

    def test_every_window_holds_four_points(self):
        s = np.arange(15.0)
        h = window_bandwidth(s, KernelSpec.epanechnikov(2.0))
        assert h == 3.5
        kernel = KernelSpec.epanechnikov(h)
        counts = (kernel.weights((s[:, None] - s[None, :]) / h) > 0).sum(axis=1)
        assert counts.min() == 4
        assert window_bandwidth(np.arange(116.0), KernelSpec.epanechnikov(10.0)) == 10.0
        assert window_bandwidth(np.arange(3.0), KernelSpec.epanechnikov(1.0)) == 2.5
        assert window_bandwidth(s, KernelSpec.gaussian(0.5)) == 0.5

    def test_single_lag_is_smoothed_along_time_only(self):
        t = np.arange(14.0, 130.0)[None, :]
        line = 1.0 + 0.01 * t
        smoothed = smooth_surface(_surface(line))
        assert smoothed.weights.shape == (1, 116)
        assert np.allclose(smoothed.weights, line, atol=1e-10)


def _fit_with(curve):
    times = np.arange(curve.size, dtype=float)
    raw = CoefficientCurves(curve, np.zeros(curve.size), {})
    surface = HistorySurface(np.arange(1), np.arange(curve.size), np.zeros((1, curve.size)))
    return FittedRded(raw, raw, surface, LagConfig(0, {}), (), np.zeros((2, curve.size)),
                      range(curve.size), times)


class TestCoefficientSmoothing:
    def test_linear_curve_unchanged(self):
        curve = 0.5 - 0.01 * np.arange(130.0)
        fit = smooth_coefficients(_fit_with(curve))
        assert np.allclose(fit.intercept, curve, atol=1e-10)
        assert np.array_equal(fit.raw_coefficients.intercept, curve)

    def test_alternating_noise_is_shrunk(self):
        curve = (-1.0) ** np.arange(130)
        fit = smooth_coefficients(_fit_with(curve))
        assert np.max(np.abs(fit.intercept)) < 1.0

    def test_step_stays_monotone(self):
        curve = (np.arange(130) >= 60).astype(float)
        smoothed = smooth_coefficients(_fit_with(curve)).intercept
        assert np.all(np.diff(smoothed[40:81]) >= -1e-12)
        assert smoothed[40] < smoothed[80]
