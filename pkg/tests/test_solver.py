import numpy as np
import pytest

from rded.config import SimulationConfig
from rded.core import LagConfig, TimeGrid, quadrature_weights
from rded.errors import DomainUnderflow
from rded.solver import (CovariateLaw, DriftProcess, RdedSpec, generate_panel,
                         generate_panel_with_truth, right_hand_side, simulation_from_config,
                         smooth_noise, solve, solve_ode, solve_steps)


def _unit_delay(h):
    """X'(t) = -X(t - 1) with X = 1 on [-1, 0]"""
    tau0 = int(round(1 / h))
    grid = TimeGrid(-1.0, h, int(round(4 / h)) + 1)
    spec = RdedSpec(LagConfig(tau0, {}, tau0), history_coef=-1.0, initial=1.0)
    return grid, solve_steps(spec, {}, grid)


def _exact_unit_delay(t):
    t = np.asarray(t, dtype=float)
    out = np.ones_like(t)
    a = (t > 0) & (t <= 1)
    out[a] = 1 - t[a]
    b = (t > 1) & (t <= 2)
    out[b] = 1 - t[b] + (t[b] - 1) ** 2 / 2
    c = t > 2
    u = t[c] - 1
    out[c] = -0.5 - (u ** 3 / 6 - u ** 2 + 1.5 * u - 2.0 / 3.0)
    return out


class TestMethodOfSteps:
    def test_unit_delay_values(self):
        grid, x = _unit_delay(0.01)
        k1 = int(round(2 / 0.01))
        k2 = int(round(3 / 0.01))
        assert abs(x.values[k1]) < 1e-3
        assert abs(x.values[k2] + 0.5) < 1e-3

    def test_trapezoid_convergence_order(self):
        errors = []
        for h in (0.04, 0.02, 0.01):
            grid, x = _unit_delay(h)
            errors.append(np.max(np.abs(x.values - _exact_unit_delay(grid.points))))
        for coarse, fine in zip(errors, errors[1:]):
            assert 3.5 <= coarse / fine <= 4.5

    def test_zero_coefficients_keep_initial_value(self):
        grid = TimeGrid(0.0, 1.0, 30)
        spec = RdedSpec(LagConfig(3, {}), initial=lambda t: 2.0 + t)
        x = solve(spec, {}, grid).values
        assert np.allclose(x[3:], 5.0, atol=0, rtol=0)

    def test_unit_intercept_is_linear(self):
        grid = TimeGrid(0.0, 0.5, 40)
        spec = RdedSpec(LagConfig(5, {}), intercept=1.0,
                        history_weight=lambda s, t: 0 * s * t, initial=0.0)
        x = solve(spec, {}, grid).values
        t = grid.points
        assert np.allclose(x[5:], t[5:] - t[5], atol=1e-12)

    def test_covariate_history_integrates_over_horizon(self):
        # u = 2 weighted by 1 over a 4-day window contributes 8 per day
        grid = TimeGrid(0.0, 1.0, 20)
        spec = RdedSpec(LagConfig(1, {}), covariate_history={'u': (lambda s, t: 1.0 + 0 * s * t, 4)})
        assert spec.start_index == 4
        assert spec.covariate_names == ('u',)
        x = solve_steps(spec, {'u': np.full(20, 2.0)}, grid).values
        assert np.allclose(x[4:], 8.0 * np.arange(16), atol=1e-10)

    def test_distributed_recursion_is_trapezoid_of_rhs(self):
        grid = TimeGrid(0.0, 1.0, 60)
        rng = np.random.default_rng(3)
        u = {'u': smooth_noise(rng, grid.count, 2.0)}
        spec = RdedSpec(LagConfig(6, {'u': 2}), intercept=0.1,
                        history_weight=lambda s, t: 0.05 * (1 - s / 3) + 0 * t,
                        covariate_coefs={'u': 0.7}, initial=1.0)
        x = solve(spec, u, grid).values
        f = right_hand_side(spec, x, u, grid)
        m = spec.start_index
        steps = np.diff(x[m:])
        assert np.allclose(steps, 0.5 * grid.step * (f[:-1] + f[1:]), atol=1e-10)

    def test_concentrated_weight_approaches_point_delay(self):
        h = 0.01
        grid = TimeGrid(-1.0, h, 401)
        tau0 = 100
        point = solve_steps(RdedSpec(LagConfig(tau0, {}, tau0), history_coef=-1.0, initial=1.0),
                            {}, grid).values
        s = np.arange(tau0 + 1) * h
        q = quadrature_weights(tau0, h)
        errors = []
        for width in (0.2, 0.1, 0.05):
            # triangular bump on [1 - width, 1] with unit quadrature mass
            mass = q @ np.maximum(0.0, 1.0 - (1.0 - s) / width)

            def weight(ss, tt, width=width, mass=mass):
                return np.maximum(0.0, 1.0 - (1.0 - ss) / width) / mass + 0 * tt

            spec = RdedSpec(LagConfig(tau0, {}, tau0), history_coef=-1.0, history_weight=weight,
                            initial=1.0)
            x = solve_steps(spec, {}, grid).values
            errors.append(np.max(np.abs(x - point)))
        assert errors[0] > errors[1] > errors[2]
        assert errors[0] / errors[2] > 2.5
        assert errors[2] < 0.1

    def test_covariate_too_short(self):
        grid = TimeGrid(0.0, 1.0, 30)
        spec = RdedSpec(LagConfig(2, {'u': 1}), covariate_coefs={'u': 1.0})
        with pytest.raises(DomainUnderflow):
            solve(spec, {'u': np.zeros(29)}, grid)

    def test_history_longer_than_grid(self):
        grid = TimeGrid(0.0, 1.0, 10)
        spec = RdedSpec(LagConfig(12, {}, 21), history_coef=1.0)
        with pytest.raises(DomainUnderflow):
            solve(spec, {}, grid)

    def test_steps_needs_positive_delay(self):
        with pytest.raises(ValueError):
            solve_steps(RdedSpec(LagConfig(0, {})), {}, TimeGrid(0.0, 1.0, 5))


class TestIntegratingFactor:
    def test_exponential_growth(self):
        grid = TimeGrid(0.0, 0.01, 1001)
        spec = RdedSpec(LagConfig(0, {}), history_coef=0.1, initial=1.0)
        x = solve_ode(spec, {}, grid).values
        assert abs(x[-1] - np.e) < 1e-4

    def test_constant_forcing(self):
        grid = TimeGrid(0.0, 0.1, 51)
        spec = RdedSpec(LagConfig(0, {}), intercept=2.0, history_coef=0.0, initial=1.0)
        x = solve_ode(spec, {}, grid).values
        assert np.allclose(x, 1.0 + 2.0 * grid.points, atol=1e-12)

    def test_relaxation(self):
        grid = TimeGrid(0.0, 0.01, 501)
        spec = RdedSpec(LagConfig(0, {}), intercept=1.0, history_coef=-1.0, initial=0.0)
        x = solve_ode(spec, {}, grid).values
        assert abs(x[-1] - (1 - np.exp(-5.0))) < 1e-4

    def test_ode_needs_zero_delay(self):
        with pytest.raises(ValueError):
            solve_ode(RdedSpec(LagConfig(2, {})), {}, TimeGrid(0.0, 1.0, 5))


class TestGenerator:
    def _spec(self):
        return RdedSpec(LagConfig(4, {'u': 2}), intercept=0.2, history_coef=-0.1,
                        covariate_coefs={'u': 0.5}, initial=1.0)

    def test_same_seed_same_panel(self):
        grid = TimeGrid(0.0, 1.0, 40)
        law = CovariateLaw(1.0, 2.0, 0.3, 0.2)
        a = generate_panel(self._spec(), grid, 5, law, 0.1, 11, DriftProcess(0.2))
        b = generate_panel(self._spec(), grid, 5, law, 0.1, 11, DriftProcess(0.2))
        assert np.array_equal(a.response_matrix, b.response_matrix)
        assert np.array_equal(a.covariate_matrix('u'), b.covariate_matrix('u'))
        c = generate_panel(self._spec(), grid, 5, law, 0.1, 12, DriftProcess(0.2))
        assert not np.array_equal(a.response_matrix, c.response_matrix)

    def test_degenerate_law_gives_identical_subjects(self):
        grid = TimeGrid(0.0, 1.0, 40)
        panel = generate_panel(self._spec(), grid, 4,
                               CovariateLaw(amplitude=0.0, initial_sd=0.0, initial_slope_sd=0.0), 0.0, 5)
        x = panel.response_matrix
        assert np.all(x == x[0])

    def test_default_law_draws_distinct_initial_functions(self):
        grid = TimeGrid(0.0, 1.0, 40)
        spec = self._spec()
        x = generate_panel(spec, grid, 6, CovariateLaw(), 0.0, 2).response_matrix
        m = spec.start_index
        assert len(np.unique(x[:, m])) == 6
        assert len(np.unique(np.round(x[:, 1] - x[:, 0], 12))) == 6
        assert np.allclose(np.diff(x[:, :m + 1], axis=1), (x[:, 1] - x[:, 0])[:, None])

    def test_truth_derivatives_are_model_rhs(self):
        grid = TimeGrid(0.0, 1.0, 40)
        spec = self._spec()
        panel, truth = generate_panel_with_truth(spec, grid, 3, CovariateLaw(), 0.0, 1,
                                                 DriftProcess(0.1))
        i = 2
        u = {'u': truth.covariates['u'][i]}
        rhs = right_hand_side(spec, truth.states[i], u, grid, truth.drift[i])
        assert np.array_equal(truth.derivatives[i, spec.start_index:], rhs)
        assert np.array_equal(panel.response_matrix, truth.states)

    def test_drift_amplitude(self):
        grid = TimeGrid(0.0, 1.0, 20000)
        z = DriftProcess(0.3, 3.0).sample(grid, np.random.default_rng(0))
        assert abs(z.mean()) < 0.03
        assert 0.27 < z.std() < 0.33

    def test_needs_two_subjects(self):
        with pytest.raises(ValueError):
            generate_panel(self._spec(), TimeGrid(0.0, 1.0, 10), 1)


class TestSimulationConfig:
    def test_all_zero_gives_constant_responses(self):
        cfg = SimulationConfig(n=2, count=5, initial_level=3.0)
        panel, _ = simulation_from_config(cfg).generate()
        assert np.all(panel.response_matrix == 3.0)

    def test_polynomial_curves_and_separable_weight(self, simulation_config):
        cfg = SimulationConfig.from_dict(simulation_config)
        simulation = simulation_from_config(cfg, seed=1)
        spec = simulation.spec
        assert spec.tau0 == 14
        assert spec.lag_config.lags == {'mobility': 0, 'retail': 14, 'transit': 7, 'workplace': 3}
        gamma = spec.history_weight(np.array([[0.0], [7.0], [14.0]]), np.array([[3.0, 50.0]]))
        assert np.allclose(gamma[:, 0], [0.005, 0.0, -0.005])
        assert np.allclose(gamma[:, 1], gamma[:, 0])
        assert simulation.seed == 1

    def test_seed_override(self, simulation_config):
        cfg = SimulationConfig.from_dict({**simulation_config, 'n': 3})
        a, _ = simulation_from_config(cfg, seed=5).generate()
        b, _ = simulation_from_config(cfg, seed=5).generate()
        assert np.array_equal(a.response_matrix, b.response_matrix)
