import unittest

import numpy as np

from config_manager import LassoConfig
from experiment import build_lasso_models
from helpers import ModelKindMismatch, NoConvergence
from losses import LassoModel, QuadraticModel, RiskConstants, SvmModel
from oracles import (OptimumMethod, UnstableConfiguration, aggregate_risk, aggregate_subgradient_at_optimum,
                     grid_search_optimum, lasso_network_optimum, lasso_numerical_optimum, lasso_stationarity_gap,
                     network_optimum, numerical_optimum, predict_rate, quadratic_network_optimum, soft_threshold)
from topology import WeightingScheme


def tiny_svm(rho=0.1):
    features = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    labels = np.array([1.0, 1.0, -1.0, -1.0])
    return SvmModel(dim=2, rho=rho, features=features, labels=labels)


def scheme(mu, q=None, mu_o=None):
    mu = np.asarray(mu, dtype=float)
    q = np.full(mu.size, 1.0 / mu.size) if q is None else np.asarray(q, dtype=float)
    return WeightingScheme(q=q, mu_o=float(mu.mean()) if mu_o is None else mu_o, mu=mu)


class TestSoftThreshold(unittest.TestCase):
    def test_values(self):
        np.testing.assert_allclose(soft_threshold(np.array([-1.0, 0.2]), 0.3), [-0.7, 0.0])
        x = np.array([-2.0, 0.0, 0.5])
        np.testing.assert_array_equal(soft_threshold(x, 0.0), x)
        np.testing.assert_array_equal(soft_threshold(np.array([0.3, -0.3, 0.1]), 0.3), 0.0)

    def test_non_expansive(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x, y = rng.normal(size=(2, 6))
            eps = rng.uniform(0, 1)
            self.assertLessEqual(np.linalg.norm(soft_threshold(x, eps) - soft_threshold(y, eps)),
                                 np.linalg.norm(x - y) + 1e-15)

    def test_negative_threshold(self):
        with self.assertRaises(ValueError):
            soft_threshold(np.ones(2), -0.1)


class TestLassoOptimum(unittest.TestCase):
    def test_identical_agents_without_regularization(self):
        w_true = np.array([0.5, -1.0, 0.0])
        models = [LassoModel(dim=3, delta=0.0, sigma_h_sq=0.7, sigma_n_sq=0.01, w_true=w_true) for _ in range(4)]
        optimum = lasso_network_optimum(models, np.full(4, 0.25))
        np.testing.assert_allclose(optimum.w_star, w_true)
        self.assertEqual(optimum.method, OptimumMethod.CLOSED_FORM)

    def test_single_agent_shrinks_support(self):
        w_true = np.array([0.0, 0.8, -1.2, 0.5])
        model = LassoModel(dim=4, delta=0.005, sigma_h_sq=1.0, sigma_n_sq=0.01, w_true=w_true)
        optimum = lasso_network_optimum([model], [1.0])
        np.testing.assert_allclose(optimum.w_star, w_true - 0.005 * np.sign(w_true))
        self.assertAlmostEqual(optimum.risk_star, model.true_risk(optimum.w_star))

    def test_per_agent_population_matches_numerical_oracle(self):
        models = build_lasso_models(LassoConfig(models='per_agent', delta=0.05), 20)
        q = np.random.default_rng(4).dirichlet(np.ones(20))
        closed = lasso_network_optimum(models, q)
        self.assertLessEqual(lasso_stationarity_gap(models, q, closed.w_star), 1e-12)
        numerical = lasso_numerical_optimum(models, q, tolerance=1e-14)
        self.assertLessEqual(abs(numerical.risk_star - closed.risk_star), 1e-6)
        self.assertLessEqual(abs(aggregate_risk(models, q, closed.w_star) - closed.risk_star), 1e-12)

    def test_stationarity_coordinatewise(self):
        models = build_lasso_models(LassoConfig(models='per_agent', delta=0.05, dim=30), 6)
        q = np.full(6, 1 / 6)
        w_star = lasso_network_optimum(models, q).w_star
        sigma = np.array([m.sigma_h_sq for m in models])
        sigma_bar = float(q @ sigma)
        centre = (q * sigma) @ np.array([m.w_true for m in models]) / sigma_bar
        off = w_star == 0
        self.assertTrue(np.all(np.abs(sigma_bar * (w_star - centre))[off] <= 0.05 + 1e-12))
        on = ~off
        np.testing.assert_allclose((sigma_bar * (w_star - centre) + 0.05 * np.sign(w_star))[on], 0.0, atol=1e-12)
        self.assertGreater(lasso_stationarity_gap(models, q, w_star + 0.1), 0.0)

    def test_kind_mismatch(self):
        with self.assertRaises(ModelKindMismatch):
            lasso_network_optimum([tiny_svm()], [1.0])
        with self.assertRaises(ModelKindMismatch):
            network_optimum([tiny_svm(), QuadraticModel(dim=2, eta=1.0, noise_sq=0.0, w_true=np.zeros(2))],
                            [0.5, 0.5])


class TestNumericalOracles(unittest.TestCase):
    def test_one_dimensional_quadratic(self):
        optimum = numerical_optimum(lambda w: 0.5 * float((w[0] - 3.0) ** 2), lambda w: w - 3.0, 1)
        self.assertAlmostEqual(float(optimum.w_star[0]), 3.0, places=6)
        self.assertEqual(optimum.method, OptimumMethod.NUMERICAL)

    def test_tiny_svm_matches_grid(self):
        model = tiny_svm()
        numerical = network_optimum([model], [1.0])
        grid = grid_search_optimum(model.risk_rows, [(-5.0, 5.0), (-5.0, 5.0)], 1e-2)
        np.testing.assert_allclose(numerical.w_star, [1.0, 1.0], atol=1e-3)
        self.assertAlmostEqual(numerical.risk_star, 0.1, places=6)
        self.assertLessEqual(abs(grid.risk_star - numerical.risk_star), 1e-3)
        self.assertEqual(grid.method, OptimumMethod.GRID)

    def test_iteration_cap(self):
        with self.assertRaises(NoConvergence):
            numerical_optimum(lambda w: float(w[0]), lambda w: np.ones(1), 1, max_iter=3, prox=lambda v, t: v)

    def test_grid_dimension_limit(self):
        with self.assertRaises(ValueError):
            grid_search_optimum(lambda W: W.sum(axis=1), [(0.0, 1.0)] * 4, 0.5)

    def test_quadratic_closed_form(self):
        models = [QuadraticModel(dim=2, eta=1.0, noise_sq=0.0, w_true=np.array([1.0, 0.0])),
                  QuadraticModel(dim=2, eta=3.0, noise_sq=0.0, w_true=np.array([0.0, 1.0]))]
        optimum = quadratic_network_optimum(models, [0.5, 0.5])
        np.testing.assert_allclose(optimum.w_star, [0.25, 0.75])


class TestSubgradientAtOptimum(unittest.TestCase):
    def test_lasso_selection_sums_to_zero(self):
        models = build_lasso_models(LassoConfig(models='per_agent', dim=20, delta=0.05), 5)
        q = np.random.default_rng(1).dirichlet(np.ones(5))
        w_star = lasso_network_optimum(models, q).w_star
        selection = aggregate_subgradient_at_optimum(models, q, w_star)
        self.assertEqual(selection.shape, (5, 20))
        np.testing.assert_allclose(q @ selection, 0.0, atol=1e-12)

    def test_svm_selection_is_flagged(self):
        with self.assertLogs('oracles', level='WARNING'):
            selection = aggregate_subgradient_at_optimum([tiny_svm()], [1.0], np.array([1.0, 1.0]))
        self.assertEqual(selection.shape, (1, 2))


class TestPredictRate(unittest.TestCase):
    def test_small_step_limit(self):
        constants = [RiskConstants(eta=0.5, e_sq=1.0, beta_sq=1.0)]
        prediction = predict_rate(scheme([1e-6]), constants, h=1.25)
        self.assertAlmostEqual(prediction.alpha, 1 - 1e-6 * 0.5, places=10)

    def test_svm_constants(self):
        rho, mu, h = 0.002, 0.15, 1.24
        constants = [RiskConstants(eta=rho, e_sq=2 * rho ** 2, beta_sq=0.0)] * 3
        prediction = predict_rate(scheme([mu] * 3), constants, h)
        expected = 1 - mu * rho + mu ** 2 * (2 * h + 1) * 2 * rho ** 2
        self.assertAlmostEqual(prediction.alpha, expected, places=12)
        self.assertAlmostEqual(prediction.alpha, 0.99970, places=5)

    def test_alpha_is_max_over_agents(self):
        constants = [RiskConstants(eta=1.0, e_sq=0.0, beta_sq=0.0), RiskConstants(eta=0.2, e_sq=0.0, beta_sq=0.0)]
        prediction = predict_rate(scheme([0.1, 0.1]), constants, h=1.0)
        np.testing.assert_allclose(prediction.alpha_k, [0.9, 0.98])
        self.assertAlmostEqual(prediction.alpha, 0.98)
        np.testing.assert_allclose(prediction.risk_decay_bracket, (0.81, 0.98))

    def test_unstable(self):
        with self.assertRaises(UnstableConfiguration):
            predict_rate(scheme([3.0]), [RiskConstants(eta=0.5, e_sq=0.0, beta_sq=0.0)], h=1.0)

    def test_missing_constants_flagged(self):
        with self.assertLogs('oracles', level='WARNING'):
            prediction = predict_rate(scheme([0.01]), [RiskConstants(eta=0.5)], h=1.0)
        self.assertAlmostEqual(prediction.alpha, 0.995)

    def test_monotone_in_step_size(self):
        constants = [RiskConstants(eta=0.8, e_sq=0.1, beta_sq=0.2)] * 2
        alphas = [predict_rate(scheme([mu, 0.01], mu_o=0.01), constants, 1.25).alpha_k[0]
                  for mu in (0.005, 0.01, 0.05, 0.1)]
        self.assertTrue(all(b <= a for a, b in zip(alphas, alphas[1:])))

    def test_floor_terms(self):
        constants = [RiskConstants(eta=1.0, e_sq=0.0, f_sq=0.5, beta_sq=0.0, sigma_sq=2.0)]
        prediction = predict_rate(scheme([0.1], q=[1.0]), constants, h=1.0, subgradient_norms_sq=[0.25])
        self.assertEqual(prediction.floor_terms[0], (0.5, 2.0, 2.0 * (0.5 + 0.25 + 0.5)))


if __name__ == '__main__':
    unittest.main()
