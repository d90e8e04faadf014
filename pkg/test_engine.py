import threading
import unittest
from dataclasses import replace

import numpy as np

from config_manager import load_config_text
from engine import (NetworkState, NonFiniteIterate, StrategyKind, ThetaOutOfRange, atc_step, combine, lms_step, run,
                    smoothing_step, theta_default)
from helpers import ModelKindMismatch, agent_stream
from losses import LassoModel, QuadraticModel, SvmModel
from topology import identity_combination, validate_combination_matrix

SMALL_LASSO = """
topology.generator = ring
topology.n_agents = 4
model.kind = lasso
model.lasso.dim = 10
model.lasso.sparsity = 2
model.lasso.delta = 0.01
run.mu_o = 0.01
run.horizon = 200
run.record_every = 10
run.estimate_noise = false
"""


def lasso_models(n=3, dim=4, delta=0.05):
    w_true = np.zeros(dim)
    w_true[0] = 1.0
    return [LassoModel(dim=dim, delta=delta, sigma_h_sq=0.5 + 0.25 * k, sigma_n_sq=0.01, w_true=w_true)
            for k in range(n)]


def state_of(iterates, iteration=0):
    iterates = np.asarray(iterates, dtype=float)
    return NetworkState(iterates=iterates, smoothed=np.zeros_like(iterates), smoothing_sum=1.0, iteration=iteration)


class TestAtcStep(unittest.TestCase):
    def setUp(self):
        self.averaging = validate_combination_matrix([[0.5, 0.5], [0.5, 0.5]])

    def test_two_agent_combine(self):
        combined = combine(self.averaging, np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_array_equal(combined, [[0.5, 0.5], [0.5, 0.5]])

    def test_zero_step_is_pure_averaging(self):
        models = [QuadraticModel(dim=2, eta=1.0, noise_sq=0.01, w_true=np.zeros(2))] * 2
        new = atc_step(state_of([[1.0, 0.0], [3.0, 2.0]]), self.averaging, np.zeros(2), models, seed=0)
        np.testing.assert_allclose(new.iterates, [[2.0, 1.0], [2.0, 1.0]])
        self.assertEqual(new.iteration, 1)

    def test_combine_preserves_consensus(self):
        raw = np.random.default_rng(2).random((6, 6)) + 0.01
        A = validate_combination_matrix(raw / raw.sum(axis=0))
        v = np.random.default_rng(3).normal(size=5)
        np.testing.assert_allclose(combine(A, np.tile(v, (6, 1))), np.tile(v, (6, 1)), atol=1e-12)

    def test_single_agent_recursion(self):
        model = QuadraticModel(dim=3, eta=0.8, noise_sq=0.1, w_true=np.array([1.0, -1.0, 2.0]))
        w0 = np.array([0.5, 0.5, 0.5])
        new = atc_step(state_of([w0]), identity_combination(1), np.array([0.05]), [model], seed=7)
        _, noise = model.draw(agent_stream(7, 0, 1))
        np.testing.assert_array_equal(new.iterates[0], w0 - 0.05 * (0.8 * (w0 - model.w_true) + noise[0]))

    def test_identity_keeps_agents_independent(self):
        models = lasso_models(n=3)
        start = state_of(np.random.default_rng(4).normal(size=(3, 4)))
        mu = np.array([0.01, 0.02, 0.03])
        joint = atc_step(start, identity_combination(3), mu, models, seed=1)
        for k, model in enumerate(models):
            gammas, H = model.draw_sample(1, k, 1)
            expected = start.iterates[k] - mu[k] * model.stochastic_subgradient(start.iterates[k], gammas, H)
            np.testing.assert_array_equal(joint.iterates[k], expected)

    def test_non_finite_iterate(self):
        models = [QuadraticModel(dim=1, eta=1.0, noise_sq=0.0, w_true=np.zeros(1))]
        with self.assertRaises(NonFiniteIterate) as ctx:
            atc_step(state_of([[np.inf]]), identity_combination(1), np.array([0.1]), models, seed=0)
        self.assertEqual(ctx.exception.agents, [0])
        self.assertEqual(ctx.exception.iteration, 1)


class TestLmsStep(unittest.TestCase):
    def setUp(self):
        raw = np.random.default_rng(0).random((3, 3)) + 0.1
        self.A = validate_combination_matrix(raw / raw.sum(axis=0))
        self.models = lasso_models()
        self.mu = np.array([0.02, 0.01, 0.03])

    def test_sparse_lms_matches_subgradient_step(self):
        start = state_of(np.random.default_rng(1).normal(size=(3, 4)), iteration=5)
        sparse = lms_step(start, self.A, self.mu, self.models, seed=3, sparse=True)
        subgradient = atc_step(start, self.A, self.mu, self.models, seed=3)
        np.testing.assert_allclose(sparse.iterates, subgradient.iterates, atol=1e-12)

    def test_sign_of_zero(self):
        start = state_of(np.zeros((3, 4)))
        plain = lms_step(start, self.A, self.mu, self.models, seed=3)
        sparse = lms_step(start, self.A, self.mu, self.models, seed=3, sparse=True)
        np.testing.assert_array_equal(plain.iterates, sparse.iterates)

    def test_needs_lasso_models(self):
        models = [QuadraticModel(dim=4, eta=1.0, noise_sq=0.0, w_true=np.zeros(4))] * 3
        with self.assertRaises(ModelKindMismatch):
            lms_step(state_of(np.zeros((3, 4))), self.A, self.mu, models, seed=0)


class TestSmoothing(unittest.TestCase):
    def test_first_step(self):
        state = replace(NetworkState.initial(1, 2), iterates=np.array([[3.0, -3.0]]), iteration=1)
        smoothed = smoothing_step(state, 0.5)
        self.assertEqual(smoothed.smoothing_sum, 1.5)
        np.testing.assert_allclose(smoothed.smoothed, [[2.0, -2.0]])

    def test_fixed_point(self):
        v = np.array([[1.0, 2.0, 3.0]])
        state = NetworkState(iterates=v, smoothed=v.copy(), smoothing_sum=1.0, iteration=0)
        for _ in range(25):
            state = smoothing_step(state, 0.9)
        np.testing.assert_allclose(state.smoothed, v, rtol=1e-14)

    def test_matches_explicit_weighted_sum(self):
        theta, horizon = 0.99, 1000
        rng = np.random.default_rng(8)
        state = NetworkState.initial(2, 3)
        trajectory = [state.iterates]
        for i in range(1, horizon + 1):
            state = replace(state, iterates=rng.normal(size=(2, 3)), iteration=i)
            state = smoothing_step(state, theta)
            trajectory.append(state.iterates)
        weights = theta ** (horizon - np.arange(horizon + 1))
        r = weights / weights.sum()
        self.assertAlmostEqual(r.sum(), 1.0, places=12)
        self.assertAlmostEqual(state.smoothing_sum, weights.sum(), places=9)
        explicit = np.tensordot(r, np.array(trajectory), axes=1)
        np.testing.assert_allclose(state.smoothed, explicit, atol=1e-10)

    def test_theta_range(self):
        state = NetworkState.initial(1, 1)
        for theta in (0.0, 1.0, -0.5, 1.5):
            with self.assertRaises(ThetaOutOfRange):
                smoothing_step(state, theta)


class TestThetaDefault(unittest.TestCase):
    def svm(self, rho):
        return SvmModel(dim=1, rho=rho, features=np.ones((1, 1)), labels=np.ones(1))

    def test_mean_eta(self):
        models = [LassoModel(dim=1, delta=0.0, sigma_h_sq=s, sigma_n_sq=0.0, w_true=np.zeros(1)) for s in (0.5, 1.0)]
        self.assertAlmostEqual(theta_default(models, 0.001), 0.9985, places=12)

    def test_scaled_eta(self):
        self.assertAlmostEqual(theta_default([self.svm(0.002)], 0.15, 'scaled_eta', 0.9), 0.99973, places=12)
        self.assertAlmostEqual(theta_default([self.svm(1e-5)], 0.5, 'scaled_eta', 0.5), 0.9999975, places=12)

    def test_clamped(self):
        with self.assertLogs('engine', level='WARNING'):
            theta = theta_default([self.svm(1.0)], 5.0)
        self.assertTrue(0.0 < theta < 1.0)

    def test_unknown_rule(self):
        with self.assertRaises(ValueError):
            theta_default([self.svm(0.1)], 0.1, 'median_eta')


class TestRun(unittest.TestCase):
    def test_zero_horizon(self):
        config = load_config_text(SMALL_LASSO + "run.horizon = 0\n")
        report = run(config)
        self.assertEqual(len(report.trace), 0)
        np.testing.assert_array_equal(report.final_state.iterates, np.zeros((4, 10)))
        self.assertEqual(report.final_state.smoothing_sum, 1.0)
        self.assertFalse(report.partial)

    def test_trace_rows_and_determinism(self):
        config = load_config_text(SMALL_LASSO)
        first = run(config)
        second = run(config)
        self.assertEqual(len(first.trace), 20)
        self.assertEqual(first.trace.rows[-1]['iteration'], 200)
        self.assertTrue(first.trace.frame.equals(second.trace.frame))
        self.assertEqual(first.seeds, [0])

    def test_seed_changes_trace(self):
        first = run(load_config_text(SMALL_LASSO))
        other = run(load_config_text(SMALL_LASSO + "run.seed = 1\n"))
        self.assertFalse(first.trace.frame.equals(other.trace.frame))

    def test_ensemble_average(self):
        report = run(load_config_text(SMALL_LASSO + "run.ensemble = 3\nrun.horizon = 50\n"))
        self.assertEqual(report.seeds, [0, 1, 2])
        self.assertEqual(len(report.trace), 5)

    def test_strategies(self):
        for strategy in StrategyKind:
            with self.subTest(strategy=strategy.value):
                report = run(load_config_text(SMALL_LASSO + f"run.strategy = {strategy.value}\n"))
                self.assertEqual(len(report.trace), 20)
                self.assertTrue(np.all(np.isfinite(report.trace.column('excess_risk_smoothed'))))

    def test_iterates_stay_bounded(self):
        report = run(load_config_text(SMALL_LASSO + "run.horizon = 2000\n"))
        norms = report.trace.column('iterate_norm_max')
        reference = norms[len(norms) // 10 - 1]
        self.assertLessEqual(norms.max(), 10 * reference)

    def test_pocket_does_not_depend_on_record_every(self):
        every = run(load_config_text(SMALL_LASSO + "run.horizon = 400\nrun.record_every = 1\n")).trace
        sparse = run(load_config_text(SMALL_LASSO + "run.horizon = 400\nrun.record_every = 100\n")).trace
        dense_rows = {row['iteration']: row for row in every.rows}
        self.assertEqual([row['iteration'] for row in sparse.rows], [100, 200, 300, 400])
        for row in sparse.rows:
            self.assertEqual(row['pocket_excess'], dense_rows[row['iteration']]['pocket_excess'])
            self.assertEqual(row['excess_risk_raw'], dense_rows[row['iteration']]['excess_risk_raw'])

    def test_stop_event_gives_partial_report(self):
        stop = threading.Event()
        stop.set()
        report = run(load_config_text(SMALL_LASSO), stop_event=stop)
        self.assertTrue(report.partial)
        self.assertEqual(len(report.trace), 0)

    def test_divergence_aborts_with_partial_report(self):
        config = load_config_text("""
topology.generator = complete
topology.n_agents = 3
model.kind = quadratic
model.quadratic.dim = 2
run.mu_o = 5.0
run.theta = 0.5
run.horizon = 5000
run.record_every = 1
""")
        with self.assertLogs('engine', level='WARNING') as logs:
            with self.assertRaises(NonFiniteIterate) as ctx:
                run(config)
        self.assertTrue(any('UnstableConfiguration' in line for line in logs.output))
        report = ctx.exception.report
        self.assertTrue(report.partial)
        self.assertGreater(len(report.trace), 0)
        self.assertEqual(len(report.trace), ctx.exception.iteration - 1)


if __name__ == '__main__':
    unittest.main()
