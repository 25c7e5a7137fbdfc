import math

import numpy as np
import pytest

from src.errors import CoverageViolation, DimensionMismatch, InsufficientSamples, InvalidDistribution
from src.info_core import DiscreteDistribution
from src.offline_rl import (
    EpisodicEnvironment,
    EpisodicMDP,
    OfflineLearner,
    QStack,
    bellman_apply,
    collect_offline,
    concentrability,
    empirical_bellman_loss,
    fit_q_gibbs,
    fitted_q_tables,
    greedy_policy,
    occupancy,
    offline_bound,
    offline_gap,
    offline_kl,
    optimal_q_stack,
    optimal_value,
    policy_value,
    random_behavior,
    random_episodic_mdp,
    random_offline_instance,
    regret2_check,
    regret2_right_side,
    true_bellman_error,
)


def one_state(rewards, horizon=2):
    k = len(rewards)
    return EpisodicMDP(1, k, np.ones((1, k, 1)), np.array([rewards], dtype=float), np.ones(1), horizon)


def random_pair(seed, horizon=2):
    rng = np.random.default_rng(seed)
    mdp = random_episodic_mdp(rng, 2, 2, horizon)
    behavior = random_behavior(rng, mdp.grid_size)
    q = QStack(rng.uniform(0.0, horizon, size=mdp.shape))
    return mdp, behavior, q


class TestEpisodicMDP:
    def test_rejects_zero_horizon(self):
        with pytest.raises(InvalidDistribution):
            one_state([1.0], horizon=0)

    def test_stationary_table_is_broadcast(self):
        mdp = one_state([0.5, 1.0], horizon=3)
        assert mdp.transition.shape == (3, 1, 2, 1)
        assert mdp.grid_size == 6

    def test_reward_shape(self):
        with pytest.raises(DimensionMismatch):
            EpisodicMDP(2, 1, np.full((2, 1, 2), 0.5), np.zeros((1, 1)), np.array([0.5, 0.5]), 1)

    def test_q_stack_is_clipped(self):
        q = QStack(np.array([[[5.0, -1.0]], [[0.5, 0.2]]]))
        np.testing.assert_array_equal(q.q, [[[2.0, 0.0]], [[0.5, 0.2]]])
        np.testing.assert_array_equal(q.values(), [[2.0], [0.5], [0.0]])


class TestBellmanError:
    def test_optimal_stack_is_a_fixed_point(self):
        for seed in range(10):
            mdp, behavior, _ = random_pair(seed, horizon=3)
            assert true_bellman_error(optimal_q_stack(mdp), mdp, behavior) <= 1e-12

    def test_zero_stack_residual_is_minus_reward(self):
        mdp = one_state([0.5], horizon=2)
        assert true_bellman_error(QStack.zeros(2, 1, 1), mdp, DiscreteDistribution.uniform(2)) == pytest.approx(0.125)

    def test_shape_check(self):
        mdp, behavior, _ = random_pair(1)
        with pytest.raises(DimensionMismatch):
            true_bellman_error(QStack.zeros(3, 2, 2), mdp, behavior)

    def test_deterministic_next_states_coincide(self):
        transition = np.zeros((2, 2, 2))
        transition[:, :, 1] = 1.0
        mdp = EpisodicMDP(2, 2, transition, np.full((2, 2), 0.3), np.array([1.0, 0.0]), 2)
        data = collect_offline(mdp, DiscreteDistribution.uniform(mdp.grid_size), 50, 4)
        np.testing.assert_array_equal(data.next_a, data.next_b)
        np.testing.assert_array_equal(data.next_a, 1)

    def test_empty_dataset(self):
        mdp, behavior, q = random_pair(2)
        with pytest.raises(InsufficientSamples):
            empirical_bellman_loss(q, collect_offline(mdp, behavior, 0, 0))

    def test_loss_range(self):
        for seed in range(20):
            mdp, behavior, q = random_pair(seed, horizon=int(seed % 3) + 1)
            loss = empirical_bellman_loss(q, collect_offline(mdp, behavior, 5, seed))
            H = mdp.horizon
            assert -2 * H ** 2 <= loss <= 4 * H ** 2

    @pytest.mark.parametrize("seed", range(3))
    def test_double_sampling_is_unbiased(self, seed):
        mdp, behavior, q = random_pair(seed)
        losses = [empirical_bellman_loss(q, collect_offline(mdp, behavior, 2000, k)) for k in range(200)]
        se = np.std(losses, ddof=1) / math.sqrt(len(losses))
        assert abs(np.mean(losses) - true_bellman_error(q, mdp, behavior)) <= 3 * se + 1e-12

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(10))
    def test_double_sampling_at_scale(self, seed):
        mdp, behavior, q = random_pair(100 + seed)
        losses = [empirical_bellman_loss(q, collect_offline(mdp, behavior, 10_000, k)) for k in range(100)]
        se = np.std(losses, ddof=1) / math.sqrt(len(losses))
        assert abs(np.mean(losses) - true_bellman_error(q, mdp, behavior)) <= 3 * se + 1e-12

    def test_swap_symmetry(self):
        mdp, behavior, q = random_pair(3)
        diffs = []
        for k in range(500):
            data = collect_offline(mdp, behavior, 20, k)
            diffs.append(empirical_bellman_loss(q, data) - empirical_bellman_loss(q, data.swapped()))
        se = np.std(diffs, ddof=1) / math.sqrt(len(diffs))
        assert abs(np.mean(diffs)) <= 3 * se + 1e-12


class TestBellmanOperator:
    def test_zero_next_stack_gives_reward(self):
        mdp, _, _ = random_pair(30, horizon=3)
        np.testing.assert_array_equal(bellman_apply(mdp, np.zeros((2, 2)), 0), mdp.reward)

    def test_terminal_step_gives_reward(self):
        mdp, _, _ = random_pair(31)
        out = bellman_apply(mdp, None, mdp.horizon - 1)
        np.testing.assert_array_equal(out, mdp.reward)
        out[0, 0] = -1.0
        assert mdp.reward[0, 0] != -1.0

    def test_one_state_backup(self):
        mdp = one_state([0.2, 0.9])
        np.testing.assert_allclose(bellman_apply(mdp, np.array([[0.2, 0.9]]), 0), [[1.1, 1.8]])

    def test_backward_application_matches_optimal_stack(self):
        mdp, _, _ = random_pair(32, horizon=3)
        S, A = mdp.n_states, mdp.n_actions
        expected = np.zeros(mdp.shape)
        for h in range(mdp.horizon - 1, -1, -1):
            for s in range(S):
                for a in range(A):
                    future = 0.0
                    if h + 1 < mdp.horizon:
                        future = sum(mdp.transition[h, s, a, t] * expected[h + 1, t].max() for t in range(S))
                    expected[h, s, a] = mdp.reward[s, a] + future
        np.testing.assert_allclose(optimal_q_stack(mdp).q, expected, atol=1e-12)


class TestFitting:
    def test_infinite_pull_keeps_theta(self):
        mdp, behavior, _ = random_pair(4)
        theta = np.full(mdp.shape, 0.7)
        _, fits = fit_q_gibbs(theta, collect_offline(mdp, behavior, 30, 1), 0.1, math.inf, 2)
        np.testing.assert_array_equal(fits, theta)

    def test_cold_unpulled_fit_is_fitted_q(self):
        mdp, behavior, _ = random_pair(5)
        data = collect_offline(mdp, behavior, 40, 3)
        q, _ = fit_q_gibbs(np.zeros(mdp.shape), data, 1e-12, 0.0, 7)
        np.testing.assert_allclose(q.q, fitted_q_tables(data, *mdp.shape).q, atol=1e-9)

    def test_unvisited_cells_match_fitted_q_without_pull(self):
        mdp, _, _ = random_pair(12)
        mass = np.zeros(mdp.grid_size)
        mass[::2] = 1.0
        data = collect_offline(mdp, DiscreteDistribution.from_weights(mass), 40, 3)
        q, fits = fit_q_gibbs(np.full(mdp.shape, 0.7), data, 1e-12, 0.0, 7)
        np.testing.assert_array_equal(fits.reshape(-1)[1::2], 0.0)
        np.testing.assert_allclose(q.q, fitted_q_tables(data, *mdp.shape).q, atol=1e-9)

    def test_temperature_must_be_positive(self):
        mdp, behavior, _ = random_pair(6)
        with pytest.raises(InvalidDistribution):
            fit_q_gibbs(np.zeros(mdp.shape), collect_offline(mdp, behavior, 3, 0), 0.0, 1.0, 0)

    def test_fitted_q_approaches_optimum(self):
        mdp, behavior, _ = random_pair(7)
        q = fitted_q_tables(collect_offline(mdp, behavior, 100_000, 9), *mdp.shape)
        np.testing.assert_allclose(q.q, optimal_q_stack(mdp).q, atol=0.1)

    def test_learner_validation(self):
        with pytest.raises(InvalidDistribution):
            OfflineLearner(temperature=0.0)
        with pytest.raises(InvalidDistribution):
            OfflineLearner(pull=-1.0)


class TestPolicies:
    def test_greedy_optimal_policy_reaches_optimal_value(self):
        mdp, _, _ = random_pair(8, horizon=3)
        policy = greedy_policy(optimal_q_stack(mdp))
        assert policy_value(mdp, policy) == pytest.approx(optimal_value(mdp), abs=1e-12)

    def test_occupancy_rows_sum_to_one(self):
        mdp, _, _ = random_pair(9, horizon=3)
        d = occupancy(mdp, np.zeros((3, 2), dtype=int))
        np.testing.assert_allclose(d.sum(axis=(1, 2)), 1.0, atol=1e-12)

    def test_matched_behavior_has_unit_coverage(self):
        mdp, _, _ = random_pair(10)
        policy = greedy_policy(optimal_q_stack(mdp))
        behavior = DiscreteDistribution.from_weights(occupancy(mdp, policy).reshape(-1))
        assert concentrability(mdp, behavior, policy) == pytest.approx(1.0)

    def test_uniform_actions_double_the_ratio(self):
        mdp = one_state([0.2, 0.9], horizon=2)
        policy = np.array([[1], [0]])
        assert concentrability(mdp, DiscreteDistribution.uniform(4), policy) == pytest.approx(2.0)

    def test_uncovered_cell_is_infinite(self):
        mdp = one_state([0.2, 0.9], horizon=1)
        behavior = DiscreteDistribution(np.array([1.0, 0.0]))
        assert math.isinf(concentrability(mdp, behavior, np.array([[1]])))


class TestOfflineBound:
    def test_formula(self):
        assert offline_bound(0.5, 0.5, 1, 4, 4) == pytest.approx(2.0)
        assert offline_bound(0.0, 0.0, 3, 2, 2) == 0.0

    def test_rejects_negative_terms(self):
        with pytest.raises(ValueError):
            offline_bound(-0.1, 0.0, 1, 1, 1)

    def test_kl_needs_shared_registry(self):
        train, _ = random_offline_instance(np.random.default_rng(11))
        other, _ = random_offline_instance(np.random.default_rng(12))
        with pytest.raises(DimensionMismatch):
            offline_kl(train, other, 2, 3)
        assert offline_kl(train, train, 2, 3) == 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_gap_below_bound(self, seed):
        train, test = random_offline_instance(np.random.default_rng(20 + seed))
        learner = OfflineLearner(temperature=0.3, meta_temperature=0.3, pull=2.0, replicates=3)
        run = offline_gap(train, test, 3, 20, learner, trials=8, seed=seed)
        report = run.report()
        assert report.holds
        assert run.information >= 0.0
        assert report.bound_value == pytest.approx(
            math.sqrt(64 * 4 * (run.information + run.kl_term) / 60), abs=1e-12
        )

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(10))
    def test_gap_below_bound_at_scale(self, seed):
        rng = np.random.default_rng(120 + seed)
        train, test = random_offline_instance(rng, n_mdps=int(rng.integers(2, 5)))
        learner = OfflineLearner(temperature=0.3, meta_temperature=0.3, pull=2.0, replicates=4)
        report = offline_gap(train, test, 4, 50, learner, trials=10, seed=seed).report()
        assert report.holds

    def test_trials_required(self):
        train, test = random_offline_instance(np.random.default_rng(13))
        with pytest.raises(InsufficientSamples):
            offline_gap(train, test, 2, 5, OfflineLearner(), trials=1)

    def test_gap_is_seeded(self):
        train, test = random_offline_instance(np.random.default_rng(14))
        learner = OfflineLearner(replicates=2)
        a = offline_gap(train, test, 2, 10, learner, trials=3, seed=5)
        b = offline_gap(train, test, 2, 10, learner, trials=3, seed=5)
        assert a.gap == b.gap and a.information == b.information


class TestRegretTwo:
    def test_right_side_formula(self):
        assert regret2_right_side(1.0, 1, 1.0, 0.0) == pytest.approx(2.0)
        assert regret2_right_side(2.0, 2, -1.0, 1.0) == pytest.approx(8.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_inequality_holds(self, seed):
        train, test = random_offline_instance(np.random.default_rng(40 + seed))
        learner = OfflineLearner(temperature=0.3, meta_temperature=0.3, pull=2.0, replicates=3)
        report = regret2_check(train, test, 3, 20, learner, trials=6, seed=seed)
        assert report.holds
        assert report.left >= -1e-12
        assert math.isfinite(report.coverage) and report.coverage >= 1.0

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(10))
    def test_inequality_holds_at_scale(self, seed):
        rng = np.random.default_rng(140 + seed)
        train, test = random_offline_instance(rng, n_mdps=int(rng.integers(2, 5)))
        learner = OfflineLearner(temperature=0.3, meta_temperature=0.3, pull=2.0, replicates=4)
        report = regret2_check(train, test, 4, 50, learner, trials=10, seed=seed)
        assert report.holds
        assert report.left >= -1e-12

    def test_reuses_a_run(self):
        train, test = random_offline_instance(np.random.default_rng(15))
        learner = OfflineLearner(replicates=2)
        run = offline_gap(train, test, 2, 10, learner, trials=3, seed=1)
        assert regret2_check(train, test, 2, 10, learner, trials=3, run=run).run is run

    def test_uncovered_steps_raise(self):
        train, _ = random_offline_instance(np.random.default_rng(16))
        mass = np.zeros(train.mdps[0].grid_size)
        mass[: mass.size // 2] = 1.0
        behavior = DiscreteDistribution.from_weights(mass)
        env = EpisodicEnvironment(train.mdps, train.weights, behavior)
        with pytest.raises(CoverageViolation):
            regret2_check(env, env, 2, 10, OfflineLearner(replicates=2), trials=2)
