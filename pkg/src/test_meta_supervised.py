import itertools
import math

import numpy as np
import pytest

from src.errors import AllDrawsDegenerate, DimensionMismatch, EnumerationTooLarge
from src.info_core import DiscreteDistribution
from src.meta_supervised import (
    SIGMA,
    FiniteTask,
    GibbsLearnerSpec,
    TaskEnvironment,
    base_posterior,
    build_supersample,
    empirical_meta_risk,
    exact_joint_enumeration,
    gen_sub_estimate,
    gen_sub_exhaustive,
    kl_datasets,
    ood_gap_exact,
    ood_gap_monte_carlo,
    population_meta_risk,
    random_subtask_instance,
    random_tiny_instance,
    single_dataset_kl,
    supersample_stream,
    thm1_bound,
    thm1_decomposed_bound,
    thm2_bound,
)

LOSS = np.array([[0.2, 0.8], [0.5, 0.5], [0.8, 0.2]])


def env_of(sample_dists, weights, loss=LOSS):
    tasks = tuple(FiniteTask(DiscreteDistribution(np.asarray(p, dtype=float)), loss) for p in sample_dists)
    return TaskEnvironment(tasks, DiscreteDistribution(np.asarray(weights, dtype=float)))


def frozen_learner():
    return GibbsLearnerSpec.grid(3, 3, base_temperature=1e-12, meta_temperature=1e-12)


class TestLearners:
    def test_tasks_must_share_loss(self):
        other = FiniteTask(DiscreteDistribution.uniform(2), LOSS[::-1])
        first = FiniteTask(DiscreteDistribution.uniform(2), LOSS)
        with pytest.raises(DimensionMismatch):
            TaskEnvironment((first, other), DiscreteDistribution.uniform(2))

    def test_base_posterior_prefers_low_loss(self):
        spec = GibbsLearnerSpec.grid(3, 3, base_temperature=5.0, meta_temperature=1.0)
        post = base_posterior(0, [0, 0, 0], spec, LOSS)
        assert post.probs.sum() == pytest.approx(1.0)
        assert np.argmax(post.probs) == 0

    def test_coupling_pulls_toward_theta(self):
        spec = GibbsLearnerSpec.grid(3, 3, base_temperature=1.0, meta_temperature=1.0, coupling=50.0)
        assert np.argmax(base_posterior(2, [0, 1], spec, LOSS).probs) == 2

    def test_risks_in_unit_interval(self):
        env = env_of([[0.3, 0.7], [0.9, 0.1]], [0.5, 0.5])
        spec = GibbsLearnerSpec.grid(3, 3, 2.0, 2.0, 0.5)
        for theta in range(3):
            assert 0.0 <= empirical_meta_risk(theta, [(0, 1), (1, 1)], spec, LOSS) <= 1.0
            assert 0.0 <= population_meta_risk(theta, env, 2, spec) <= 1.0


class TestJointInformationBound:
    def test_data_independent_learner_has_no_gap(self):
        env = env_of([[0.3, 0.7], [0.9, 0.1]], [0.4, 0.6])
        assert ood_gap_exact(env, env, 2, 2, frozen_learner()) == pytest.approx(0.0, abs=1e-9)

    def test_bound_formula(self):
        assert thm1_bound(0.0, 0.0, SIGMA, 2, 2) == 0.0
        assert thm1_bound(1.0, 0.0, 0.5, 2, 2) == pytest.approx(math.sqrt(0.125))
        assert thm1_bound(1.0, 0.5, 0.5, 2, 2) > thm1_bound(1.0, 0.0, 0.5, 2, 2)
        assert thm1_bound(2.0, 0.5, 0.5, 2, 2) > thm1_bound(1.0, 0.5, 0.5, 2, 2)

    def test_iid_collapse(self):
        train = env_of([[0.3, 0.7], [0.9, 0.1]], [0.25, 0.75])
        test = env_of([[0.3, 0.7], [0.9, 0.1]], [0.6, 0.4])
        n, m = 3, 2
        per_sample = single_dataset_kl(train, test, m) / m
        assert kl_datasets(train, test, n, m) / (n * m) == pytest.approx(per_sample, abs=1e-10)

    @pytest.mark.parametrize("seed", range(50))
    def test_gap_below_exact_bound(self, seed):
        train, test, spec = random_tiny_instance(np.random.default_rng(seed))
        joint = exact_joint_enumeration(train, 2, 2, spec)
        gap = ood_gap_exact(train, test, 2, 2, spec, joint)
        bound = thm1_bound(joint.information(), kl_datasets(train, test, 2, 2), SIGMA, 2, 2)
        assert gap <= bound + 1e-9

    def test_instance_losses_span_unit_interval(self):
        losses = np.concatenate([
            random_tiny_instance(np.random.default_rng(seed))[0].tasks[0].loss_table.ravel()
            for seed in range(50)
        ])
        assert losses.min() >= 0.0 and losses.max() <= 1.0
        assert losses.min() < 0.05 and losses.max() > 0.95

    def test_monte_carlo_agrees_with_enumeration(self):
        train, test, spec = random_tiny_instance(np.random.default_rng(77))
        exact = ood_gap_exact(train, test, 2, 2, spec)
        mean, se = ood_gap_monte_carlo(train, test, 2, 2, spec, draws=10_000, seed=5)
        assert abs(mean - exact) <= 4 * se

    def test_decomposition_dominates_joint_bound(self):
        train = env_of([[0.3, 0.7]], [1.0])
        test = env_of([[0.6, 0.4]], [1.0])
        spec = GibbsLearnerSpec.grid(3, 3, 2.0, 3.0, 1.0)
        joint = exact_joint_enumeration(train, 2, 2, spec)
        parts = thm1_decomposed_bound(train, test, 2, 2, spec, joint=joint)
        direct = thm1_bound(joint.information(), kl_datasets(train, test, 2, 2), SIGMA, 2, 2)
        assert parts.total >= direct - 1e-12
        assert parts.mismatch >= 0 and parts.environment >= 0 and parts.task >= 0

    def test_decomposition_needs_singletons(self):
        env = env_of([[0.3, 0.7], [0.9, 0.1]], [0.5, 0.5])
        with pytest.raises(ValueError):
            thm1_decomposed_bound(env, env, 2, 2, frozen_learner())

    def test_enumeration_guard(self):
        env = env_of([[0.3, 0.7], [0.9, 0.1]], [0.5, 0.5])
        with pytest.raises(EnumerationTooLarge):
            exact_joint_enumeration(env, 8, 3, frozen_learner())


class TestSubtask:
    def test_supersample_is_seeded(self):
        env = env_of([[0.3, 0.7], [0.9, 0.1]], [0.5, 0.5])
        a, b = build_supersample(env, 3, 2, 9), build_supersample(env, 3, 2, 9)
        assert [(p.task_plus, p.data_plus) for p in a.pairs] == [(p.task_plus, p.data_plus) for p in b.pairs]
        np.testing.assert_array_equal(a.signs, b.signs)

    def test_absent_target_gives_none(self):
        env = env_of([[0.3, 0.7], [0.9, 0.1]], [1.0, 0.0])
        ss = build_supersample(env, 2, 2, 1)
        assert gen_sub_exhaustive(ss, 1, frozen_learner()) is None

    def test_all_draws_degenerate(self):
        env = env_of([[0.3, 0.7], [0.9, 0.1]], [1.0, 0.0])
        with pytest.raises(AllDrawsDegenerate):
            gen_sub_estimate(supersample_stream(env, 2, 2, 0), 1, frozen_learner(), trials=5)

    def test_sign_symmetric_learner_is_zero(self):
        env = env_of([[0.3, 0.7], [0.9, 0.1]], [0.5, 0.5])
        est = gen_sub_estimate(supersample_stream(env, 3, 2, 4), 0, frozen_learner(), trials=60, seed=2)
        assert abs(est.value) <= 4 * est.se + 1e-9

    def test_estimate_tracks_exhaustive_average(self):
        env = env_of([[0.2, 0.8], [0.7, 0.3]], [0.5, 0.5])
        spec = GibbsLearnerSpec.grid(3, 3, 4.0, 4.0, 0.5)
        stream = list(itertools.islice(supersample_stream(env, 2, 2, 12), 40))
        exhaustive = [v for v in (gen_sub_exhaustive(ss, 0, spec) for ss in stream) if v is not None]
        est = gen_sub_estimate(iter(stream), 0, spec, trials=40, resamples=256, seed=3)
        assert est.used_draws == len(exhaustive)
        assert est.value == pytest.approx(float(np.mean(exhaustive)), abs=0.05)

    def test_information_cap(self):
        env = env_of([[0.2, 0.8], [0.7, 0.3]], [0.5, 0.5])
        spec = GibbsLearnerSpec.grid(3, 3, 4.0, 4.0, 0.5)
        est = gen_sub_estimate(supersample_stream(env, 2, 2, 8), 0, spec, trials=20, seed=1)
        assert est.mean_information <= math.log(2.0) + 1e-12
        cap = 2 * math.sqrt(2 * SIGMA ** 2 * math.log(2.0) / 2)
        assert est.bound <= cap + 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_estimate_below_bound(self, seed):
        env, target, spec = random_subtask_instance(np.random.default_rng(1000 + seed))
        est = gen_sub_estimate(supersample_stream(env, 3, 2, seed), target, spec, trials=30, seed=seed)
        assert est.value <= est.bound + 3 * est.se
        assert 0.0 <= est.degenerate_frequency <= 1.0

    def test_thm2_bound_matches_estimate_bound(self):
        env, target, spec = random_subtask_instance(np.random.default_rng(3))
        est = gen_sub_estimate(supersample_stream(env, 2, 2, 6), target, spec, trials=15, seed=4)
        assert thm2_bound(supersample_stream(env, 2, 2, 6), target, spec, trials=15, seed=4) == est.bound
