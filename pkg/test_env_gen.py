import logging

import numpy as np
import pytest

from bounds import epsilon_rt, j_reward, j_trans
from env_gen import (
    CANONICAL_STATES,
    Dataset,
    TreeEnvSpec,
    canonical_models,
    canonical_representation,
    make_counterexample,
    make_tree_env,
    mean_step_reward,
    offline_distribution,
    optimal_policy,
    sample_demos,
    sample_offline,
    verify_counterexample,
)
from mdp_core import DimensionMismatch, TabularPolicy, performance, random_mdp, tv, visitation


class TestTreeEnv:
    def test_shapes(self):
        env = make_tree_env(TreeEnvSpec(duplication=10, seed=0))
        assert env.mdp.n_states == 80
        assert env.mdp.n_actions == 2
        np.testing.assert_allclose(env.mdp.transition.sum(axis=2), 1.0, atol=1e-12)
        np.testing.assert_array_equal(np.bincount(env.canonical_map), np.full(CANONICAL_STATES, 10))

    def test_initial_is_uniform_over_root_copies(self, small_tree):
        roots = small_tree.canonical_map == 0
        np.testing.assert_allclose(small_tree.mdp.initial[roots], 0.5)
        assert small_tree.mdp.initial[~roots].sum() == 0.0

    def test_low_rank(self):
        env = make_tree_env(TreeEnvSpec(duplication=5, seed=1))
        flat = np.asarray(env.mdp.transition).reshape(-1, env.mdp.n_states)
        assert np.linalg.matrix_rank(flat) <= CANONICAL_STATES

    def test_rewards_normalized_per_step(self, small_tree):
        canonical = small_tree.canonical_mdp
        np.testing.assert_allclose(canonical.reward[:7].max(axis=1), 1.0)
        np.testing.assert_allclose(canonical.reward[:7].min(axis=1), 0.0)
        np.testing.assert_array_equal(canonical.reward[7], 0.0)
        assert small_tree.mdp.r_max == 1.0

    def test_same_seed_same_env(self):
        a = make_tree_env(TreeEnvSpec(duplication=3, seed=11))
        b = make_tree_env(TreeEnvSpec(duplication=3, seed=11))
        c = make_tree_env(TreeEnvSpec(duplication=3, seed=12))
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()

    def test_too_many_states(self):
        with pytest.raises(ValueError):
            make_tree_env(TreeEnvSpec(duplication=1001))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            TreeEnvSpec(duplication=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_canonical_map_realizes_zero_error(self, seed):
        env = make_tree_env(TreeEnvSpec(duplication=4, seed=seed))
        rep, models = canonical_representation(env), canonical_models(env)
        d_off = offline_distribution(env)
        j_r = j_reward(env.mdp, d_off, rep, models)
        j_t = j_trans(env.mdp, d_off, rep, models)
        assert epsilon_rt(j_r, j_t, 2, env.mdp.gamma, 1.0) <= 1e-10


class TestEvaluation:
    @pytest.mark.parametrize("seed", range(5))
    def test_target_scores_one(self, seed):
        env = make_tree_env(TreeEnvSpec(duplication=3, seed=seed))
        assert mean_step_reward(env, optimal_policy(env.mdp)) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_policy_reference(self):
        scores = []
        for seed in range(20):
            env = make_tree_env(TreeEnvSpec(duplication=1, seed=seed))
            score = mean_step_reward(env, TabularPolicy.uniform(8, 2))
            assert 0.4 <= score <= 0.6
            scores.append(score)
        assert 0.4 <= np.mean(scores) <= 0.6

    def test_optimal_policy_beats_random(self, small_tree, rng):
        best = performance(small_tree.mdp, optimal_policy(small_tree.mdp))
        for _ in range(10):
            probs = rng.dirichlet(np.ones(2), size=small_tree.mdp.n_states)
            assert performance(small_tree.mdp, TabularPolicy(probs)) <= best + 1e-9

    def test_offline_distribution_covers_the_tree(self, small_tree):
        d_off = offline_distribution(small_tree).probs
        assert np.all(d_off > 0)


class TestCounterexample:
    def test_report(self):
        mdp, phi, target = make_counterexample()
        report = verify_counterexample(mdp, phi, target)
        assert report.reward_aliasing <= 1e-12
        assert report.transition_aliasing <= 1e-12
        assert report.perf_diff >= 0.5
        assert report.min_j_trans >= 0.1
        assert report.passed
        assert report.d_star[0] == pytest.approx(0.0, abs=1e-12)

    def test_phi_and_target(self):
        mdp, phi, target = make_counterexample()
        np.testing.assert_array_equal(phi, [1, 2, 0, 1, 2, 0])
        np.testing.assert_array_equal(target.probs.argmax(axis=1), [0, 0, 0, 0, 1, 0])
        assert mdp.initial[2] == 1.0

    def test_identity_map_loses_nothing(self):
        mdp, _, target = make_counterexample()
        report = verify_counterexample(mdp, np.arange(6), target)
        assert report.perf_diff == pytest.approx(0.0, abs=1e-12)
        assert not report.passed

    def test_wrong_shape(self):
        mdp = random_mdp(np.random.default_rng(0), 4, 2)
        with pytest.raises(DimensionMismatch):
            verify_counterexample(mdp, np.zeros(4, dtype=int), TabularPolicy.uniform(4, 2))


class TestSampling:
    def test_offline_episodes(self, small_tree):
        data = sample_offline(small_tree, 300, seed=5)
        assert len(data) == 300
        assert data.kind == "offline"
        np.testing.assert_array_equal(np.bincount(data.t), [100, 100, 100])
        assert np.all(small_tree.canonical_map[data.state[data.t == 0]] == 0)
        # next state of step t is the state of step t + 1
        first, second = data.t == 0, data.t == 1
        np.testing.assert_array_equal(data.next_state[first], data.state[second])

    def test_noiseless_rewards_match_table(self, small_tree):
        data = sample_offline(small_tree, 90, seed=1)
        np.testing.assert_allclose(data.reward, small_tree.mdp.reward[data.state, data.action])

    def test_reward_noise(self):
        env = make_tree_env(TreeEnvSpec(duplication=2, reward_noise_std=1.0, seed=3))
        data = sample_offline(env, 3000, seed=1)
        residual = data.reward - env.mdp.reward[data.state, data.action]
        assert 0.9 < residual.std() < 1.1

    def test_rounds_down_with_warning(self, small_tree, caplog):
        with caplog.at_level(logging.WARNING):
            data = sample_offline(small_tree, 301, seed=5)
        assert len(data) == 300
        assert "not a multiple" in caplog.text

    def test_shorter_than_an_episode(self, small_tree):
        with pytest.raises(ValueError):
            sample_offline(small_tree, 2, seed=5)

    def test_deterministic(self, small_tree):
        a = sample_offline(small_tree, 60, seed=9)
        b = sample_offline(small_tree, 60, seed=9)
        np.testing.assert_array_equal(a.state, b.state)
        np.testing.assert_array_equal(a.reward, b.reward)

    def test_demos_follow_target(self, small_tree):
        target = optimal_policy(small_tree.mdp)
        demos = sample_demos(small_tree, target, 30, seed=2)
        assert len(demos) == 30
        np.testing.assert_array_equal(demos.action, target.probs[demos.state].argmax(axis=1))

    def test_iid_offline_matches_d_off(self):
        mdp = random_mdp(np.random.default_rng(3), 5, 2)
        d_off = offline_distribution(mdp)
        data = sample_offline(mdp, 40_000, seed=0)
        freq = np.bincount(data.state, minlength=5) / len(data)
        assert tv(freq, d_off.probs) < 0.02

    def test_iid_demos_match_target_visitation(self):
        mdp = random_mdp(np.random.default_rng(4), 5, 2)
        target = TabularPolicy.deterministic([0, 1, 0, 1, 0], 2)
        demos = sample_demos(mdp, target, 40_000, seed=0)
        freq = np.bincount(demos.state, minlength=5) / len(demos)
        assert tv(freq, visitation(mdp, target).probs) < 0.02

    def test_save_and_load(self, small_tree, tmp_path):
        data = sample_offline(small_tree, 30, seed=4)
        path = str(tmp_path / "offline.csv")
        data.save(path)
        loaded = Dataset.load(path)
        assert loaded.env_fingerprint == small_tree.fingerprint()
        np.testing.assert_array_equal(loaded.next_state, data.next_state)
        np.testing.assert_array_equal(loaded.reward, data.reward)

    def test_load_needs_sidecar(self, small_tree, tmp_path):
        path = str(tmp_path / "offline.csv")
        sample_offline(small_tree, 30, seed=4).save(path)
        (tmp_path / "offline.csv.json").unlink()
        with pytest.raises(FileNotFoundError):
            Dataset.load(path)
