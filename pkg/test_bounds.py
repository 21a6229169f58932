import math

import numpy as np
import pytest

from bounds import (
    SUITES,
    BoundReport,
    BoundViolation,
    assert_holds,
    best_latent_models,
    bisim_error,
    constant_reward_model,
    empirical_tv_check,
    epsilon_rt,
    is_certified,
    j_reward,
    j_trans,
    lemma1_bound,
    lemma2_bound,
    lemma2_errors,
    property_instance,
    random_linear_instance,
    run_property_suite,
    thm1_bound,
    thm2_bound,
    thm3_experiment,
)
from env_gen import (
    TreeEnvSpec,
    canonical_models,
    canonical_representation,
    make_counterexample,
    make_tree_env,
    offline_distribution,
    optimal_policy,
    sample_demos,
)
from behavior_cloning import lift
from harness import exact_linear_models
from mdp_core import (
    LatentTabularPolicy,
    LogLinearPolicy,
    TabularPolicy,
    chi2,
    marginalize,
    perf_diff,
    random_mdp,
    random_policy,
    visitation,
)
from repr_learn import LatentModels, explicit_representation, identity_representation


class TestPropertySuites:
    @pytest.mark.parametrize("suite", SUITES)
    def test_no_violations(self, suite):
        summary = run_property_suite(suite, instances=100, seed=0)
        assert summary.instances == 100
        assert summary.violations == 0
        assert summary.max_negative_slack <= 1e-9

    def test_threads_do_not_change_results(self):
        reports_a, reports_b = [], []
        run_property_suite("thm1", instances=10, seed=3, jobs=1, reports=reports_a)
        run_property_suite("thm1", instances=10, seed=3, jobs=4, reports=reports_b)
        assert [r.rhs for r in reports_a] == [r.rhs for r in reports_b]

    def test_instances_are_reproducible(self):
        a = property_instance("lemma2", 5, 7)
        b = property_instance("lemma2", 5, 7)
        assert (a.lhs, a.rhs) == (b.lhs, b.rhs)

    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            run_property_suite("nope", instances=1)


class TestRepresentationErrors:
    def test_identity_map_with_best_models_is_exact(self, rng):
        mdp = random_mdp(rng, 5, 3)
        d_off = rng.dirichlet(np.ones(5))
        rep = identity_representation(5)
        models = best_latent_models(mdp, rep, d_off, 5)
        assert j_reward(mdp, d_off, rep, models) == pytest.approx(0.0, abs=1e-12)
        assert j_trans(mdp, d_off, rep, models) == pytest.approx(0.0, abs=1e-7)

    def test_j_trans_support_violation(self, rng):
        mdp = random_mdp(rng, 3, 2)
        dynamics = np.zeros((3, 2, 3))
        dynamics[:, :, 0] = 1.0
        models = LatentModels("tabular", np.zeros((3, 2)), dynamics, 1.0)
        assert j_trans(mdp, np.full(3, 1 / 3), np.arange(3), models) == math.inf

    def test_epsilon_rt_modes(self):
        full = epsilon_rt(0.2, 0.1, 2, 0.5, 1.0)
        reward_free = epsilon_rt(0.2, 0.1, 2, 0.5, 1.0, reward_mode="action-independent")
        assert full == pytest.approx(2 / 0.5 * 0.2 + 2 * 0.5 * 2 / 0.25 * 0.1)
        assert reward_free == pytest.approx(2 * 0.5 * 2 / 0.25 * 0.1)
        with pytest.raises(ValueError):
            epsilon_rt(0.2, 0.1, 2, 0.5, 1.0, reward_mode="other")

    def test_constant_reward_model_bounded_by_r_max(self, rng):
        mdp = random_mdp(rng, 6, 2)
        d_off = rng.dirichlet(np.ones(6))
        models = constant_reward_model(mdp, d_off, best_latent_models(mdp, np.zeros(6, dtype=int), d_off, 1))
        assert j_reward(mdp, d_off, np.zeros(6, dtype=int), models) <= mdp.r_max

    def test_bisim_zero_for_identity(self, rng):
        mdp = random_mdp(rng, 4, 2)
        reward_err, trans_err = bisim_error(mdp, np.arange(4), rng.dirichlet(np.ones(4)))
        assert reward_err == pytest.approx(0.0, abs=1e-12)
        assert trans_err == pytest.approx(0.0, abs=1e-12)

    def test_j_reward_matches_nested_sum(self, rng):
        mdp = random_mdp(rng, 5, 3)
        d_off = rng.dirichlet(np.ones(5))
        phi = np.array([0, 1, 0, 2, 1])
        reward = rng.uniform(-1.0, 1.0, size=(3, 3))
        models = LatentModels("tabular", reward, rng.dirichlet(np.ones(5), size=(3, 3)), 1.0)
        total = 0.0
        for s in range(5):
            for a in range(3):
                total += d_off[s] / 3 * (mdp.reward[s, a] - reward[phi[s], a]) ** 2
        assert j_reward(mdp, d_off, phi, models) == pytest.approx(math.sqrt(total), rel=1e-12)

    def test_j_trans_matches_nested_sum(self, rng):
        mdp = random_mdp(rng, 5, 2)
        d_off = rng.dirichlet(np.ones(5))
        phi = np.array([0, 1, 1, 2, 0])
        dynamics = rng.dirichlet(np.ones(5), size=(3, 2))
        models = LatentModels("tabular", np.zeros((3, 2)), dynamics, 1.0)
        total = 0.0
        for s in range(5):
            for a in range(2):
                for t in range(5):
                    p = mdp.transition[s, a, t]
                    if p > 0:
                        total += d_off[s] / 2 * p * math.log(p / dynamics[phi[s], a, t])
        assert j_trans(mdp, d_off, phi, models) == pytest.approx(math.sqrt(0.5 * total), rel=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_mixture_minimizes_j_trans(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 2, 2)
        d_off = rng.dirichlet(np.ones(2))
        phi = np.zeros(2, dtype=int)
        best = j_trans(mdp, d_off, phi, best_latent_models(mdp, phi, d_off, 1))
        grid = np.linspace(0.01, 0.99, 99)
        searched = math.inf
        for q0 in grid:
            for q1 in grid:
                dynamics = np.array([[[q0, 1.0 - q0], [q1, 1.0 - q1]]])
                models = LatentModels("tabular", np.zeros((1, 2)), dynamics, 1.0)
                searched = min(searched, j_trans(mdp, d_off, phi, models))
        assert best <= searched + 1e-12

    def test_bisim_reward_aliasing_of_constant_map(self, rng):
        mdp = random_mdp(rng, 4, 2)
        d_off = rng.dirichlet(np.ones(4))
        reward_err, _ = bisim_error(mdp, np.zeros(4, dtype=int), d_off)
        mean = d_off @ mdp.reward
        expected = sum(d_off[s] / 2 * abs(mdp.reward[s, a] - mean[a]) for s in range(4) for a in range(2))
        assert reward_err > 0.0
        assert reward_err == pytest.approx(expected, rel=1e-12)

    def test_counterexample_has_zero_bisim_but_positive_j_trans(self):
        mdp, phi, target = make_counterexample()
        d_star = visitation(mdp, target)
        assert max(bisim_error(mdp, phi, d_star)) <= 1e-12
        models = best_latent_models(mdp, phi, d_star, 3)
        assert j_trans(mdp, d_star, phi, models) >= 0.1


class TestLemmas:
    def test_lemma1_identical_policies(self, rng):
        mdp = random_mdp(rng, 4, 2)
        pi = random_policy(rng, 4, 2)
        report = lemma1_bound(mdp, pi, pi)
        assert report.lhs == 0.0
        assert report.rhs == pytest.approx(0.0, abs=1e-9)
        assert report.holds

    def test_lemma2_identical_policies(self, rng):
        mdp = random_mdp(rng, 4, 2)
        pi = random_policy(rng, 4, 2)
        err_r, err_p = lemma2_errors(mdp, pi, pi)
        assert err_r == 0.0 and err_p == 0.0
        assert lemma2_bound(mdp, pi, pi).lhs == 0.0

    def test_lemma2_action_independent_drops_reward_term(self, rng):
        mdp = random_mdp(rng, 4, 2)
        p1, p2 = random_policy(rng, 4, 2), random_policy(rng, 4, 2)
        full = lemma2_bound(mdp, p1, p2)
        reduced = lemma2_bound(mdp, p1, p2, reward_mode="action-independent")
        assert reduced.rhs <= full.rhs
        assert reduced.flags


class TestTheorem1:
    def test_counterexample_identity_map_holds(self):
        mdp, _, target = make_counterexample()
        rep = identity_representation(6)
        d_off = offline_distribution(mdp)
        models = best_latent_models(mdp, rep, d_off, 6)
        _, pi_z = marginalize(mdp, rep.latent_ids, target, visitation(mdp, target), n_latents=6)
        report = thm1_bound(mdp, rep, models, pi_z, target, d_off)
        assert report.lhs == pytest.approx(0.0, abs=1e-10)
        assert report.holds

    def test_support_violation_gives_infinite_rhs(self, rng):
        mdp = random_mdp(rng, 4, 2)
        d_off = np.array([1.0, 0.0, 0.0, 0.0])
        rep = identity_representation(4)
        models = best_latent_models(mdp, rep, d_off, 4)
        pi_z = LatentTabularPolicy(np.full((4, 2), 0.5))
        report = thm1_bound(mdp, rep, models, pi_z, random_policy(rng, 4, 2), d_off)
        assert report.rhs == math.inf
        assert report.holds
        assert any("support-violated" in flag for flag in report.flags)

    def test_deterministic_pi_z_missing_target_action(self, rng):
        mdp = random_mdp(rng, 3, 2)
        rep = identity_representation(3)
        d_off = np.full(3, 1 / 3)
        models = best_latent_models(mdp, rep, d_off, 3)
        target = TabularPolicy.deterministic([0, 0, 0], 2)
        report = thm1_bound(mdp, rep, models, LatentTabularPolicy(np.tile([0.0, 1.0], (3, 1))), target, d_off)
        assert report.terms["bc_kl"] == math.inf
        assert report.rhs == math.inf

    def test_tree_canonical_map(self):
        env = make_tree_env(TreeEnvSpec(duplication=3, seed=2))
        target = optimal_policy(env.mdp)
        rep = canonical_representation(env)
        d_off = offline_distribution(env)
        _, pi_z = marginalize(env.mdp, rep.latent_ids, target, visitation(env.mdp, target), n_latents=8)
        report = thm1_bound(env.mdp, rep, canonical_models(env), pi_z, target, d_off)
        assert report.terms["eps_rt"] <= 1e-10
        assert report.lhs == pytest.approx(0.0, abs=1e-9)


class TestTheorem2:
    def test_exact_linear_models_are_certified(self, rng):
        mdp = random_mdp(rng, 4, 2)
        rep = identity_representation(4)
        policy = LogLinearPolicy(rng.normal(size=(4, 2)))
        report = thm2_bound(mdp, rep, exact_linear_models(mdp), policy, random_policy(rng, 4, 2),
                            rng.dirichlet(np.ones(4)))
        assert report.terms["j_r"] == pytest.approx(0.0, abs=1e-12)
        assert report.terms["j_t"] == pytest.approx(0.0, abs=1e-7)
        assert is_certified(report)
        assert report.holds
        assert report.terms["rhs_stated"] <= report.rhs + 1e-12

    def test_stationary_policy_leaves_offline_term(self, rng):
        mdp = random_mdp(rng, 4, 2)
        target = random_policy(rng, 4, 2)
        policy = LogLinearPolicy(np.log(target.probs))
        report = thm2_bound(mdp, identity_representation(4), exact_linear_models(mdp), policy, target,
                            rng.dirichlet(np.ones(4)))
        assert report.terms["grad_l1"] == pytest.approx(0.0, abs=1e-12)
        assert report.rhs == pytest.approx(report.terms["offline_term"], abs=1e-9)
        assert report.lhs == pytest.approx(0.0, abs=1e-9)
        assert report.holds

    def test_random_linear_instance_valid_models(self):
        rng = np.random.default_rng(0)
        mdp, features, models, *_ = random_linear_instance(rng)
        rows = models.dynamics_at(features)
        np.testing.assert_allclose(rows.sum(axis=2), 1.0, atol=1e-10)
        assert np.all(rows >= 0)

    def test_demo_gradient_source(self, rng):
        mdp, features, models, policy, target, d_off = random_linear_instance(rng)
        demos = sample_demos(mdp, target, 50, seed=1)
        report = thm2_bound(mdp, features, models, policy, target, d_off, demos=demos)
        assert report.terms["gradient_source"] == "demos"

    def test_needs_linear_models(self, rng):
        mdp = random_mdp(rng, 3, 2)
        models = best_latent_models(mdp, np.arange(3), np.full(3, 1 / 3), 3)
        with pytest.raises(ValueError):
            thm2_bound(mdp, np.eye(3), models, LogLinearPolicy(np.zeros((3, 2))), TabularPolicy.uniform(3, 2),
                       np.full(3, 1 / 3))


class TestMonteCarlo:
    def test_thm3_small(self):
        env = make_tree_env(TreeEnvSpec(duplication=2, seed=0))
        target = optimal_policy(env.mdp)
        curve, terms = thm3_experiment(
            env, canonical_representation(env), canonical_models(env), target,
            offline_distribution(env), [6, 30], trials=20, seed=0,
        )
        assert [p.n for p in curve] == [6, 30]
        assert all(p.holds for p in curve)
        assert curve[1].mean <= curve[0].mean + 3 * (curve[0].stderr + curve[1].stderr)
        assert "chi2_reverse" in terms

    def test_thm3_chi2_direction(self):
        env = make_tree_env(TreeEnvSpec(duplication=2, seed=0))
        target = optimal_policy(env.mdp)
        d_off = offline_distribution(env)
        _, terms = thm3_experiment(
            env, canonical_representation(env), canonical_models(env), target, d_off, [6], trials=5, seed=0,
        )
        d_star = visitation(env.mdp, target).probs
        assert terms["chi2"] == pytest.approx(np.sum(d_star ** 2 / d_off.probs) - 1.0)
        assert terms["chi2_reverse"] == pytest.approx(chi2(d_off.probs, d_star))

    @pytest.mark.slow
    def test_thm3_full_curve(self):
        env = make_tree_env(TreeEnvSpec(duplication=10, seed=0))
        target = optimal_policy(env.mdp)
        curve, _ = thm3_experiment(
            env, canonical_representation(env), canonical_models(env), target,
            offline_distribution(env), [6, 15, 30, 150], trials=200, seed=0,
        )
        assert all(p.holds for p in curve)

    def test_empirical_tv(self):
        curve = empirical_tv_check(10, [10, 100, 1000], trials=1000, seed=0)
        assert all(p.holds for p in curve)
        assert curve[0].mean > curve[2].mean

    def test_empirical_tv_needs_two_outcomes(self):
        with pytest.raises(ValueError):
            empirical_tv_check(1, [10], trials=5, seed=0)


class TestReports:
    def test_slack_and_holds(self):
        report = BoundReport("x", lhs=1.0, rhs=1.0 - 1e-10)
        assert report.holds
        assert not BoundReport("x", lhs=1.0, rhs=0.9).holds

    def test_assert_holds(self):
        with pytest.raises(BoundViolation):
            assert_holds(BoundReport("x", lhs=1.0, rhs=0.5))

    def test_infinite_rhs_serializes(self):
        doc = BoundReport("x", 0.1, math.inf, {"chi2": math.inf}).to_dict()
        assert doc["rhs"] == "inf"
        assert doc["chi2"] == "inf"

    def test_lift_of_explicit_map(self):
        mdp, phi, target = make_counterexample()
        rep = explicit_representation(phi, 3)
        _, pi_z = marginalize(mdp, phi, target, visitation(mdp, target), n_latents=3)
        assert perf_diff(mdp, lift(pi_z, rep), target) >= 0.5
