import math

import numpy as np
import pytest
import torch

from bounds import epsilon_rt, j_reward, j_trans
from env_gen import TERMINAL, Dataset, TreeEnvSpec, make_tree_env, offline_distribution, sample_offline
from fourier_features import new_featurizer
from optim import finite_diff_grad, relative_error
from repr_learn import (
    FOURIER_WEIGHT_DECAY,
    INIT_STD,
    EnergyModel,
    LatentModels,
    Representation,
    TrainConfig,
    contrastive_batch_loss,
    contrastive_terms,
    empirical_transition_matrix,
    explicit_representation,
    extract_energy_models,
    extract_linear_dynamics,
    latent_partition,
    project_rows,
    svd_features,
    train_energy,
    train_fourier,
)
from seeding import torch_generator


def _random_model(variant, seed, n_states=4, n_actions=2, k=3, d=8):
    rng = np.random.default_rng(seed)
    rho = rng.dirichlet(np.ones(n_states))
    featurizer = new_featurizer(k, d, seed) if variant == "fourier" else None
    model = EnergyModel(variant, n_states, n_actions, k, rho, featurizer=featurizer,
                        generator=torch_generator(seed, "init"))
    gen = torch_generator(seed, "params")
    with torch.no_grad():
        for p in model.params.values():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64))
    batch = (
        rng.integers(0, n_states, 5),
        rng.integers(0, n_actions, 5),
        rng.normal(size=5),
        rng.integers(0, n_states, 5),
    )
    return model, batch


def _transitions(states, actions, next_states, n_states, n_actions=2):
    n = len(states)
    return Dataset(
        episode=np.arange(n), t=np.zeros(n, dtype=int), state=np.asarray(states),
        action=np.asarray(actions), reward=np.zeros(n), next_state=np.asarray(next_states),
        kind="offline", env_fingerprint="test", seed=0, n_states=n_states, n_actions=n_actions,
    )


class TestContrastiveGradients:
    @pytest.mark.parametrize("variant", ["energy", "fourier"])
    @pytest.mark.parametrize("seed", range(20))
    def test_autograd_matches_finite_differences(self, variant, seed):
        model, batch = _random_model(variant, seed)
        loss = contrastive_batch_loss(model, batch, alpha_r=1.0, alpha_t=2.0)
        numeric = finite_diff_grad(
            lambda _: contrastive_batch_loss(model, batch, 1.0, 2.0, with_grad=False).total, model.params
        )
        assert relative_error(loss.grads, numeric) <= 1e-4

    def test_loss_parts(self):
        model, batch = _random_model("energy", 0)
        loss = contrastive_batch_loss(model, batch, alpha_r=0.5, alpha_t=3.0, with_grad=False)
        assert float(loss.total) == pytest.approx(0.5 * loss.loss_r + 3.0 * loss.loss_t)
        assert loss.grads == {}

    def test_empty_batch(self):
        model, _ = _random_model("energy", 0)
        empty = (np.array([], dtype=int), np.array([], dtype=int), np.array([]), np.array([], dtype=int))
        with pytest.raises(ValueError):
            contrastive_batch_loss(model, empty)

    def test_non_finite_rewards(self):
        model, (s, a, r, s2) = _random_model("energy", 0)
        r = r.copy()
        r[0] = np.nan
        with pytest.raises(ValueError):
            contrastive_batch_loss(model, (s, a, r, s2))


class TestContrastiveLoss:
    @staticmethod
    def _energy_model(f, g, h, bias):
        f = np.asarray(f, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        model = EnergyModel("energy", f.shape[0], g.shape[1], f.shape[1], np.full(f.shape[0], 1.0 / f.shape[0]))
        with torch.no_grad():
            for name, value in (("f", f), ("g", g), ("h", h), ("h_bias", bias)):
                model.params[name].copy_(torch.tensor(value, dtype=torch.float64))
        return model

    def test_two_sample_batch_by_hand(self):
        model = self._energy_model([[0.0], [1.0]], [[[0.0]], [[2.0]]], [[2.0]], [0.25])
        batch = (np.array([0, 1]), np.array([0, 0]), np.array([0.5, -1.0]), np.array([0, 1]))
        loss = contrastive_batch_loss(model, batch, alpha_r=2.0, alpha_t=3.0)
        # energies: anchor 0 -> (0, 2), anchor 1 -> (0.5, 0.5)
        loss_t = math.log(1.0 + math.exp(-2.0)) + math.log(2.0)
        loss_r = (0.5 - 0.25) ** 2 + (-1.0 - 2.25) ** 2
        assert loss.loss_t == pytest.approx(loss_t, rel=1e-12)
        assert loss.loss_r == pytest.approx(loss_r, rel=1e-12)
        assert float(loss.total) == pytest.approx(2.0 * loss_r + 3.0 * loss_t, rel=1e-12)

    def test_perfect_single_sample_has_zero_loss(self):
        model = self._energy_model([[0.3, -0.2], [0.0, 0.0]], [[[0.0, 0.0]], [[0.3, -0.2]]], [[0.0], [0.0]], [0.7])
        batch = (np.array([0]), np.array([0]), np.array([0.7]), np.array([1]))
        loss = contrastive_batch_loss(model, batch)
        assert loss.loss_t == pytest.approx(0.0, abs=1e-15)
        assert loss.loss_r == pytest.approx(0.0, abs=1e-15)

    def test_zero_weights_give_zero_loss_and_gradients(self):
        model, batch = _random_model("fourier", 3)
        loss = contrastive_batch_loss(model, batch, alpha_r=0.0, alpha_t=0.0)
        assert float(loss.total) == 0.0
        for grad in loss.grads.values():
            assert torch.count_nonzero(grad) == 0

    @pytest.mark.parametrize("seed", range(10))
    def test_dynamics_loss_is_non_negative(self, seed):
        model, _ = _random_model("energy", seed, n_states=6)
        rng = np.random.default_rng(seed)
        states, actions, rewards, next_states = (torch.as_tensor(x) for x in (
            rng.integers(0, 6, 32), rng.integers(0, 2, 32), rng.normal(size=32), rng.integers(0, 6, 32)
        ))
        _, loss_t = contrastive_terms(model.params, "energy", states, actions, rewards, next_states)
        assert torch.all(loss_t >= -1e-12)


class TestTraining:
    def test_energy_loss_decreases(self, small_tree):
        data = sample_offline(small_tree, 600, seed=1)
        rep = train_energy(data, TrainConfig(steps=300, batch_size=64, lr=0.01, seed=0), k=4)
        history = np.array(rep.model.history)
        assert history[-30:, 3].mean() < history[:30, 3].mean()
        assert rep.vectors.shape == (small_tree.mdp.n_states, 4)

    def test_fourier_representation(self, small_tree):
        data = sample_offline(small_tree, 300, seed=2)
        rep = train_fourier(data, TrainConfig(steps=20, batch_size=32, seed=1), k=4, d=64)
        assert rep.variant == "fourier"
        assert rep.vectors.shape == (small_tree.mdp.n_states, 64)
        assert np.all(np.abs(rep.vectors) <= 1.0)
        assert torch.any(rep.featurizer.f_avg != 0)

    def test_training_is_deterministic(self, small_tree):
        data = sample_offline(small_tree, 300, seed=2)
        cfg = TrainConfig(steps=15, batch_size=16, seed=4)
        a = train_energy(data, cfg, k=3)
        b = train_energy(data, cfg, k=3)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    @staticmethod
    def _copy_kernels(env, rep):
        kernel = 2.0 / rep.latent_dim * rep.vectors @ rep.vectors.T
        nodes = env.canonical_map
        decision = nodes != TERMINAL
        pairs = decision[:, None] & decision[None, :] & ~np.eye(nodes.size, dtype=bool)
        same = nodes[:, None] == nodes[None, :]
        return kernel[pairs & same].mean(), kernel[pairs & ~same].mean()

    def test_fourier_merges_duplicate_states(self):
        env = make_tree_env(TreeEnvSpec(duplication=4, seed=0))
        data = sample_offline(env, 1200, seed=1)
        decayed = train_fourier(data, TrainConfig(steps=400, batch_size=128, seed=0), k=8, d=256)
        free = train_fourier(data, TrainConfig(steps=400, batch_size=128, seed=0, weight_decay=0.0), k=8, d=256)
        same, different = self._copy_kernels(env, decayed)
        assert same >= 0.7
        assert different <= 0.5
        assert same >= self._copy_kernels(env, free)[0] + 0.3

    def test_weight_decay_default_per_variant(self):
        cfg = TrainConfig()
        assert cfg.resolved_weight_decay("fourier") == FOURIER_WEIGHT_DECAY
        assert cfg.resolved_weight_decay("energy") == 0.0
        assert TrainConfig(weight_decay=1.5).resolved_weight_decay("energy") == 1.5

    def test_alpha_t_default(self):
        assert TrainConfig(gamma=0.9).resolved_alpha_t() == pytest.approx(10.0)
        assert TrainConfig(alpha_t=2.0).resolved_alpha_t() == 2.0


class TestSvd:
    def test_shape_padding_and_signs(self, small_tree):
        data = sample_offline(small_tree, 900, seed=3)
        n_states = small_tree.mdp.n_states
        rep = svd_features(data, n_states, 2, k=n_states + 4)
        rank = n_states - 1
        assert rep.vectors.shape == (n_states, n_states + 4)
        np.testing.assert_array_equal(rep.vectors[:, rank:], 0.0)
        for column in rep.vectors[:, :rank].T:
            if np.abs(column).max() > 0:
                assert column[np.argmax(np.abs(column))] > 0

    def test_deterministic(self, small_tree):
        data = sample_offline(small_tree, 300, seed=3)
        a = svd_features(data, small_tree.mdp.n_states, 2, k=4)
        b = svd_features(data, small_tree.mdp.n_states, 2, k=4)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_rank_one_chain(self):
        # states 0-2 go to 0 under action 0 and to 1 under action 1; state 3 is never seen
        data = _transitions([0, 0, 1, 1, 2, 2], [0, 1, 0, 1, 0, 1], [0, 1, 0, 1, 0, 1], n_states=4)
        rep = svd_features(data, 4, 2, k=2)
        matrix = empirical_transition_matrix(data, 4, 2).toarray()
        np.testing.assert_allclose(rep.vectors @ rep.vectors.T, matrix @ matrix.T, atol=1e-10)
        np.testing.assert_allclose(rep.vectors[:3, 0], math.sqrt(0.5), atol=1e-10)
        np.testing.assert_allclose(rep.vectors[3], 0.0, atol=1e-10)
        np.testing.assert_allclose(rep.vectors[:, 1], 0.0, atol=1e-10)

    def test_needs_two_states(self):
        data = _transitions([0], [0], [0], n_states=1)
        with pytest.raises(ValueError):
            svd_features(data, 1, 2, k=2)


class TestLatentModels:
    def test_linear_dynamics_rows_on_simplex(self, small_tree):
        data = sample_offline(small_tree, 300, seed=5)
        rep = train_fourier(data, TrainConfig(steps=10, batch_size=32, seed=0), k=4, d=32)
        models = extract_linear_dynamics(rep, data, r_max=1.0)
        rows = models.dynamics_at(rep.vectors)
        assert rows.shape == (small_tree.mdp.n_states, 2, small_tree.mdp.n_states)
        np.testing.assert_allclose(rows.sum(axis=2), 1.0, atol=1e-10)
        assert np.all(rows > 0)
        assert np.all(np.abs(models.rewards_at(rep.vectors)) <= 1.0)

    def test_linear_dynamics_close_to_simplex(self, small_tree):
        data = sample_offline(small_tree, 600, seed=5)
        rep = train_fourier(data, TrainConfig(steps=300, batch_size=128, seed=0), k=4, d=1024)
        models = extract_linear_dynamics(rep, data, r_max=1.0)
        raw = models.raw_dynamics_at(rep.vectors)
        # the empirical normalizer makes every raw row sum to one
        np.testing.assert_allclose(raw.sum(axis=2), 1.0, atol=1e-8)
        tv = 0.5 * np.abs(project_rows(raw) - raw).sum(axis=2)
        assert tv.mean() <= 0.05
        assert models.projection_tv(rep.vectors) == pytest.approx(tv.max())

    def test_energy_without_steps_keeps_init(self, small_tree):
        data = sample_offline(small_tree, 60, seed=5)
        rep = train_energy(data, TrainConfig(steps=0, seed=4), k=3)
        gen = torch_generator(4, "init")
        f = torch.randn(16, 3, generator=gen, dtype=torch.float64) * INIT_STD
        g = torch.randn(16, 2, 3, generator=gen, dtype=torch.float64) * INIT_STD
        np.testing.assert_array_equal(rep.vectors, f.numpy())
        np.testing.assert_array_equal(rep.model.g_table(), g.numpy())
        head, bias = rep.model.reward_head()
        assert not head.any() and not bias.any()
        assert rep.model.history == []

    def test_energy_training_lowers_rt_error(self, small_tree):
        mdp = small_tree.mdp
        data = sample_offline(small_tree, 1200, seed=5)
        d_off = offline_distribution(small_tree)

        def errors(steps):
            rep = train_energy(data, TrainConfig(steps=steps, batch_size=128, seed=0), k=4)
            latent_rep, models = extract_energy_models(rep, mdp.r_max)
            j_r = j_reward(mdp, d_off, latent_rep, models)
            j_t = j_trans(mdp, d_off, latent_rep, models)
            return j_r, j_t, epsilon_rt(j_r, j_t, mdp.n_actions, mdp.gamma, mdp.r_max)

        j_r0, j_t0, eps0 = errors(0)
        j_r1, j_t1, eps1 = errors(500)
        assert j_r1 < j_r0
        assert j_t1 < j_t0
        assert eps1 < eps0

    def test_energy_models(self, small_tree):
        data = sample_offline(small_tree, 300, seed=5)
        rep = train_energy(data, TrainConfig(steps=10, batch_size=32, seed=0), k=3)
        latent_rep, models = extract_energy_models(rep)
        assert latent_rep.is_tabular
        assert models.variant == "tabular"
        np.testing.assert_allclose(models.dynamics_model.sum(axis=2), 1.0, atol=1e-10)

    def test_extract_needs_matching_variant(self, small_tree):
        data = sample_offline(small_tree, 30, seed=5)
        rep = train_energy(data, TrainConfig(steps=2, batch_size=8, seed=0), k=3)
        with pytest.raises(ValueError):
            extract_linear_dynamics(rep, data)

    def test_tabular_rows_validated(self):
        with pytest.raises(ValueError):
            LatentModels("tabular", np.zeros((2, 2)), np.full((2, 2, 3), 0.5), 1.0)

    def test_project_rows(self):
        rows = np.array([[0.5, -0.1, 0.6]])
        out = project_rows(rows)
        np.testing.assert_allclose(out.sum(), 1.0)
        assert np.all(out > 0)


class TestRepresentation:
    def test_partition_groups_equal_vectors(self):
        vectors = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        ids, distinct = latent_partition(vectors)
        assert ids[0] == ids[2] != ids[1]
        assert distinct.shape == (2, 2)

    def test_one_hot_features(self):
        rep = explicit_representation([1, 0, 1])
        np.testing.assert_array_equal(rep.features(), [[0, 1], [1, 0], [0, 1]])

    def test_ids_out_of_range(self):
        with pytest.raises(ValueError):
            Representation("explicit-table", 2, latent_ids=np.array([0, 2]))

    def test_json_keeps_vectors(self):
        rep = Representation("svd", 2, vectors=np.array([[0.5, 1.0], [0.0, -1.0]]))
        np.testing.assert_array_equal(Representation.from_json(rep.to_json()).vectors, rep.vectors)
