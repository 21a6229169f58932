# repr_learn.py
#
# Offline representation learning from (s, a, r, s') tuples:
#   - contrastive energy model: P_Z(s'|z,a) ∝ rho(s') exp(-|z - g(s',a)|^2 / 2)
#   - contrastive Fourier features: phi = cos(W normalize(f(s)) + b), which
#     turns the energy model into a factored linear dynamics model
#   - SVD of the empirical transition matrix (baseline)
# plus the explicit latent models the bound checks consume.
#
#----------------------------------------------------------------------

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
import torch
from pydantic import BaseModel, Field
from tqdm import tqdm

from fourier_features import FourierFeaturizer, new_featurizer
from mdp_core import DimensionMismatch
from optim import Adam
from seeding import derive_seed, torch_generator

if TYPE_CHECKING:
    from env_gen import Dataset

logger = logging.getLogger(__name__)

INIT_STD = 0.1
PROJECTION_EPS = 1e-8   # floor for extracted next-state probabilities
LOSS_WINDOW = 100
SVD_RANK = 16
SVD_TOL = 1e-6        # svds squares it into the eigen-residual tolerance
SVD_MAX_ITER = 500
FOURIER_WEIGHT_DECAY = 5.0   # on f and g; the energy variant defaults to none

VARIANTS = ("explicit-table", "svd", "energy", "fourier")


# ---------------------------------------------------------------------------
# Representation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Representation:
    """State -> latent map. Tabular variants carry latent ids, the rest vectors."""

    variant: str
    latent_dim: int
    vectors: Optional[np.ndarray] = None      # [S, latent_dim]
    latent_ids: Optional[np.ndarray] = None   # [S]
    featurizer: Optional[FourierFeaturizer] = field(default=None, compare=False)
    model: Optional["EnergyModel"] = field(default=None, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown representation variant {self.variant!r}")
        if self.variant == "explicit-table":
            if self.latent_ids is None:
                raise ValueError("explicit-table representation needs latent_ids")
            ids = np.array(self.latent_ids, dtype=np.int64, copy=True)
            if ids.ndim != 1 or ids.min() < 0 or ids.max() >= self.latent_dim:
                raise DimensionMismatch(f"latent ids must lie in [0, {self.latent_dim})")
            ids.setflags(write=False)
            object.__setattr__(self, "latent_ids", ids)
        else:
            if self.vectors is None:
                raise ValueError(f"{self.variant} representation needs per-state vectors")
            vectors = np.array(self.vectors, dtype=np.float64, copy=True)
            if vectors.ndim != 2 or vectors.shape[1] != self.latent_dim:
                raise DimensionMismatch(f"vectors must be [S, {self.latent_dim}], got {vectors.shape}")
            if not np.all(np.isfinite(vectors)):
                raise ValueError("representation vectors contain non-finite entries")
            vectors.setflags(write=False)
            object.__setattr__(self, "vectors", vectors)

    @property
    def is_tabular(self):
        return self.variant == "explicit-table"

    @property
    def n_states(self):
        return self.latent_ids.size if self.is_tabular else self.vectors.shape[0]

    def features(self):
        """[S, latent_dim] matrix; one-hot rows for the tabular variant."""
        if self.is_tabular:
            return np.eye(self.latent_dim)[self.latent_ids]
        return self.vectors

    def to_dict(self):
        doc = {"variant": self.variant, "latent_dim": self.latent_dim}
        if self.is_tabular:
            doc["latent_ids"] = self.latent_ids.tolist()
        else:
            doc["vectors"] = self.vectors.tolist()
        if self.featurizer is not None:
            doc["featurizer"] = self.featurizer.to_dict()
        return doc

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        featurizer = None
        if doc.get("featurizer") is not None:
            featurizer = FourierFeaturizer.from_dict(doc["featurizer"])
        return cls(
            variant=doc["variant"],
            latent_dim=doc["latent_dim"],
            vectors=np.asarray(doc["vectors"]) if "vectors" in doc else None,
            latent_ids=np.asarray(doc["latent_ids"]) if "latent_ids" in doc else None,
            featurizer=featurizer,
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def explicit_representation(latent_ids, n_latents=None):
    latent_ids = np.asarray(latent_ids, dtype=np.int64)
    if n_latents is None:
        n_latents = int(latent_ids.max()) + 1
    return Representation("explicit-table", n_latents, latent_ids=latent_ids)


def identity_representation(n_states):
    return explicit_representation(np.arange(n_states), n_states)


def latent_partition(vectors):
    """Map identical vectors to one latent id; returns (ids [S], distinct rows)."""
    distinct, ids = np.unique(np.asarray(vectors, dtype=np.float64), axis=0, return_inverse=True)
    return ids.reshape(-1).astype(np.int64), distinct


# ---------------------------------------------------------------------------
# Latent models
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LatentModels:
    """R_Z and P_Z, either as tables over latent ids or linear in phi(s).

    tabular:         reward_model [Z, A],  dynamics_model [Z, A, S]
    factored-linear: reward_model r [d, A], dynamics_model psi [S, A, d],
                     R_Z(z, a) = r(a).z and P_Z(s'|z, a) = psi(s', a).z
    """

    variant: str
    reward_model: np.ndarray
    dynamics_model: np.ndarray
    r_max: float
    normalizer: Optional[np.ndarray] = None   # E(s, a), linear variant only
    project: bool = False

    def __post_init__(self):
        if self.variant not in ("tabular", "factored-linear"):
            raise ValueError(f"unknown latent model variant {self.variant!r}")
        reward = np.array(self.reward_model, dtype=np.float64, copy=True)
        dynamics = np.array(self.dynamics_model, dtype=np.float64, copy=True)
        if reward.ndim != 2 or dynamics.ndim != 3:
            raise DimensionMismatch("reward model must be 2-d and dynamics model 3-d")
        if self.variant == "tabular":
            if dynamics.shape[:2] != reward.shape:
                raise DimensionMismatch(f"tabular models disagree: {reward.shape} vs {dynamics.shape}")
            if np.any(dynamics < 0) or np.max(np.abs(dynamics.sum(axis=2) - 1.0)) > 1e-10:
                raise ValueError("tabular P_Z rows must lie on the simplex")
        else:
            if dynamics.shape[2] != reward.shape[0] or dynamics.shape[1] != reward.shape[1]:
                raise DimensionMismatch(f"linear models disagree: r {reward.shape} vs psi {dynamics.shape}")
        reward.setflags(write=False)
        dynamics.setflags(write=False)
        object.__setattr__(self, "reward_model", reward)
        object.__setattr__(self, "dynamics_model", dynamics)

    @property
    def n_actions(self):
        return self.reward_model.shape[1]

    def rewards_at(self, phi):
        """R_Z(phi(s), a) for every state, clipped to [-r_max, r_max]."""
        if self.variant == "tabular":
            out = self.reward_model[np.asarray(phi, dtype=np.int64)]
        else:
            out = np.asarray(phi, dtype=np.float64) @ self.reward_model
        return np.clip(out, -self.r_max, self.r_max)

    def raw_dynamics_at(self, phi):
        if self.variant == "tabular":
            return self.dynamics_model[np.asarray(phi, dtype=np.int64)]
        raw = np.einsum("sd,tad->sat", np.asarray(phi, dtype=np.float64), self.dynamics_model)
        if self.normalizer is not None:
            norm = np.asarray(self.normalizer)
            safe = np.abs(norm) > PROJECTION_EPS
            raw = np.where(safe[:, :, None], raw / np.where(safe, norm, 1.0)[:, :, None], raw)
        return raw

    def dynamics_at(self, phi):
        """P_Z(.|phi(s), a) for every state: [S, A, S']."""
        raw = self.raw_dynamics_at(phi)
        if self.project:
            return project_rows(raw)
        return raw

    def projection_tv(self, phi):
        """Max per-row TV between the raw linear rows and their projection."""
        raw = self.raw_dynamics_at(phi)
        return float(np.max(0.5 * np.abs(project_rows(raw) - raw).sum(axis=2)))

    def to_dict(self):
        return {
            "variant": self.variant,
            "r_max": self.r_max,
            "project": self.project,
            "reward_model": self.reward_model.tolist(),
            "dynamics_model": self.dynamics_model.tolist(),
            "normalizer": None if self.normalizer is None else np.asarray(self.normalizer).tolist(),
        }


def project_rows(rows, eps=PROJECTION_EPS):
    """Clip at eps and renormalize each last-axis row onto the simplex."""
    clipped = np.clip(rows, eps, None)
    return clipped / clipped.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Contrastive training
# ---------------------------------------------------------------------------

class TrainConfig(BaseModel):
    alpha_r: float = Field(1.0, ge=0)
    alpha_t: Optional[float] = Field(None, ge=0)   # None -> 1 / (1 - gamma)
    weight_decay: Optional[float] = Field(None, ge=0)   # None -> per-variant default
    gamma: float = Field(0.95, ge=0, lt=1)
    batch_size: int = Field(256, gt=0)
    lr: float = Field(0.01, gt=0)
    steps: int = Field(1000, ge=0)
    seed: int = Field(0, ge=0)

    def resolved_alpha_t(self):
        return 1.0 / (1.0 - self.gamma) if self.alpha_t is None else self.alpha_t

    def resolved_weight_decay(self, variant):
        if self.weight_decay is not None:
            return self.weight_decay
        return FOURIER_WEIGHT_DECAY if variant == "fourier" else 0.0


class EnergyModel:
    """Tabular f, g embeddings plus a reward head.

    energy:  h(z, a) = z.H[:, a] + c[a] with z = f(s)           (H is k x A)
    fourier: h(z, a) = z.H[:, a] with z = featurizer(f(s))      (H is d x A)
    """

    def __init__(self, variant, n_states, n_actions, k, rho, featurizer=None, generator=None):
        if variant not in ("energy", "fourier"):
            raise ValueError(f"unknown energy model variant {variant!r}")
        if variant == "fourier" and featurizer is None:
            raise ValueError("the fourier variant needs a featurizer")
        self.variant = variant
        self.n_states = n_states
        self.n_actions = n_actions
        self.k = k
        self.rho = np.asarray(rho, dtype=np.float64)
        self.featurizer = featurizer
        self.history = []

        head_in = featurizer.d if variant == "fourier" else k
        f = torch.randn(n_states, k, generator=generator, dtype=torch.float64) * INIT_STD
        g = torch.randn(n_states, n_actions, k, generator=generator, dtype=torch.float64) * INIT_STD
        self.params = {
            "f": f.requires_grad_(),
            "g": g.requires_grad_(),
            "h": torch.zeros(head_in, n_actions, dtype=torch.float64, requires_grad=True),
        }
        if variant == "energy":
            self.params["h_bias"] = torch.zeros(n_actions, dtype=torch.float64, requires_grad=True)

    def f_table(self):
        return self.params["f"].detach().numpy().copy()

    def g_table(self):
        return self.params["g"].detach().numpy().copy()

    def reward_head(self):
        h = self.params["h"].detach().numpy().copy()
        bias = self.params["h_bias"].detach().numpy().copy() if "h_bias" in self.params else None
        return h, bias


@dataclass
class BatchLoss:
    loss_r: float
    loss_t: float
    total: torch.Tensor
    grads: dict


def contrastive_terms(params, variant, states, actions, rewards, next_states, featurizer=None):
    """Per-sample reward and dynamics losses [B], [B] as differentiable tensors."""
    f = params["f"]
    g = params["g"]
    anchor = f[states]                                   # [B, k]
    # g(s'_j, a_i): in-batch next states re-paired with each anchor's action
    negatives = g[next_states[None, :], actions[:, None]]   # [B, B, k]
    energy = 0.5 * ((anchor[:, None, :] - negatives) ** 2).sum(dim=-1)   # [B, B]
    loss_t = torch.diagonal(energy) + torch.logsumexp(-energy, dim=1)

    if variant == "fourier":
        z = featurizer(anchor)
        pred = (z * params["h"][:, actions].T).sum(dim=-1)
    else:
        pred = (anchor * params["h"][:, actions].T).sum(dim=-1) + params["h_bias"][actions]
    loss_r = (rewards - pred) ** 2
    return loss_r, loss_t


def contrastive_batch_loss(model, batch, alpha_r=1.0, alpha_t=1.0, with_grad=True):
    """Sum over the batch of alpha_r * l_R + alpha_t * l_T, with gradients."""
    states, actions, rewards, next_states = _batch_tensors(batch)
    if states.numel() == 0:
        raise ValueError("contrastive loss needs a non-empty batch")
    if not torch.isfinite(rewards).all():
        raise ValueError("non-finite rewards in batch")
    loss_r, loss_t = contrastive_terms(
        model.params, model.variant, states, actions, rewards, next_states, model.featurizer
    )
    total = alpha_r * loss_r.sum() + alpha_t * loss_t.sum()
    if not torch.isfinite(total):
        raise ValueError("contrastive loss is not finite")
    grads = {}
    if with_grad:
        names = list(model.params)
        values = torch.autograd.grad(total, [model.params[n] for n in names], allow_unused=True)
        for name, value in zip(names, values):
            grads[name] = torch.zeros_like(model.params[name]) if value is None else value
    return BatchLoss(float(loss_r.sum().detach()), float(loss_t.sum().detach()), total, grads)


def _batch_tensors(batch):
    states, actions, rewards, next_states = batch
    return (
        torch.as_tensor(np.asarray(states), dtype=torch.long),
        torch.as_tensor(np.asarray(actions), dtype=torch.long),
        torch.as_tensor(np.asarray(rewards), dtype=torch.float64),
        torch.as_tensor(np.asarray(next_states), dtype=torch.long),
    )


def next_state_marginal(data, n_states):
    counts = np.bincount(np.asarray(data.next_state), minlength=n_states).astype(np.float64)
    return counts / counts.sum()


def _check_dataset(data, n_states=None, n_actions=None):
    if len(data.state) == 0:
        raise ValueError("dataset is empty")
    n_states = data.n_states if n_states is None else n_states
    n_actions = data.n_actions if n_actions is None else n_actions
    if (n_states, n_actions) != (data.n_states, data.n_actions):
        raise DimensionMismatch(
            f"dataset was sampled from a ({data.n_states}, {data.n_actions}) env, "
            f"expected ({n_states}, {n_actions})"
        )
    for name, values, bound in (
        ("state", data.state, n_states),
        ("next_state", data.next_state, n_states),
        ("action", data.action, n_actions),
    ):
        values = np.asarray(values)
        if values.min() < 0 or values.max() >= bound:
            raise DimensionMismatch(f"dataset {name} ids out of range [0, {bound})")
    return n_states, n_actions


def _train_contrastive(model, data, cfg, progress=False):
    states, actions, rewards, next_states = _batch_tensors(
        (data.state, data.action, data.reward, data.next_state)
    )
    n = states.numel()
    alpha_r = cfg.alpha_r
    alpha_t = cfg.resolved_alpha_t()
    gen = torch_generator(cfg.seed, "batches")
    # decoupled decay pulls the per-copy offsets the dynamics loss leaves
    # unconstrained back to zero, so duplicate states share one embedding
    opt = Adam(lr=cfg.lr, weight_decay=cfg.resolved_weight_decay(model.variant), decay=("f", "g"))

    for step in tqdm(range(cfg.steps), disable=not progress, desc=f"train-{model.variant}"):
        idx = torch.randint(n, (cfg.batch_size,), generator=gen)
        if model.variant == "fourier":
            model.featurizer.update_stats(model.params["f"].detach()[states[idx]])
        loss = contrastive_batch_loss(
            model,
            (states[idx], actions[idx], rewards[idx], next_states[idx]),
            alpha_r=alpha_r,
            alpha_t=alpha_t,
        )
        opt.step(model.params, loss.grads)
        model.history.append((step, loss.loss_r, loss.loss_t, float(loss.total)))

    if model.history:
        first = _window_mean(model.history[:LOSS_WINDOW])
        last = _window_mean(model.history[-LOSS_WINDOW:])
        logger.info(f"{model.variant}: {cfg.steps} steps, windowed loss {first:.4f} -> {last:.4f}")
    return model


def _window_mean(rows):
    return float(np.mean([row[3] for row in rows]))


def train_energy(data: "Dataset", cfg: TrainConfig, k, progress=False):
    """Contrastive energy model; phi(s) := f(s)."""
    n_states, n_actions = _check_dataset(data)
    rho = next_state_marginal(data, n_states)
    model = EnergyModel(
        "energy", n_states, n_actions, k, rho, generator=torch_generator(cfg.seed, "init")
    )
    _train_contrastive(model, data, cfg, progress=progress)
    return Representation("energy", k, vectors=model.f_table(), model=model)


def train_fourier(data: "Dataset", cfg: TrainConfig, k, d, progress=False):
    """Contrastive Fourier features; phi(s) := cos(W normalize(f(s)) + b)."""
    n_states, n_actions = _check_dataset(data)
    rho = next_state_marginal(data, n_states)
    featurizer = new_featurizer(k, d, derive_seed(cfg.seed, "fourier-w"))
    model = EnergyModel(
        "fourier", n_states, n_actions, k, rho,
        featurizer=featurizer, generator=torch_generator(cfg.seed, "init"),
    )
    _train_contrastive(model, data, cfg, progress=progress)
    with torch.no_grad():
        vectors = featurizer(model.params["f"]).numpy().copy()
    return Representation("fourier", d, vectors=vectors, featurizer=featurizer, model=model)


def write_training_log(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_r", "loss_t", "total"])
        for step, loss_r, loss_t, total in history:
            writer.writerow([step, f"{loss_r:.17g}", f"{loss_t:.17g}", f"{total:.17g}"])


# ---------------------------------------------------------------------------
# SVD baseline
# ---------------------------------------------------------------------------

def empirical_transition_matrix(data, n_states, n_actions):
    """T[s, a*S + s'] = count(s, a, s') / count(s); rows of unseen states are zero."""
    states = np.asarray(data.state)
    cols = np.asarray(data.action) * n_states + np.asarray(data.next_state)
    counts = scipy.sparse.coo_matrix(
        (np.ones(states.size), (states, cols)), shape=(n_states, n_actions * n_states)
    ).tocsr()
    row_totals = np.asarray(counts.sum(axis=1)).reshape(-1)
    scale = np.divide(1.0, row_totals, out=np.zeros_like(row_totals), where=row_totals > 0)
    return scipy.sparse.diags(scale) @ counts


def svd_features(data: "Dataset", n_states, n_actions, k=SVD_RANK):
    """Top-k left singular vectors scaled by singular values, one row per state.

    Uses the LOBPCG solver of scipy.sparse.linalg.svds with a fixed generator:
    ARPACK restarts from a process-wide seed after an invariant subspace, so two
    calls in one process could disagree. Small problems go to a dense eigensolver.
    """
    _check_dataset(data, n_states, n_actions)
    matrix = empirical_transition_matrix(data, n_states, n_actions)
    rank = min(k, min(matrix.shape) - 1)
    if rank < 1:
        raise ValueError(f"svd features need at least 2 states, got {n_states}")
    with warnings.catch_warnings():
        # dense fallback and early-exit notices
        warnings.simplefilter("ignore", UserWarning)
        u, svals, _ = scipy.sparse.linalg.svds(
            matrix, k=rank, tol=SVD_TOL, maxiter=SVD_MAX_ITER, solver="lobpcg",
            rng=np.random.default_rng(0),
        )
    order = np.argsort(svals)[::-1]
    u, svals = u[:, order], svals[order]
    # sign fix: largest-magnitude entry of each singular vector is positive
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(rank)])
    signs[signs == 0] = 1.0
    vectors = np.zeros((n_states, k))
    vectors[:, :rank] = u * signs * svals[:rank]
    logger.debug(f"svd: leading singular values {np.round(svals[:min(rank, 10)], 4).tolist()}")
    return Representation("svd", k, vectors=vectors)


# ---------------------------------------------------------------------------
# Explicit latent models from trained contrastive models
# ---------------------------------------------------------------------------

def extract_linear_dynamics(rep: Representation, data: "Dataset", r_max=1.0):
    """Factored linear models from a trained Fourier representation.

    psi(s', a) = (2 rho(s') / d) featurizer(g(s', a)), r = h, and the normalizer
    E(s, a) = mean_j (2 / d) phi(s).featurizer(g(s'_j, a)) over the next states
    s'_j recorded in data.
    Rows are clipped at PROJECTION_EPS and renormalized when evaluated.
    """
    if rep.variant != "fourier" or rep.model is None or rep.featurizer is None:
        raise ValueError("extract_linear_dynamics needs a trained fourier representation")
    model = rep.model
    _check_dataset(data, model.n_states, model.n_actions)
    featurizer = rep.featurizer
    with torch.no_grad():
        g_features = featurizer(model.params["g"]).numpy()          # [S', A, d]
    psi = (2.0 * model.rho[:, None, None] / featurizer.d) * g_features
    observed = g_features[np.asarray(data.next_state)].mean(axis=0)   # [A, d]
    normalizer = (2.0 / featurizer.d) * rep.vectors @ observed.T
    reward, _ = model.reward_head()
    return LatentModels(
        "factored-linear", reward, psi, r_max, normalizer=normalizer, project=True
    )


def extract_energy_models(rep: Representation, r_max=1.0):
    """Tabular R_Z, P_Z over the distinct embedding vectors of an energy model.

    Returns (explicit-table representation, tabular LatentModels).
    """
    if rep.variant != "energy" or rep.model is None:
        raise ValueError("extract_energy_models needs a trained energy representation")
    model = rep.model
    ids, distinct = latent_partition(rep.vectors)
    g = model.g_table()                                                     # [S', A, k]
    energy = 0.5 * ((distinct[:, None, None, :] - g[None, :, :, :]) ** 2).sum(axis=-1)   # [Z, S', A]
    logits = np.transpose(-energy, (0, 2, 1))                              # [Z, A, S']
    with np.errstate(divide="ignore"):
        logits = logits + np.log(model.rho)[None, None, :]
    logits -= logits.max(axis=-1, keepdims=True)
    dynamics = project_rows(np.exp(logits))
    head, bias = model.reward_head()
    reward = np.clip(distinct @ head + bias[None, :], -r_max, r_max)
    latent_rep = explicit_representation(ids, distinct.shape[0])
    return latent_rep, LatentModels("tabular", reward, dynamics, r_max)
