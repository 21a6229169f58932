# behavior_cloning.py
#
# Behavioral cloning on top of a fixed representation:
#   tabular    - empirical conditional counts per latent id
#   loglinear  - softmax(theta^T z), closed-form gradient
#   mlp        - one ReLU hidden layer + softmax, torch autograd
# and lift(), which turns a latent policy back into a state policy.
#
#----------------------------------------------------------------------

import csv
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field
from tqdm import tqdm

from mdp_core import (
    DimensionMismatch,
    LatentTabularPolicy,
    LogLinearPolicy,
    TabularPolicy,
    softmax_rows,
)
from optim import Adam
from seeding import torch_generator

if TYPE_CHECKING:
    from env_gen import Dataset
    from repr_learn import Representation

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-3


class BcConfig(BaseModel):
    lr: float = Field(0.01, gt=0)
    steps: int = Field(500, ge=0)
    batch_size: Optional[int] = Field(None, gt=0)   # None -> full empirical distribution
    seed: int = Field(0, ge=0)
    hidden_units: int = Field(512, gt=0)
    end_to_end: bool = False


def demo_weights(demos: "Dataset", n_states=None, n_actions=None):
    """Empirical joint distribution of (s, a) in the demos, [S, A]."""
    n_states = demos.n_states if n_states is None else n_states
    n_actions = demos.n_actions if n_actions is None else n_actions
    states = np.asarray(demos.state, dtype=np.int64)
    actions = np.asarray(demos.action, dtype=np.int64)
    if states.size == 0:
        raise ValueError("demos are empty")
    if states.max() >= n_states or actions.max() >= n_actions or states.min() < 0 or actions.min() < 0:
        raise DimensionMismatch("demo state/action ids out of range")
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (states, actions), 1.0)
    return counts / states.size


def bc_tabular(demos: "Dataset", rep: "Representation"):
    """pi_Z(a|z) = count(z, a) / count(z); uniform for latents never seen."""
    if not rep.is_tabular:
        raise ValueError("bc_tabular needs an explicit-table representation")
    states = np.asarray(demos.state, dtype=np.int64)
    if states.size == 0:
        raise ValueError("demos are empty")
    if states.max() >= rep.n_states:
        raise DimensionMismatch("demo states outside the representation's domain")
    return empirical_latent_policy(rep.latent_ids[states], demos.action, rep.latent_dim, demos.n_actions)


def empirical_latent_policy(latents, actions, n_latents, n_actions):
    counts = np.zeros((n_latents, n_actions))
    np.add.at(counts, (np.asarray(latents, dtype=np.int64), np.asarray(actions, dtype=np.int64)), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / n_actions)
    return LatentTabularPolicy(probs)


# ---------------------------------------------------------------------------
# log-linear
# ---------------------------------------------------------------------------

def bc_loss_and_grad(theta, features, weights):
    """Weighted J_BC of softmax(features @ theta) and its gradients.

    weights[s, a] is the (unnormalized) mass of (s, a); with d*(s) pi*(a|s)
    this is the exact objective, with demo counts the empirical one.
    Returns (loss, d_theta [d, A], d_features [S, d]).
    """
    theta = np.asarray(theta, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    logits = features @ theta
    logits = logits - logits.max(axis=1, keepdims=True)
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    loss = -float(np.sum(weights * log_probs)) / total
    # d/dlogits of -sum w log softmax = w_s * p - w
    residual = (weights.sum(axis=1, keepdims=True) * probs - weights) / total
    return loss, features.T @ residual, residual @ theta.T


def bc_gradient_l1(policy: LogLinearPolicy, features, weights):
    _, grad, _ = bc_loss_and_grad(policy.theta, features, weights)
    return float(np.abs(grad).sum())


def bc_loglinear(demos: "Dataset", rep: "Representation", cfg: BcConfig, history=None, progress=False):
    """Adam on the empirical J_BC of a log-linear policy over rep's features."""
    features = rep.features()
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite features")
    weights = demo_weights(demos, rep.n_states)
    params = {
        "theta": torch.zeros(features.shape[1], demos.n_actions, dtype=torch.float64),
    }
    if cfg.end_to_end:
        params["features"] = torch.tensor(features, dtype=torch.float64)
    opt = Adam(lr=cfg.lr)
    gen = torch_generator(cfg.seed, "bc-batches")

    def evaluate(batch_weights):
        feats = params["features"].numpy() if cfg.end_to_end else features
        return bc_loss_and_grad(params["theta"].numpy(), feats, batch_weights)

    best_loss, _, _ = evaluate(weights)
    best = {name: p.clone() for name, p in params.items()}
    for step in tqdm(range(cfg.steps), disable=not progress, desc="bc-loglinear"):
        batch_weights = _batch_weights(demos, weights, cfg, gen)
        loss, d_theta, d_features = evaluate(batch_weights)
        grads = {"theta": torch.from_numpy(d_theta)}
        if cfg.end_to_end:
            grads["features"] = torch.from_numpy(d_features)
        opt.step(params, grads)
        full_loss, full_grad, _ = evaluate(weights)
        if history is not None:
            history.append((step, full_loss, float(np.abs(full_grad).sum())))
        if full_loss <= best_loss:
            best_loss = full_loss
            best = {name: p.clone() for name, p in params.items()}

    override = best["features"].numpy() if cfg.end_to_end else None
    policy = LogLinearPolicy(best["theta"].numpy(), feature_override=override)
    logger.info(f"bc-loglinear: {cfg.steps} steps, empirical J_BC {best_loss:.4f} (log|A| = {math.log(demos.n_actions):.4f})")
    return policy


def _batch_weights(demos, weights, cfg, gen):
    if cfg.batch_size is None:
        return weights
    n = len(demos.state)
    idx = torch.randint(n, (cfg.batch_size,), generator=gen).numpy()
    out = np.zeros_like(weights)
    np.add.at(out, (np.asarray(demos.state)[idx], np.asarray(demos.action)[idx]), 1.0)
    return out / cfg.batch_size


# ---------------------------------------------------------------------------
# single-hidden-layer MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MlpPolicy:
    w1: np.ndarray   # [d, H]
    b1: np.ndarray   # [H]
    w2: np.ndarray   # [H, A]
    b2: np.ndarray   # [A]
    feature_override: Optional[np.ndarray] = None

    @property
    def latent_dim(self):
        return self.w1.shape[0]

    @property
    def n_actions(self):
        return self.w2.shape[1]

    def action_probs(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.latent_dim:
            raise DimensionMismatch(f"features have dim {features.shape[-1]}, policy expects {self.latent_dim}")
        hidden = np.maximum(features @ self.w1 + self.b1, 0.0)
        return softmax_rows(hidden @ self.w2 + self.b2)

    def to_dict(self):
        params = {name: getattr(self, name).tolist() for name in ("w1", "b1", "w2", "b2")}
        if self.feature_override is not None:
            params["feature_override"] = self.feature_override.tolist()
        return {"variant": "mlp", "parameters": params}


def init_mlp_params(d, hidden_units, n_actions, generator):
    w1 = torch.randn(d, hidden_units, generator=generator, dtype=torch.float64) / math.sqrt(d)
    return {
        "w1": w1.requires_grad_(),
        "b1": torch.zeros(hidden_units, dtype=torch.float64, requires_grad=True),
        "w2": torch.zeros(hidden_units, n_actions, dtype=torch.float64, requires_grad=True),
        "b2": torch.zeros(n_actions, dtype=torch.float64, requires_grad=True),
    }


def mlp_loss(params, features, weights):
    """Weighted J_BC of the MLP policy; features/weights are torch tensors."""
    hidden = torch.relu(features @ params["w1"] + params["b1"])
    log_probs = torch.log_softmax(hidden @ params["w2"] + params["b2"], dim=1)
    return -(weights * log_probs).sum() / weights.sum()


def bc_mlp(demos: "Dataset", rep: "Representation", cfg: BcConfig, history=None, progress=False):
    features = rep.features()
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite features")
    weights = torch.from_numpy(demo_weights(demos, rep.n_states))
    params = init_mlp_params(features.shape[1], cfg.hidden_units, demos.n_actions, torch_generator(cfg.seed, "mlp-init"))
    feats = torch.tensor(features, dtype=torch.float64, requires_grad=cfg.end_to_end)
    if cfg.end_to_end:
        params["features"] = feats
    opt = Adam(lr=cfg.lr)
    gen = torch_generator(cfg.seed, "bc-batches")

    def full_loss():
        with torch.no_grad():
            return float(mlp_loss(params, feats, weights))

    best_loss = full_loss()
    best = {name: p.detach().clone() for name, p in params.items()}
    names = list(params)
    for step in tqdm(range(cfg.steps), disable=not progress, desc="bc-mlp"):
        batch_weights = torch.from_numpy(_batch_weights(demos, weights.numpy(), cfg, gen))
        loss = mlp_loss(params, feats, batch_weights)
        values = torch.autograd.grad(loss, [params[n] for n in names])
        grads = dict(zip(names, values))
        opt.step(params, grads)
        current = full_loss()
        if history is not None:
            history.append((step, current, float(sum(g.abs().sum() for g in values))))
        if current <= best_loss:
            best_loss = current
            best = {name: p.detach().clone() for name, p in params.items()}

    logger.info(f"bc-mlp: {cfg.steps} steps, empirical J_BC {best_loss:.4f}")
    return MlpPolicy(
        best["w1"].numpy(), best["b1"].numpy(), best["w2"].numpy(), best["b2"].numpy(),
        feature_override=best["features"].numpy() if cfg.end_to_end else None,
    )


def write_bc_log(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "bc_loss", "grad_l1"])
        for step, loss, grad_l1 in history:
            writer.writerow([step, f"{loss:.17g}", f"{grad_l1:.17g}"])


# ---------------------------------------------------------------------------
# lift
# ---------------------------------------------------------------------------

def lift(policy, rep: "Representation"):
    """pi(a|s) = pi_Z(a|phi(s)) as a state-indexed TabularPolicy."""
    if isinstance(policy, LatentTabularPolicy):
        if not rep.is_tabular:
            raise ValueError("a latent-tabular policy needs an explicit-table representation")
        return TabularPolicy(policy.action_probs(rep.latent_ids))
    if isinstance(policy, (LogLinearPolicy, MlpPolicy)):
        features = policy.feature_override if policy.feature_override is not None else rep.features()
        return TabularPolicy(policy.action_probs(features))
    raise TypeError(f"cannot lift a {type(policy).__name__}")
