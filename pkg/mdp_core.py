# mdp_core.py
#
# Exact finite MDPs, policies, state distributions and divergences.
# Everything here is evaluated in closed form (dense LU solves), because
# the bound checks built on top of it need machine-precision values.
#
#----------------------------------------------------------------------

import hashlib
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

CONSTRUCT_TOL = 1e-12   # probability checks at construction time
RESULT_TOL = 1e-10      # probability checks on computed outputs


class MdpError(ValueError):
    pass


class DimensionMismatch(MdpError):
    pass


class InvalidDistribution(MdpError):
    pass


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_simplex_rows(probs, what, tol=CONSTRUCT_TOL):
    if not np.all(np.isfinite(probs)):
        raise InvalidDistribution(f"{what} contains non-finite entries")
    if np.any(probs < 0):
        raise InvalidDistribution(f"{what} has negative entries (min {probs.min():.3e})")
    sums = probs.sum(axis=-1)
    worst = np.max(np.abs(sums - 1.0)) if sums.size else 0.0
    if worst > tol:
        raise InvalidDistribution(f"{what} rows do not sum to 1 (max deviation {worst:.3e})")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray   # [s, a, s']
    reward: np.ndarray       # [s, a], expected rewards
    initial: np.ndarray      # mu over states
    gamma: float
    r_max: float

    def __post_init__(self):
        transition = _frozen(self.transition)
        reward = _frozen(self.reward)
        initial = _frozen(self.initial)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise DimensionMismatch(f"transition must be [S, A, S], got {transition.shape}")
        n_states, n_actions = transition.shape[:2]
        if n_states < 1 or n_actions < 1:
            raise DimensionMismatch("an MDP needs at least one state and one action")
        if reward.shape != (n_states, n_actions):
            raise DimensionMismatch(f"reward must be {(n_states, n_actions)}, got {reward.shape}")
        if initial.shape != (n_states,):
            raise DimensionMismatch(f"initial must have length {n_states}, got {initial.shape}")
        _check_simplex_rows(transition, "transition")
        _check_simplex_rows(initial, "initial distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise MdpError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.r_max > 0:
            raise MdpError(f"r_max must be positive, got {self.r_max}")
        if np.any(np.abs(reward) > self.r_max + CONSTRUCT_TOL):
            raise MdpError(f"|reward| exceeds r_max={self.r_max} (max {np.abs(reward).max():.6g})")
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def with_gamma(self, gamma):
        return TabularMdp(self.transition, self.reward, self.initial, gamma, self.r_max)

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "initial": self.initial.tolist(),
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        mdp = cls(
            transition=np.asarray(doc["transition"], dtype=np.float64),
            reward=np.asarray(doc["reward"], dtype=np.float64),
            initial=np.asarray(doc["initial"], dtype=np.float64),
            gamma=doc["gamma"],
            r_max=doc["r_max"],
        )
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise DimensionMismatch("declared n_states/n_actions disagree with the tables")
        return mdp

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.transition, self.reward, self.initial):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.gamma, self.r_max)).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray   # [s, a]

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise DimensionMismatch(f"policy table must be [S, A], got {probs.shape}")
        _check_simplex_rows(probs, "policy")
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self):
        return self.probs.shape[0]

    @property
    def n_actions(self):
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def to_dict(self):
        return {"variant": "tabular", "parameters": {"probs": self.probs.tolist()}}


@dataclass(frozen=True, eq=False)
class LatentTabularPolicy:
    probs: np.ndarray   # [z, a]

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise DimensionMismatch(f"latent policy table must be [Z, A], got {probs.shape}")
        _check_simplex_rows(probs, "latent policy")
        object.__setattr__(self, "probs", probs)

    @property
    def latent_count(self):
        return self.probs.shape[0]

    @property
    def n_actions(self):
        return self.probs.shape[1]

    def action_probs(self, latent_ids):
        return self.probs[np.asarray(latent_ids, dtype=np.int64)]

    def to_dict(self):
        return {"variant": "latent-tabular", "parameters": {"probs": self.probs.tolist()}}


def softmax_rows(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class LogLinearPolicy:
    theta: np.ndarray                   # [d, A]
    feature_override: np.ndarray = None  # end-to-end tuned [S, d] table, if any

    def __post_init__(self):
        theta = _frozen(self.theta)
        if theta.ndim != 2:
            raise DimensionMismatch(f"theta must be [d, A], got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite entries")
        object.__setattr__(self, "theta", theta)
        if self.feature_override is not None:
            object.__setattr__(self, "feature_override", _frozen(self.feature_override))

    @property
    def latent_dim(self):
        return self.theta.shape[0]

    @property
    def n_actions(self):
        return self.theta.shape[1]

    def action_probs(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.latent_dim:
            raise DimensionMismatch(f"features have dim {features.shape[-1]}, theta expects {self.latent_dim}")
        return softmax_rows(features @ self.theta)

    def to_dict(self):
        params = {"theta": self.theta.tolist()}
        if self.feature_override is not None:
            params["feature_override"] = self.feature_override.tolist()
        return {"variant": "loglinear", "parameters": params}


@dataclass(frozen=True, eq=False)
class StateDistribution:
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 1:
            raise DimensionMismatch(f"state distribution must be a vector, got {probs.shape}")
        _check_simplex_rows(probs[None, :], "state distribution", tol=RESULT_TOL)
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return self.probs.size


def _probs(x):
    return x.probs if hasattr(x, "probs") else np.asarray(x, dtype=np.float64)


def _check_policy(mdp, policy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def policy_transition(mdp, policy):
    """P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)."""
    _check_policy(mdp, policy)
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def policy_reward(mdp, policy):
    _check_policy(mdp, policy)
    return np.einsum("sa,sa->s", policy.probs, mdp.reward)


def _solve(matrix, rhs):
    try:
        return scipy.linalg.solve(matrix, rhs)
    except (scipy.linalg.LinAlgError, ValueError) as e:
        # cannot happen for gamma < 1; treat as an internal error
        raise RuntimeError(f"singular system in exact evaluation: {e}") from e


def visitation(mdp, policy):
    """d^pi = (1 - gamma) (I - gamma P_pi^T)^{-1} mu."""
    p_pi = policy_transition(mdp, policy)
    system = np.eye(mdp.n_states) - mdp.gamma * p_pi.T
    d = (1.0 - mdp.gamma) * _solve(system, mdp.initial)
    d = np.clip(d, 0.0, None)
    return StateDistribution(d / d.sum())


def state_values(mdp, policy):
    p_pi = policy_transition(mdp, policy)
    system = np.eye(mdp.n_states) - mdp.gamma * p_pi
    return _solve(system, policy_reward(mdp, policy))


def performance(mdp, policy):
    """J_Perf(pi): expected discounted return from mu."""
    return float(mdp.initial @ state_values(mdp, policy))


def perf_diff(mdp, p1, p2):
    return abs(performance(mdp, p1) - performance(mdp, p2))


def monte_carlo_performance(mdp, policy, n_rollouts, horizon, rng):
    """Truncated-rollout estimate of J_Perf; returns (mean, standard error)."""
    _check_policy(mdp, policy)
    states = rng.choice(mdp.n_states, size=n_rollouts, p=mdp.initial)
    returns = np.zeros(n_rollouts)
    discount = 1.0
    for _ in range(horizon):
        actions = sample_categorical(rng, policy.probs[states])
        returns += discount * mdp.reward[states, actions]
        states = sample_categorical(rng, mdp.transition[states, actions])
        discount *= mdp.gamma
    return float(returns.mean()), float(returns.std(ddof=1) / math.sqrt(n_rollouts))


def sample_categorical(rng, probs_rows):
    """One draw per row of a [n, k] probability table."""
    cdf = np.cumsum(probs_rows, axis=1)
    idx = (rng.random(cdf.shape[0])[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def _check_pair(p, q, simplex):
    p = _probs(p)
    q = _probs(q)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionMismatch(f"distributions differ in shape: {p.shape} vs {q.shape}")
    if simplex:
        _check_simplex_rows(p[None, :], "p", tol=RESULT_TOL)
        _check_simplex_rows(q[None, :], "q", tol=RESULT_TOL)
    return p, q


def kl(p, q):
    """D_KL(p||q); math.inf when p puts mass where q has none."""
    p, q = _check_pair(p, q, simplex=True)
    support = p > 0
    if np.any(q[support] <= 0):
        return math.inf
    return max(float(np.sum(p[support] * np.log(p[support] / q[support]))), 0.0)


def tv(p, q):
    p, q = _check_pair(p, q, simplex=False)
    return float(min(0.5 * np.abs(p - q).sum(), 1.0))


def chi2(p, q):
    """Pearson chi-square D(p||q); math.inf on support violation."""
    p, q = _check_pair(p, q, simplex=True)
    if np.any(p[q <= 0] > 0):
        return math.inf
    support = q > 0
    return float(np.sum((p[support] - q[support]) ** 2 / q[support]))


def kl_rows(p_rows, q_rows):
    """Row-wise KL for [..., n] tables; inf where the support is violated."""
    p_rows = np.asarray(p_rows, dtype=np.float64)
    q_rows = np.asarray(q_rows, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_rows > 0, p_rows * (np.log(p_rows) - np.log(q_rows)), 0.0)
    violated = np.any((p_rows > 0) & (q_rows <= 0), axis=-1)
    out = np.clip(terms.sum(axis=-1), 0.0, None)
    return np.where(violated, np.inf, out)


def marginalize(mdp, phi, policy, d, n_latents=None):
    """Push (d, policy) through a tabular phi: returns (d_Z, pi_Z).

    Latents with zero mass get the uniform action distribution.
    """
    phi = np.asarray(phi, dtype=np.int64)
    d = _probs(d)
    _check_policy(mdp, policy)
    if phi.shape != (mdp.n_states,):
        raise DimensionMismatch(f"phi must map all {mdp.n_states} states, got shape {phi.shape}")
    if n_latents is None:
        n_latents = int(phi.max()) + 1
    if phi.min() < 0 or phi.max() >= n_latents:
        raise DimensionMismatch(f"phi image out of range [0, {n_latents})")
    _check_simplex_rows(d[None, :], "d", tol=RESULT_TOL)
    d_z = np.bincount(phi, weights=d, minlength=n_latents)
    joint = np.zeros((n_latents, mdp.n_actions))
    np.add.at(joint, phi, d[:, None] * policy.probs)
    pi_z = np.full_like(joint, 1.0 / mdp.n_actions)
    seen = d_z > 0
    pi_z[seen] = joint[seen] / d_z[seen, None]
    pi_z[seen] /= pi_z[seen].sum(axis=1, keepdims=True)
    return StateDistribution(d_z), LatentTabularPolicy(pi_z)


def random_mdp(rng, n_states, n_actions, gamma=None, r_max=1.0, alpha=1.0):
    """Dirichlet-random transitions, uniform rewards in [-r_max, r_max]."""
    transition = rng.dirichlet(np.full(n_states, alpha), size=(n_states, n_actions))
    reward = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    initial = rng.dirichlet(np.ones(n_states))
    if gamma is None:
        gamma = rng.uniform(0.1, 0.95)
    return TabularMdp(transition, reward, initial, gamma, r_max)


def random_policy(rng, n_states, n_actions, alpha=1.0):
    return TabularPolicy(rng.dirichlet(np.full(n_actions, alpha), size=n_states))
