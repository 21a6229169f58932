# env_gen.py
#
# Environments and datasets:
#   - the duplicated three-level binary tree (8 canonical states)
#   - the six-state counterexample where zero bisimulation error still
#     lets an aliased latent policy lose almost all return
#   - optimal policies by value iteration
#   - offline (uniform-action) and demonstration datasets
#
#----------------------------------------------------------------------

import csv
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field

from behavior_cloning import lift
from bounds import best_latent_models, bisim_error, j_trans
from mdp_core import (
    DimensionMismatch,
    TabularMdp,
    TabularPolicy,
    marginalize,
    perf_diff,
    performance,
    policy_reward,
    policy_transition,
    sample_categorical,
    visitation,
)
from repr_learn import LatentModels, explicit_representation
from seeding import numpy_rng

logger = logging.getLogger(__name__)

CANONICAL_STATES = 8
DECISION_NODES = 7
TERMINAL = 7
EPISODE_LENGTH = 3
MAX_TREE_STATES = 8000
VALUE_ITERATION_TOL = 1e-10
TIE_TOL = 1e-12
REWARD_GAP_EPS = 1e-12


# ---------------------------------------------------------------------------
# tree environment
# ---------------------------------------------------------------------------

class TreeEnvSpec(BaseModel):
    duplication: int = Field(10, ge=1)
    intended_child_prob: float = Field(0.8, gt=0, le=1)
    dirichlet_alpha: float = Field(1.0, gt=0)
    reward_power: int = Field(3, ge=1)
    reward_noise_std: float = Field(1.0, ge=0)
    gamma: float = Field(0.95, ge=0, lt=1)
    seed: int = Field(0, ge=0)


@dataclass(frozen=True, eq=False)
class TreeEnv:
    mdp: TabularMdp
    canonical_map: np.ndarray     # state -> canonical node in 0..7
    canonical_mdp: TabularMdp
    spec: TreeEnvSpec
    horizon: int = EPISODE_LENGTH

    @property
    def duplication(self):
        return self.spec.duplication

    @property
    def reward_noise_std(self):
        return self.spec.reward_noise_std

    def fingerprint(self):
        return self.mdp.fingerprint()


def _children(node):
    return 2 * node + 1, 2 * node + 2


def canonical_tree(spec, rng):
    """8-state tree: root 0, nodes 1-2, nodes 3-6, terminal 7 (resets to the root)."""
    transition = np.zeros((CANONICAL_STATES, 2, CANONICAL_STATES))
    for node in range(DECISION_NODES):
        for action in (0, 1):
            if node >= 3:
                transition[node, action, TERMINAL] = 1.0
                continue
            kids = _children(node)
            spread = rng.dirichlet([spec.dirichlet_alpha, spec.dirichlet_alpha])
            transition[node, action, kids[action]] += spec.intended_child_prob
            transition[node, action, list(kids)] += (1.0 - spec.intended_child_prob) * spread
    transition[TERMINAL, :, 0] = 1.0

    means = rng.uniform(0.0, 1.0, size=(DECISION_NODES, 2)) ** spec.reward_power
    reward = np.zeros((CANONICAL_STATES, 2))
    # every step: the better action pays 1, the other 0
    low = means.min(axis=1, keepdims=True)
    reward[:DECISION_NODES] = (means - low) / np.maximum(means.max(axis=1, keepdims=True) - low, REWARD_GAP_EPS)

    initial = np.zeros(CANONICAL_STATES)
    initial[0] = 1.0
    return TabularMdp(transition, reward, initial, spec.gamma, 1.0)


def make_tree_env(spec: TreeEnvSpec):
    n_states = CANONICAL_STATES * spec.duplication
    if n_states > MAX_TREE_STATES:
        raise ValueError(f"duplication {spec.duplication} gives {n_states} states (max {MAX_TREE_STATES})")
    canonical = canonical_tree(spec, numpy_rng(spec.seed, "tree-env"))

    dup = spec.duplication
    canonical_map = np.repeat(np.arange(CANONICAL_STATES), dup)
    transition = canonical.transition[canonical_map][:, :, canonical_map] / dup
    reward = canonical.reward[canonical_map]
    initial = canonical.initial[canonical_map] / dup
    mdp = TabularMdp(transition, reward, initial, spec.gamma, 1.0)
    canonical_map.setflags(write=False)
    logger.debug(f"tree env: {n_states} states, seed {spec.seed}, fingerprint {mdp.fingerprint()}")
    return TreeEnv(mdp, canonical_map, canonical, spec)


def canonical_representation(env):
    return explicit_representation(env.canonical_map, CANONICAL_STATES)


def canonical_models(env):
    """Exact latent models for the ground-truth map: R_Z and P_Z split over duplicates."""
    dynamics = env.canonical_mdp.transition[:, :, env.canonical_map] / env.duplication
    return LatentModels("tabular", env.canonical_mdp.reward, dynamics, env.mdp.r_max)


def offline_distribution(env):
    """d_off used by the bound computations: visitation of the uniform policy."""
    mdp = getattr(env, "mdp", env)
    return visitation(mdp, TabularPolicy.uniform(mdp.n_states, mdp.n_actions))


def mean_step_reward(env, policy):
    """Expected mean reward per step over one episode, by exact propagation."""
    mdp = env.mdp
    dist = mdp.initial.copy()
    r_pi = policy_reward(mdp, policy)
    p_pi = policy_transition(mdp, policy)
    total = 0.0
    for _ in range(env.horizon):
        total += float(dist @ r_pi)
        dist = dist @ p_pi
    return total / env.horizon


def optimal_policy(mdp, tol=VALUE_ITERATION_TOL):
    """Greedy policy after value iteration to Bellman residual <= tol; ties go to the lowest action."""
    values = np.zeros(mdp.n_states)
    while True:
        q = mdp.reward + mdp.gamma * mdp.transition @ values
        updated = q.max(axis=1)
        residual = float(np.max(np.abs(updated - values)))
        values = updated
        if residual <= tol:
            break
    q = mdp.reward + mdp.gamma * mdp.transition @ values
    best = q.max(axis=1, keepdims=True)
    actions = np.argmax(q >= best - TIE_TOL, axis=1)
    return TabularPolicy.deterministic(actions, mdp.n_actions)


# ---------------------------------------------------------------------------
# counterexample
# ---------------------------------------------------------------------------

LEFT, RIGHT = 0, 1

# s1..s6 are indices 0..5; each entry is (next state on LEFT, next state on RIGHT)
_COUNTEREXAMPLE_EDGES = {
    0: (0, 0),   # s1 absorbs
    1: (3, 2),   # s2 -> s4 | s3
    2: (4, 5),   # s3 -> s5 | s6
    3: (4, 1),   # s4 -> s5 | s2
    4: (0, 5),   # s5 -> s1 | s6
    5: (1, 2),   # s6 -> s2 | s3
}
_COUNTEREXAMPLE_TARGET = (LEFT, LEFT, LEFT, LEFT, RIGHT, LEFT)


def make_counterexample(gamma=0.95):
    """Six states, phi(s_k) = z_(k mod 3), reward 1 only at (s4, LEFT).

    The target walks s3 s5 s6 s2 s4 s5 ...; s2 and s5 share a latent but
    take different actions, so the aliased policy leaks into absorbing s1.
    """
    transition = np.zeros((6, 2, 6))
    for state, (left, right) in _COUNTEREXAMPLE_EDGES.items():
        transition[state, LEFT, left] = 1.0
        transition[state, RIGHT, right] = 1.0
    reward = np.zeros((6, 2))
    reward[3, LEFT] = 1.0
    initial = np.zeros(6)
    initial[2] = 1.0
    mdp = TabularMdp(transition, reward, initial, gamma, 1.0)
    phi = (np.arange(6) + 1) % 3
    target = TabularPolicy.deterministic(_COUNTEREXAMPLE_TARGET, 2)
    return mdp, phi, target


@dataclass
class CounterexampleReport:
    d_star: np.ndarray
    reward_aliasing: float
    transition_aliasing: float
    target_return: float
    aliased_return: float
    perf_diff: float
    min_j_trans: float

    @property
    def passed(self):
        return (
            max(self.reward_aliasing, self.transition_aliasing) <= 1e-12
            and self.perf_diff >= 0.5
            and self.min_j_trans >= 0.1
        )

    def to_dict(self):
        return {
            "d_star": self.d_star.tolist(),
            "reward_aliasing": self.reward_aliasing,
            "transition_aliasing": self.transition_aliasing,
            "target_return": self.target_return,
            "aliased_return": self.aliased_return,
            "perf_diff": self.perf_diff,
            "min_j_trans": self.min_j_trans,
            "passed": self.passed,
        }


def verify_counterexample(mdp, phi, target):
    """Exact check that phi has zero bisimulation error yet a positive J_T floor and perf gap."""
    if (mdp.n_states, mdp.n_actions) != (6, 2):
        raise DimensionMismatch(f"the counterexample has 6 states and 2 actions, got {(mdp.n_states, mdp.n_actions)}")
    phi = np.asarray(phi, dtype=np.int64)
    n_latents = int(phi.max()) + 1
    d_star = visitation(mdp, target)
    _, pi_star_z = marginalize(mdp, phi, target, d_star, n_latents=n_latents)
    rep = explicit_representation(phi, n_latents)
    aliased = lift(pi_star_z, rep)

    reward_aliasing, transition_aliasing = bisim_error(mdp, phi, d_star)
    models = best_latent_models(mdp, phi, d_star, n_latents)
    report = CounterexampleReport(
        d_star=d_star.probs,
        reward_aliasing=reward_aliasing,
        transition_aliasing=transition_aliasing,
        target_return=performance(mdp, target),
        aliased_return=performance(mdp, aliased),
        perf_diff=perf_diff(mdp, aliased, target),
        min_j_trans=j_trans(mdp, d_star, phi, models),
    )
    logger.info(
        f"counterexample: bisim error ({reward_aliasing:.3g}, {transition_aliasing:.3g}), "
        f"perf diff {report.perf_diff:.4f}, min J_T {report.min_j_trans:.4f}"
    )
    return report


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

COLUMNS = ("episode", "t", "state", "action", "reward", "next_state")


@dataclass(eq=False)
class Dataset:
    episode: np.ndarray
    t: np.ndarray
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    kind: str
    env_fingerprint: str
    seed: int
    n_states: int
    n_actions: int

    def __post_init__(self):
        if self.kind not in ("offline", "demos"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        for name in ("state", "next_state"):
            values = np.asarray(getattr(self, name))
            if values.size and (values.min() < 0 or values.max() >= self.n_states):
                raise DimensionMismatch(f"{name} ids out of range [0, {self.n_states})")
        actions = np.asarray(self.action)
        if actions.size and (actions.min() < 0 or actions.max() >= self.n_actions):
            raise DimensionMismatch(f"action ids out of range [0, {self.n_actions})")

    def __len__(self):
        return len(self.state)

    def sidecar(self):
        return {
            "kind": self.kind,
            "seed": self.seed,
            "env_fingerprint": self.env_fingerprint,
            "count": len(self),
            "n_states": self.n_states,
            "n_actions": self.n_actions,
        }

    def save(self, path):
        """CSV rows plus a `<path>.json` sidecar with provenance."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            for row in zip(self.episode, self.t, self.state, self.action, self.reward, self.next_state):
                ep, t, s, a, r, s_next = row
                writer.writerow([int(ep), int(t), int(s), int(a), f"{float(r):.17g}", int(s_next)])
        with open(path + ".json", "w") as fh:
            json.dump(self.sidecar(), fh, indent=2)

    @classmethod
    def load(cls, path):
        if not os.path.exists(path + ".json"):
            raise FileNotFoundError(f"missing dataset sidecar {path}.json")
        with open(path + ".json") as fh:
            meta = json.load(fh)
        columns = {name: [] for name in COLUMNS}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                for name in COLUMNS:
                    columns[name].append(row[name])
        data = cls(
            episode=np.asarray(columns["episode"], dtype=np.int64),
            t=np.asarray(columns["t"], dtype=np.int64),
            state=np.asarray(columns["state"], dtype=np.int64),
            action=np.asarray(columns["action"], dtype=np.int64),
            reward=np.asarray(columns["reward"], dtype=np.float64),
            next_state=np.asarray(columns["next_state"], dtype=np.int64),
            kind=meta["kind"],
            env_fingerprint=meta["env_fingerprint"],
            seed=meta["seed"],
            n_states=meta["n_states"],
            n_actions=meta["n_actions"],
        )
        if len(data) != meta["count"]:
            raise ValueError(f"{path}: {len(data)} rows but the sidecar says {meta['count']}")
        return data


def _episode_count(count, horizon, what):
    if count < 1:
        raise ValueError(f"{what} count must be >= 1, got {count}")
    episodes = count // horizon
    if count % horizon:
        logger.warning(f"{what} count {count} is not a multiple of the episode length {horizon}; using {episodes * horizon}")
    if episodes == 0:
        raise ValueError(f"{what} count {count} is shorter than one episode ({horizon} steps)")
    return episodes


def _rollouts(mdp, policy_probs, episodes, horizon, noise_std, rng):
    n = episodes * horizon
    out = {name: np.zeros(n, dtype=np.float64 if name == "reward" else np.int64) for name in COLUMNS}
    states = sample_categorical(rng, np.broadcast_to(mdp.initial, (episodes, mdp.n_states)))
    for t in range(horizon):
        actions = sample_categorical(rng, policy_probs[states])
        rewards = mdp.reward[states, actions] + noise_std * rng.standard_normal(episodes)
        next_states = sample_categorical(rng, mdp.transition[states, actions])
        rows = np.arange(episodes) * horizon + t
        out["episode"][rows] = np.arange(episodes)
        out["t"][rows] = t
        out["state"][rows] = states
        out["action"][rows] = actions
        out["reward"][rows] = rewards
        out["next_state"][rows] = next_states
        states = next_states
    return out


def _iid(mdp, state_probs, policy_probs, count, noise_std, rng):
    states = sample_categorical(rng, np.broadcast_to(state_probs, (count, mdp.n_states)))
    actions = sample_categorical(rng, policy_probs[states])
    return {
        "episode": np.arange(count),
        "t": np.zeros(count, dtype=np.int64),
        "state": states,
        "action": actions,
        "reward": mdp.reward[states, actions] + noise_std * rng.standard_normal(count),
        "next_state": sample_categorical(rng, mdp.transition[states, actions]),
    }


def sample_offline(env, M, seed, d_off=None, noise_std=0.0):
    """M transitions with uniform actions.

    Tree envs roll out M/3 full episodes from the root; a bare TabularMdp
    draws states i.i.d. from d_off (default: the uniform policy's visitation).
    """
    rng = numpy_rng(seed, "offline")
    if isinstance(env, TreeEnv):
        mdp = env.mdp
        uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
        episodes = _episode_count(M, env.horizon, "offline")
        columns = _rollouts(mdp, uniform, episodes, env.horizon, env.reward_noise_std, rng)
    else:
        mdp = env
        if M < 1:
            raise ValueError(f"offline count must be >= 1, got {M}")
        uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
        state_probs = offline_distribution(mdp).probs if d_off is None else np.asarray(getattr(d_off, "probs", d_off))
        columns = _iid(mdp, state_probs, uniform, M, noise_std, rng)
    return Dataset(**columns, kind="offline", env_fingerprint=mdp.fingerprint(), seed=seed,
                   n_states=mdp.n_states, n_actions=mdp.n_actions)


def sample_demos(env, target, N, seed, noise_std=0.0):
    """N (s, a) pairs from the target: N/3 episodes on tree envs, i.i.d. from d* otherwise."""
    rng = numpy_rng(seed, "demos")
    if isinstance(env, TreeEnv):
        mdp = env.mdp
        episodes = _episode_count(N, env.horizon, "demo")
        columns = _rollouts(mdp, target.probs, episodes, env.horizon, env.reward_noise_std, rng)
    else:
        mdp = env
        if N < 1:
            raise ValueError(f"demo count must be >= 1, got {N}")
        columns = _iid(mdp, visitation(mdp, target).probs, target.probs, N, noise_std, rng)
    return Dataset(**columns, kind="demos", env_fingerprint=mdp.fingerprint(), seed=seed,
                   n_states=mdp.n_states, n_actions=mdp.n_actions)
