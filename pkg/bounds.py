# bounds.py
#
# Exact evaluation of the representation errors (J_R, J_T, eps_RT) and of
# every performance-difference bound built on them, plus the Monte Carlo
# sample-efficiency checks and the randomized property suites that use
# each bound as a test oracle.
#
#----------------------------------------------------------------------

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from behavior_cloning import bc_loss_and_grad, demo_weights, empirical_latent_policy, lift
from mdp_core import (
    DimensionMismatch,
    LatentTabularPolicy,
    LogLinearPolicy,
    TabularMdp,
    TabularPolicy,
    chi2,
    kl_rows,
    marginalize,
    perf_diff,
    random_mdp,
    random_policy,
    visitation,
)
from repr_learn import LatentModels, Representation, explicit_representation
from seeding import numpy_rng

logger = logging.getLogger(__name__)

SLACK_TOL = 1e-9
MC_STDERRS = 3.0

REWARD_MODES = ("full", "action-independent")
SUITES = ("lemma1", "lemma2", "lemma2-action-independent", "thm1", "thm1-action-independent", "thm2")


class BoundViolation(RuntimeError):
    pass


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    terms: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def slack(self):
        if math.isinf(self.rhs):
            return math.inf
        return self.rhs - self.lhs

    @property
    def holds(self):
        return self.slack >= -SLACK_TOL

    def to_dict(self):
        doc = {"name": self.name, "lhs": _json_float(self.lhs), "rhs": _json_float(self.rhs),
               "slack": _json_float(self.slack), "holds": self.holds}
        doc.update({key: _json_float(value) for key, value in self.terms.items()})
        doc["flags"] = list(self.flags)
        return doc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _json_float(value):
    if isinstance(value, (bool, str)) or value is None:
        return value
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def assert_holds(report):
    if not report.holds:
        raise BoundViolation(f"{report.name}: lhs {report.lhs:.12g} exceeds rhs {report.rhs:.12g}")
    return report


def _phi_arg(phi):
    if isinstance(phi, Representation):
        return phi.latent_ids if phi.is_tabular else phi.vectors
    return np.asarray(phi)


def _d(d):
    return d.probs if hasattr(d, "probs") else np.asarray(d, dtype=np.float64)


# ---------------------------------------------------------------------------
# representation errors
# ---------------------------------------------------------------------------

def j_reward(mdp, d_off, phi, models):
    """sqrt(E_{s~d_off, a~Unif}[(R(s,a) - R_Z(phi(s),a))^2])."""
    d = _d(d_off)
    predicted = models.rewards_at(_phi_arg(phi))
    if predicted.shape != mdp.reward.shape or d.shape != (mdp.n_states,):
        raise DimensionMismatch("reward model, d_off and MDP disagree in shape")
    sq = ((mdp.reward - predicted) ** 2).mean(axis=1)
    return math.sqrt(max(float(d @ sq), 0.0))


def j_trans(mdp, d_off, phi, models):
    """sqrt(1/2 E_{s~d_off, a~Unif}[KL(P(s,a) || P_Z(phi(s),a))]); inf on support violation."""
    d = _d(d_off)
    predicted = models.dynamics_at(_phi_arg(phi))
    if predicted.shape != mdp.transition.shape or d.shape != (mdp.n_states,):
        raise DimensionMismatch("dynamics model, d_off and MDP disagree in shape")
    support = d > 0
    divergences = kl_rows(mdp.transition[support], predicted[support]).mean(axis=1)
    if np.any(np.isinf(divergences)):
        return math.inf
    return math.sqrt(max(0.5 * float(d[support] @ divergences), 0.0))


def epsilon_rt(j_r, j_t, n_actions, gamma, r_max, reward_mode="full"):
    if reward_mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode {reward_mode!r}")
    trans = 2.0 * gamma * n_actions * r_max / (1.0 - gamma) ** 2 * j_t
    if reward_mode == "action-independent":
        return trans
    return n_actions / (1.0 - gamma) * j_r + trans


def best_latent_rewards(mdp, phi, d_off, n_latents=None):
    """Per-(z, a) d_off-weighted mean reward; zero for latents without mass."""
    ids = np.asarray(_phi_arg(phi), dtype=np.int64)
    n_latents = int(ids.max()) + 1 if n_latents is None else n_latents
    d = _d(d_off)
    mass = np.bincount(ids, weights=d, minlength=n_latents)
    totals = np.zeros((n_latents, mdp.n_actions))
    np.add.at(totals, ids, d[:, None] * mdp.reward)
    return np.where(mass[:, None] > 0, totals / np.where(mass > 0, mass, 1.0)[:, None], 0.0)


def best_latent_dynamics(mdp, phi, d_off, n_latents=None):
    """Per-(z, a) d_off-weighted mixture of next-state rows, the J_T minimizer.

    Latents without mass get uniform rows.
    """
    ids = np.asarray(_phi_arg(phi), dtype=np.int64)
    n_latents = int(ids.max()) + 1 if n_latents is None else n_latents
    d = _d(d_off)
    mass = np.bincount(ids, weights=d, minlength=n_latents)
    totals = np.zeros((n_latents, mdp.n_actions, mdp.n_states))
    np.add.at(totals, ids, d[:, None, None] * mdp.transition)
    uniform = np.full_like(totals, 1.0 / mdp.n_states)
    out = np.where(mass[:, None, None] > 0, totals / np.where(mass > 0, mass, 1.0)[:, None, None], uniform)
    return out / out.sum(axis=2, keepdims=True)


def best_latent_models(mdp, phi, d_off, n_latents=None):
    return LatentModels(
        "tabular",
        np.clip(best_latent_rewards(mdp, phi, d_off, n_latents), -mdp.r_max, mdp.r_max),
        best_latent_dynamics(mdp, phi, d_off, n_latents),
        mdp.r_max,
    )


def constant_reward_model(mdp, d_off, models):
    """Reward-agnostic R_Z: the constant E_{d_off, Unif}[R]; keeps J_R <= R_max."""
    if models.variant != "tabular":
        raise ValueError("the constant reward model is defined for tabular latent models")
    value = float(_d(d_off) @ mdp.reward.mean(axis=1))
    reward = np.full(models.reward_model.shape, value)
    return LatentModels("tabular", reward, models.dynamics_model, models.r_max)


def bisim_error(mdp, phi, d_off):
    """(reward aliasing, latent transition aliasing) of a tabular phi under d_off.

    Both are measured against the best d_off-weighted latent-space model,
    i.e. the smallest error any latent-space model could reach.
    """
    ids = np.asarray(_phi_arg(phi), dtype=np.int64)
    n_latents = int(ids.max()) + 1
    d = _d(d_off)
    weights = d[:, None] / mdp.n_actions

    mean_reward = best_latent_rewards(mdp, ids, d, n_latents)
    reward_aliasing = float(np.sum(weights * np.abs(mdp.reward - mean_reward[ids])))

    # phi#P(s, a)[z'] = sum over s' in z' of P(s'|s, a)
    pushforward = np.zeros((mdp.n_states, mdp.n_actions, n_latents))
    for s_next in range(mdp.n_states):
        pushforward[:, :, ids[s_next]] += mdp.transition[:, :, s_next]
    mass = np.bincount(ids, weights=d, minlength=n_latents)
    totals = np.zeros((n_latents, mdp.n_actions, n_latents))
    np.add.at(totals, ids, d[:, None, None] * pushforward)
    mean_push = totals / np.where(mass > 0, mass, 1.0)[:, None, None]
    tv = 0.5 * np.abs(pushforward - mean_push[ids]).sum(axis=2)
    return reward_aliasing, float(np.sum(weights * tv))


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------

def lemma1_bound(mdp, pi, target):
    """Vanilla BC: perf_diff <= R_max / (1-gamma)^2 * sqrt(2 E_{d*}[KL(pi*(s) || pi(s))])."""
    d_star = visitation(mdp, target).probs
    divergences = kl_rows(target.probs, pi.probs)
    support = d_star > 0
    expected = math.inf if np.any(np.isinf(divergences[support])) else float(d_star[support] @ divergences[support])
    rhs = mdp.r_max / (1.0 - mdp.gamma) ** 2 * math.sqrt(2.0 * max(expected, 0.0)) if math.isfinite(expected) else math.inf
    report = BoundReport("lemma1", perf_diff(mdp, pi, target), rhs, {"expected_kl": expected})
    if math.isinf(rhs):
        report.flags.append("support-violated: pi lacks an action the target takes")
    return report


def lemma2_errors(mdp, p1, p2):
    """(Err_{d^p1}(p1, p2, R), Err_{d^p1}(p1, p2, P)) by exact summation."""
    d1 = visitation(mdp, p1).probs
    delta = p1.probs - p2.probs
    err_r = abs(float(np.sum(d1[:, None] * mdp.reward * delta)))
    err_p = float(np.abs(np.einsum("s,sa,sat->t", d1, delta, mdp.transition)).sum())
    return err_r, err_p


def lemma2_bound(mdp, p1, p2, reward_mode="full"):
    """perf_diff(p1, p2) <= err_r / (1-gamma) + gamma R_max err_p / (1-gamma)^2."""
    err_r, err_p = lemma2_errors(mdp, p1, p2)
    g = mdp.gamma
    trans = g * mdp.r_max * err_p / (1.0 - g) ** 2
    rhs = trans if reward_mode == "action-independent" else err_r / (1.0 - g) + trans
    report = BoundReport(f"lemma2-{reward_mode}", perf_diff(mdp, p1, p2), rhs, {"err_r": err_r, "err_p": err_p})
    if reward_mode == "action-independent":
        report.flags.append("reward term dropped: action-independent rewards")
    return report


def _offline_terms(mdp, phi, models, target, d_off, reward_mode):
    d_star = visitation(mdp, target)
    chi = chi2(d_star, _d(d_off))
    j_r = j_reward(mdp, d_off, phi, models)
    j_t = j_trans(mdp, d_off, phi, models)
    eps = epsilon_rt(j_r, j_t, mdp.n_actions, mdp.gamma, mdp.r_max, reward_mode)
    offline = (1.0 + math.sqrt(chi)) * eps if math.isfinite(chi) and math.isfinite(eps) else math.inf
    terms = {"j_r": j_r, "j_t": j_t, "eps_rt": eps, "chi2": chi, "offline_term": offline}
    flags = []
    if math.isinf(chi):
        flags.append("support-violated: d_off misses states the target visits")
    if math.isinf(j_t):
        flags.append("support-violated: P_Z misses next states of P")
    if reward_mode == "action-independent":
        flags.append("reward term dropped: action-independent rewards")
    return d_star, offline, terms, flags


def thm1_bound(mdp, phi, models, pi_z, target, d_off, reward_mode="full"):
    """Tabular-latent bound: (1 + sqrt(chi2)) eps_RT + C sqrt(1/2 E_{d*_Z}[KL(pi*_Z || pi_Z)])."""
    rep = phi if isinstance(phi, Representation) else explicit_representation(phi, pi_z.latent_count)
    d_star, offline, terms, flags = _offline_terms(mdp, rep, models, target, d_off, reward_mode)
    d_z, pi_star_z = marginalize(mdp, rep.latent_ids, target, d_star, n_latents=pi_z.latent_count)
    weight = d_z.probs > 0
    divergences = kl_rows(pi_star_z.probs[weight], pi_z.probs[weight])
    expected_kl = math.inf if np.any(np.isinf(divergences)) else float(d_z.probs[weight] @ divergences)
    constant = 2.0 * mdp.r_max / (1.0 - mdp.gamma) ** 2
    bc_term = constant * math.sqrt(0.5 * max(expected_kl, 0.0)) if math.isfinite(expected_kl) else math.inf
    if math.isinf(bc_term):
        flags.append("support-violated: pi_Z gives zero probability to a target action")
    lhs = perf_diff(mdp, lift(pi_z, rep), target)
    terms.update({"bc_kl": expected_kl, "constant": constant, "bc_term": bc_term})
    return BoundReport(f"thm1-{reward_mode}", lhs, offline + bc_term, terms, flags)


def loglinear_gradient(policy, features, target, d_star=None, demos=None):
    """dJ_BC/dtheta under (d*, pi*) exactly, or under the demos' empirical distribution."""
    if demos is not None:
        weights = demo_weights(demos, features.shape[0], target.n_actions)
    else:
        weights = _d(d_star)[:, None] * target.probs
    _, grad, _ = bc_loss_and_grad(policy.theta, features, weights)
    return grad


def thm2_bound(mdp, phi, models, policy, target, d_off, demos=None, reward_mode="full"):
    """Linear-model bound: (1 + sqrt(chi2)) eps_RT + C ||dJ_BC/dtheta||_1.

    C uses max_{a,i} sum_s' |psi(s',a)_i|, the norm the transition step
    needs; the right-hand side with max |psi| entries is reported as
    rhs_stated.
    """
    if models.variant != "factored-linear":
        raise ValueError("thm2_bound needs factored-linear latent models")
    if not isinstance(policy, LogLinearPolicy):
        raise TypeError("thm2_bound needs a log-linear policy")
    if policy.feature_override is not None:
        features = policy.feature_override
    else:
        features = phi.features() if isinstance(phi, Representation) else np.asarray(phi, dtype=np.float64)
    d_star, offline, terms, flags = _offline_terms(mdp, features, models, target, d_off, reward_mode)
    grad = loglinear_gradient(policy, features, target, d_star=d_star, demos=demos)
    grad_l1 = float(np.abs(grad).sum())

    g = mdp.gamma
    r_norm = float(np.abs(models.reward_model).max())
    psi = models.dynamics_model
    psi_col_l1 = float(np.abs(psi).sum(axis=0).max())     # max_{a,i} sum_s' |psi(s',a)_i|
    psi_max = float(np.abs(psi).max())
    constant = r_norm / (1.0 - g) + g * mdp.r_max * psi_col_l1 / (1.0 - g) ** 2
    constant_stated = r_norm / (1.0 - g) + g * mdp.r_max * psi_max / (1.0 - g) ** 2

    if models.project or models.normalizer is not None:
        flags.append("dynamics normalized or projected: P_Z is not exactly linear in phi")
    raw_rewards = features @ models.reward_model
    if np.any(np.abs(raw_rewards) > mdp.r_max + 1e-12):
        flags.append("linear rewards exceed r_max and were clipped")

    lhs = perf_diff(mdp, TabularPolicy(policy.action_probs(features)), target)
    terms.update({
        "grad_l1": grad_l1,
        "r_norm": r_norm,
        "psi_col_l1": psi_col_l1,
        "psi_max": psi_max,
        "constant": constant,
        "constant_stated": constant_stated,
        "rhs_stated": offline + constant_stated * grad_l1,
        "gradient_source": "demos" if demos is not None else "exact",
    })
    return BoundReport(f"thm2-{reward_mode}", lhs, offline + constant * grad_l1, terms, flags)


def is_certified(report):
    """True when the report's inequality is a theorem instance, not a heuristic."""
    return not any(flag.startswith("dynamics normalized") or flag.startswith("linear rewards exceed")
                   for flag in report.flags)


# ---------------------------------------------------------------------------
# Monte Carlo sample-efficiency checks
# ---------------------------------------------------------------------------

@dataclass
class CurvePoint:
    n: int
    mean: float
    stderr: float
    bound: float

    @property
    def holds(self):
        return self.mean <= self.bound + MC_STDERRS * self.stderr


def _mean_stderr(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def thm3_experiment(env, phi, models, target, d_off, n_values, trials, seed, reward_mode="full"):
    """E[perf_diff(tabular BC on N demos, pi*)] against the sample-efficiency bound.

    Demos are N i.i.d. pairs s ~ d*, a ~ pi*(s). models=None uses the
    best d_off-weighted latent models for phi.

    The offline term uses chi2(d* || d_off) = sum_s d*(s)^2 / d_off(s) - 1,
    not chi2(d_off || d*); the latter is returned as terms["chi2_reverse"].
    """
    mdp = getattr(env, "mdp", env)
    rep = phi if isinstance(phi, Representation) else explicit_representation(phi)
    if not rep.is_tabular:
        raise ValueError("thm3_experiment needs a tabular representation")
    if models is None:
        models = best_latent_models(mdp, rep, d_off, rep.latent_dim)
    d_star, offline, terms, _ = _offline_terms(mdp, rep, models, target, d_off, reward_mode)
    reverse = chi2(_d(d_off), d_star)
    constant = 2.0 * mdp.r_max / (1.0 - mdp.gamma) ** 2
    logger.debug(f"thm3: eps_rt={terms['eps_rt']:.3g} chi2={terms['chi2']:.3g} reverse chi2={reverse:.3g}")

    curve = []
    state_cdf = np.cumsum(d_star.probs)
    for n in n_values:
        diffs = []
        for trial in range(trials):
            rng = numpy_rng(seed, "thm3", n, trial)
            states = np.minimum(np.searchsorted(state_cdf, rng.random(n), side="right"), mdp.n_states - 1)
            action_cdf = np.cumsum(target.probs[states], axis=1)
            actions = np.minimum((rng.random(n)[:, None] > action_cdf).sum(axis=1), mdp.n_actions - 1)
            pi_z = empirical_latent_policy(rep.latent_ids[states], actions, rep.latent_dim, mdp.n_actions)
            diffs.append(perf_diff(mdp, lift(pi_z, rep), target))
        mean, stderr = _mean_stderr(diffs)
        bound = offline + constant * math.sqrt(rep.latent_dim * mdp.n_actions / n)
        point = CurvePoint(n, mean, stderr, bound)
        logger.info(f"thm3: N={n} mean perf diff {mean:.4f} ± {stderr:.4f}, bound {bound:.4f}")
        curve.append(point)
    return curve, dict(terms, chi2_reverse=reverse)


def empirical_tv_check(k, n_values, trials, seed, rho=None):
    """E[TV(rho || empirical_n)] against 1/2 sqrt(k / n); rho ~ Dirichlet(1) per trial unless given."""
    if k < 2:
        raise ValueError("empirical_tv_check needs k >= 2")
    curve = []
    for n in n_values:
        values = []
        for trial in range(trials):
            rng = numpy_rng(seed, "empirical-tv", n, trial)
            p = rng.dirichlet(np.ones(k)) if rho is None else np.asarray(rho, dtype=np.float64)
            counts = rng.multinomial(n, p)
            values.append(0.5 * float(np.abs(p - counts / n).sum()))
        mean, stderr = _mean_stderr(values)
        curve.append(CurvePoint(n, mean, stderr, 0.5 * math.sqrt(k / n)))
    return curve


# ---------------------------------------------------------------------------
# property suites
# ---------------------------------------------------------------------------

@dataclass
class SuiteSummary:
    suite: str
    instances: int
    violations: int
    max_negative_slack: float

    def to_row(self):
        return [self.suite, self.instances, self.violations, f"{self.max_negative_slack:.17g}"]


def _instance_shape(rng):
    return int(rng.integers(2, 11)), int(rng.integers(2, 5))


def _action_independent(mdp, rng):
    per_state = rng.uniform(-mdp.r_max, mdp.r_max, size=(mdp.n_states, 1))
    reward = np.repeat(per_state, mdp.n_actions, axis=1)
    return TabularMdp(mdp.transition, reward, mdp.initial, mdp.gamma, mdp.r_max)


def _lemma1_instance(rng):
    n_states, n_actions = _instance_shape(rng)
    mdp = random_mdp(rng, n_states, n_actions)
    return lemma1_bound(mdp, random_policy(rng, n_states, n_actions), random_policy(rng, n_states, n_actions))


def _lemma2_instance(rng, reward_mode="full"):
    n_states, n_actions = _instance_shape(rng)
    mdp = random_mdp(rng, n_states, n_actions)
    if reward_mode == "action-independent":
        mdp = _action_independent(mdp, rng)
    return lemma2_bound(mdp, random_policy(rng, n_states, n_actions), random_policy(rng, n_states, n_actions), reward_mode)


def _thm1_instance(rng, reward_mode="full"):
    n_states, n_actions = _instance_shape(rng)
    mdp = random_mdp(rng, n_states, n_actions)
    if reward_mode == "action-independent":
        mdp = _action_independent(mdp, rng)
    n_latents = int(rng.integers(1, n_states + 1))
    phi = rng.integers(0, n_latents, size=n_states)
    models = LatentModels(
        "tabular",
        rng.uniform(-mdp.r_max, mdp.r_max, size=(n_latents, n_actions)),
        rng.dirichlet(np.ones(n_states), size=(n_latents, n_actions)),
        mdp.r_max,
    )
    pi_z = LatentTabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_latents))
    target = random_policy(rng, n_states, n_actions)
    d_off = rng.dirichlet(np.ones(n_states))
    return thm1_bound(mdp, explicit_representation(phi, n_latents), models, pi_z, target, d_off, reward_mode)


def random_linear_instance(rng):
    """A linear latent model embedded in a random MDP.

    phi(s) lies on the simplex of R^d, psi(., a)_i are distributions over s'
    and r(a) entries lie in [-R_max, R_max], so the linear P_Z rows are valid
    and |R_Z| <= R_max. The true MDP mixes the linear model with a random one.
    """
    n_states, n_actions = _instance_shape(rng)
    dim = int(rng.integers(1, 6))
    r_max = 1.0
    gamma = rng.uniform(0.1, 0.95)
    features = rng.dirichlet(np.ones(dim), size=n_states)                     # [S, d]
    psi = np.transpose(rng.dirichlet(np.ones(n_states), size=(n_actions, dim)), (2, 0, 1))   # [S', A, d]
    r = rng.uniform(-r_max, r_max, size=(dim, n_actions))
    models = LatentModels("factored-linear", r, psi, r_max)

    eta = rng.uniform()
    linear_p = models.dynamics_at(features)
    linear_r = models.rewards_at(features)
    other = random_mdp(rng, n_states, n_actions, gamma=gamma, r_max=r_max)
    transition = eta * linear_p + (1.0 - eta) * other.transition
    transition /= transition.sum(axis=2, keepdims=True)
    reward = eta * linear_r + (1.0 - eta) * other.reward
    mdp = TabularMdp(transition, reward, other.initial, gamma, r_max)

    policy = LogLinearPolicy(rng.normal(size=(dim, n_actions)))
    target = random_policy(rng, n_states, n_actions)
    d_off = rng.dirichlet(np.ones(n_states))
    return mdp, features, models, policy, target, d_off


def _thm2_instance(rng):
    mdp, features, models, policy, target, d_off = random_linear_instance(rng)
    return thm2_bound(mdp, features, models, policy, target, d_off)


_GENERATORS = {
    "lemma1": _lemma1_instance,
    "lemma2": _lemma2_instance,
    "lemma2-action-independent": lambda rng: _lemma2_instance(rng, "action-independent"),
    "thm1": _thm1_instance,
    "thm1-action-independent": lambda rng: _thm1_instance(rng, "action-independent"),
    "thm2": _thm2_instance,
}


def property_instance(suite, seed, index):
    if suite not in _GENERATORS:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    return _GENERATORS[suite](numpy_rng(seed, suite, index))


def run_property_suite(suite, instances=100, seed=0, jobs=1, reports=None):
    """Evaluate `instances` random instances of a bound; count violations."""
    if suite not in _GENERATORS:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda i: property_instance(suite, seed, i), range(instances)))
    violations = [r for r in results if not r.holds]
    worst = max([0.0] + [-r.slack for r in results if math.isfinite(r.slack)])
    if reports is not None:
        reports.extend(results)
    summary = SuiteSummary(suite, instances, len(violations), worst)
    log = logger.warning if violations else logger.info
    log(f"suite {suite}: {instances} instances, {len(violations)} violations, max negative slack {worst:.3g}")
    return summary
