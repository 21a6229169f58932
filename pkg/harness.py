# harness.py
#
# Experiment orchestration behind the repr_imitation CLI:
#   ExperimentConfig  - pydantic config (env / data / repr / bc / eval sections)
#   run_experiment    - replications of env -> data -> representation -> BC -> exact eval
#   sweep             - one axis (N, M, S, Z) x method presets x replications
#   emit_figure_data  - aggregated CSVs (and optional PNGs) for fig1, fig2, bounds
#
# Every replication derives its own seed from the master seed, and every
# stage below it derives a per-purpose stream from that, so a single row
# can be rebuilt from its (config_hash, seed) pair.
#
#----------------------------------------------------------------------

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import scipy
import torch
from pydantic import BaseModel, Field, ValidationError, model_validator

import bounds
import fourier_features
import mdp_core
import optim
import repr_learn
from behavior_cloning import BcConfig, bc_loglinear, bc_mlp, bc_tabular, lift, write_bc_log
from env_gen import (
    TreeEnv,
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
from mdp_core import LatentTabularPolicy, LogLinearPolicy, TabularPolicy, perf_diff, performance
from repr_learn import (
    LatentModels,
    TrainConfig,
    extract_energy_models,
    extract_linear_dynamics,
    identity_representation,
    svd_features,
    train_energy,
    train_fourier,
    write_training_log,
)
from seeding import derive_seed

logger = logging.getLogger(__name__)

# method preset -> (representation, bc)
METHODS = {
    "vanilla": ("none", "tabular"),
    "fourier": ("fourier", "loglinear"),
    "energy": ("energy", "mlp"),
    "svd": ("svd", "loglinear"),
    "fourier-mlp": ("fourier", "mlp"),
    "onehot": ("none", "loglinear"),
}
SWEEP_AXES = ("N", "M", "S", "Z")
FIGURES = ("fig1", "fig2", "bounds")

RESULT_COLUMNS = (
    "config_hash", "seed", "replication", "method", "env", "n_states", "n_latent", "N", "M",
    "mean_reward", "target_reward", "perf_diff",
    "bound", "bound_lhs", "bound_rhs", "bound_slack", "certified",
)
FIG2_KEYS = ("method", "N", "M", "n_states", "n_latent")

EVALUATION_NOTE = "mean per-step reward over one 3-step episode, computed exactly (no rollouts)"
FIGURE_NOTE = "raw mean per-step reward with the target-policy reference; no axis normalization"


class ConfigError(ValueError):
    """Invalid experiment configuration; `path` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class EnvSection(BaseModel):
    kind: Literal["tree", "counterexample"] = "tree"
    duplication: int = Field(10, ge=1)
    intended_child_prob: float = Field(0.8, gt=0, le=1)
    dirichlet_alpha: float = Field(1.0, gt=0)
    reward_power: int = Field(3, ge=1)
    reward_noise_std: float = Field(1.0, ge=0)
    gamma: float = Field(0.95, ge=0, lt=1)


class DataSection(BaseModel):
    N: int = Field(15, ge=1)
    M: int = Field(1500, ge=1)


class ReprSection(BaseModel):
    method: Literal["none", "fourier", "energy", "svd"] = "fourier"
    k: int = Field(16, ge=1)
    d: int = Field(1024, ge=1)
    train: TrainConfig = Field(default_factory=TrainConfig)


class BcSection(BaseModel):
    method: Literal["tabular", "loglinear", "mlp"] = "loglinear"
    train: BcConfig = Field(default_factory=BcConfig)


class EvalSection(BaseModel):
    bounds: bool = True
    reward_mode: Literal["full", "action-independent"] = "full"


class ExperimentConfig(BaseModel):
    name: str = "default"
    seed: int = Field(0, ge=0)
    replications: int = Field(5, ge=0)
    env: EnvSection = Field(default_factory=EnvSection)
    data: DataSection = Field(default_factory=DataSection)
    repr: ReprSection = Field(default_factory=ReprSection)
    bc: BcSection = Field(default_factory=BcSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @model_validator(mode="after")
    def _check_pipeline(self):
        if self.bc.method == "tabular" and self.repr.method != "none":
            raise ValueError(
                f"bc.method 'tabular' needs repr.method 'none', got {self.repr.method!r} "
                "(learned representations pair with loglinear or mlp)"
            )
        return self

    @property
    def method(self):
        return method_name(self.repr.method, self.bc.method)

    def hash(self):
        text = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def method_name(repr_method, bc_method):
    for name, pair in METHODS.items():
        if pair == (repr_method, bc_method):
            return name
    return f"{repr_method}+{bc_method}"


def error_path(err):
    first = err.errors()[0]
    return ".".join(str(part) for part in first["loc"]), first["msg"]


def validate_config(doc):
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        path, msg = error_path(e)
        raise ConfigError(msg, path) from e


def load_config(path):
    """Read a JSON config; the literal 'defaults' gives the shipped defaults."""
    if path in (None, "defaults"):
        return ExperimentConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return validate_config(doc)


def with_method(cfg, preset):
    if preset not in METHODS:
        raise ConfigError(f"unknown method {preset!r}; choose from {', '.join(METHODS)}", "method")
    repr_method, bc_method = METHODS[preset]
    doc = cfg.model_dump()
    doc["repr"]["method"] = repr_method
    doc["bc"]["method"] = bc_method
    return validate_config(doc)


def with_axis(cfg, axis, value):
    """A copy of cfg with one sweep axis set to value."""
    doc = cfg.model_dump()
    if axis == "N":
        doc["data"]["N"] = int(value)
    elif axis == "M":
        doc["data"]["M"] = int(value)
    elif axis == "S":
        if cfg.env.kind != "tree":
            raise ConfigError("the S axis needs a tree environment", "env.kind")
        if int(value) % 8:
            raise ConfigError(f"|S| must be a multiple of 8, got {value}", "env.duplication")
        doc["env"]["duplication"] = int(value) // 8
    elif axis == "Z":
        if cfg.repr.method == "fourier":
            doc["repr"]["d"] = int(value)
        else:
            doc["repr"]["k"] = int(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}", "axis")
    return validate_config(doc)


def replication_seed(cfg, index):
    return derive_seed(cfg.seed, "replication", index)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    """The environment a replication runs on, plus its target and d_off."""

    env: object           # TreeEnv or bare TabularMdp
    mdp: mdp_core.TabularMdp
    target: TabularPolicy
    d_off: mdp_core.StateDistribution

    def per_step_reward(self, policy):
        if isinstance(self.env, TreeEnv):
            return mean_step_reward(self.env, policy)
        return (1.0 - self.mdp.gamma) * performance(self.mdp, policy)


def build_problem(cfg, seed):
    if cfg.env.kind == "counterexample":
        mdp, _, target = make_counterexample(cfg.env.gamma)
        return Problem(mdp, mdp, target, offline_distribution(mdp))
    spec = TreeEnvSpec(**cfg.env.model_dump(exclude={"kind"}), seed=derive_seed(seed, "env"))
    env = make_tree_env(spec)
    return Problem(env, env.mdp, optimal_policy(env.mdp), offline_distribution(env))


def sample_data(cfg, problem, seed):
    """(offline, demos); offline is None when no representation is learned."""
    offline = None
    if cfg.repr.method != "none":
        offline = sample_offline(problem.env, cfg.data.M, derive_seed(seed, "offline"))
    demos = sample_demos(problem.env, problem.target, cfg.data.N, derive_seed(seed, "demos"))
    return offline, demos


def train_representation(cfg, problem, offline, seed, progress=False):
    section = cfg.repr
    if section.method == "none":
        return identity_representation(problem.mdp.n_states)
    train_cfg = section.train.model_copy(update={"seed": derive_seed(seed, "repr"), "gamma": problem.mdp.gamma})
    if section.method == "energy":
        return train_energy(offline, train_cfg, section.k, progress=progress)
    if section.method == "fourier":
        return train_fourier(offline, train_cfg, section.k, section.d, progress=progress)
    return svd_features(offline, problem.mdp.n_states, problem.mdp.n_actions, section.k)


def train_policy(cfg, demos, rep, seed, history=None, progress=False):
    bc_cfg = cfg.bc.train.model_copy(update={"seed": derive_seed(seed, "bc")})
    if cfg.bc.method == "tabular":
        return bc_tabular(demos, rep)
    if cfg.bc.method == "loglinear":
        return bc_loglinear(demos, rep, bc_cfg, history=history, progress=progress)
    return bc_mlp(demos, rep, bc_cfg, history=history, progress=progress)


def exact_linear_models(mdp):
    """One-hot features make (R, P) an exact factored-linear model."""
    return LatentModels("factored-linear", mdp.reward, np.transpose(mdp.transition, (2, 1, 0)), mdp.r_max)


def _latent_policy_from(lifted, latent_ids, n_latents):
    """Read pi_Z off a lifted policy that is constant on each latent cell."""
    probs = np.full((n_latents, lifted.n_actions), 1.0 / lifted.n_actions)
    firsts = {}
    for state, z in enumerate(latent_ids):
        firsts.setdefault(int(z), state)
    for z, state in firsts.items():
        probs[z] = lifted.probs[state]
    return LatentTabularPolicy(probs)


def bound_report(cfg, problem, rep, policy, offline):
    """The bound that matches the pipeline, or None when none applies."""
    mdp, target, d_off = problem.mdp, problem.target, problem.d_off
    mode = cfg.eval.reward_mode
    if isinstance(policy, LatentTabularPolicy):
        models = bounds.best_latent_models(mdp, rep, d_off, rep.latent_dim)
        return bounds.thm1_bound(mdp, rep, models, policy, target, d_off, mode)
    if cfg.repr.method == "energy" and policy.feature_override is None:
        latent_rep, models = extract_energy_models(rep, mdp.r_max)
        pi_z = _latent_policy_from(lift(policy, rep), latent_rep.latent_ids, latent_rep.latent_dim)
        return bounds.thm1_bound(mdp, latent_rep, models, pi_z, target, d_off, mode)
    if isinstance(policy, LogLinearPolicy) and policy.feature_override is None:
        if cfg.repr.method == "fourier":
            models = extract_linear_dynamics(rep, offline, mdp.r_max)
            return bounds.thm2_bound(mdp, rep, models, policy, target, d_off, reward_mode=mode)
        if cfg.repr.method == "none":
            return bounds.thm2_bound(mdp, rep, exact_linear_models(mdp), policy, target, d_off, reward_mode=mode)
    return None


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class ResultRow:
    config_hash: str
    seed: int
    replication: int
    method: str
    env: str
    n_states: int
    n_latent: int
    N: int
    M: int
    mean_reward: float
    target_reward: float
    perf_diff: float
    bound: str = ""
    bound_lhs: Optional[float] = None
    bound_rhs: Optional[float] = None
    bound_slack: Optional[float] = None
    certified: Optional[bool] = None
    wall_time: float = field(default=0.0, compare=False)

    def sort_key(self):
        return (self.config_hash, self.seed, self.method)

    def to_row(self):
        return [_cell(getattr(self, name)) for name in RESULT_COLUMNS]


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.17g}"
    return str(value)


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in sorted(rows, key=ResultRow.sort_key):
            writer.writerow(row.to_row())


def write_timings(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_hash", "seed", "method", "wall_time"])
        for row in sorted(rows, key=ResultRow.sort_key):
            writer.writerow([row.config_hash, row.seed, row.method, f"{row.wall_time:.3f}"])


def read_results(path, required=RESULT_COLUMNS):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [name for name in required if name not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(missing)}")
        return list(reader)


def run_replication(cfg, index, out=None, assert_bounds=False, progress=False):
    """One replication end to end; returns a ResultRow."""
    start = time.perf_counter()
    seed = replication_seed(cfg, index)
    problem = build_problem(cfg, seed)
    offline, demos = sample_data(cfg, problem, seed)
    rep = train_representation(cfg, problem, offline, seed, progress=progress)
    policy = train_policy(cfg, demos, rep, seed, progress=progress)
    lifted = lift(policy, rep)

    row = ResultRow(
        config_hash=cfg.hash(),
        seed=seed,
        replication=index,
        method=cfg.method,
        env=cfg.env.kind,
        n_states=problem.mdp.n_states,
        n_latent=rep.latent_dim,
        N=cfg.data.N,
        M=cfg.data.M,
        mean_reward=problem.per_step_reward(lifted),
        target_reward=problem.per_step_reward(problem.target),
        perf_diff=perf_diff(problem.mdp, lifted, problem.target),
    )
    if cfg.eval.bounds:
        report = bound_report(cfg, problem, rep, policy, offline)
        if report is not None:
            row.bound = report.name
            row.bound_lhs = report.lhs
            row.bound_rhs = report.rhs
            row.bound_slack = report.slack
            row.certified = bounds.is_certified(report)
            if out is not None:
                report_dir = os.path.join(out, "bound_reports")
                os.makedirs(report_dir, exist_ok=True)
                with open(os.path.join(report_dir, f"{row.config_hash}-{seed}-{row.method}.json"), "w") as fh:
                    fh.write(report.to_json())
            if assert_bounds and row.certified:
                bounds.assert_holds(report)
    row.wall_time = time.perf_counter() - start
    return row


def _run_cells(cells, out, jobs, assert_bounds, log):
    """Run (cfg, replication) cells concurrently; rows come back in canonical order."""

    def run(cell):
        cfg, index = cell
        row = run_replication(cfg, index, out=out, assert_bounds=assert_bounds)
        log(f"{row.method} rep {index}: mean reward {row.mean_reward:.4f}, perf diff {row.perf_diff:.4f}")
        return row

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        rows = list(pool.map(run, cells))
    return sorted(rows, key=ResultRow.sort_key)


def _finish(rows, cfg, out, extra=None):
    if out is None:
        return
    os.makedirs(out, exist_ok=True)
    write_results(os.path.join(out, "results.csv"), rows)
    write_timings(os.path.join(out, "timings.csv"), rows)
    write_metadata(os.path.join(out, "run_metadata.json"), cfg, extra)


def run_experiment(cfg, out=None, jobs=1, log_callback=None, assert_bounds=False):
    """All replications of one config. Writes results.csv etc. under out when given."""
    def log(message):
        if log_callback:
            log_callback(message)
        logger.info(message)

    log(f"experiment {cfg.name} ({cfg.method}, hash {cfg.hash()}): {cfg.replications} replications")
    rows = _run_cells([(cfg, i) for i in range(cfg.replications)], out, jobs, assert_bounds, log)
    _finish(rows, cfg, out)
    if rows:
        rewards = [row.mean_reward for row in rows]
        log(f"mean per-step reward {np.mean(rewards):.4f} over {len(rows)} replications")
    return rows


def sweep(cfg, axis, values, methods=("vanilla", "fourier", "svd"), out=None, jobs=1,
          log_callback=None, assert_bounds=False):
    """values x methods x replications, one long-format results.csv."""
    def log(message):
        if log_callback:
            log_callback(message)
        logger.info(message)

    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}", "axis")
    presets = [with_method(cfg, m) for m in methods]
    if axis == "Z" and all(p.repr.method == "none" for p in presets):
        raise ConfigError("the Z axis needs at least one method with a learned representation", "axis")
    cells = []
    for value in values:
        for preset in presets:
            cell_cfg = with_axis(preset, axis, value)
            cells.extend((cell_cfg, i) for i in range(cell_cfg.replications))
    log(f"sweep over {axis} = {list(values)} x {list(methods)}: {len(cells)} runs")
    rows = _run_cells(cells, out, jobs, assert_bounds, log)
    _finish(rows, cfg, out, {"sweep": {"axis": axis, "values": list(values), "methods": list(methods)}})
    return rows


def write_metadata(path, cfg, extra=None):
    """Config, hash, and every design constant the numbers depend on."""
    doc = {
        "config": cfg.model_dump(mode="json"),
        "config_hash": cfg.hash(),
        "constants": {
            "construct_tol": mdp_core.CONSTRUCT_TOL,
            "result_tol": mdp_core.RESULT_TOL,
            "slack_tol": bounds.SLACK_TOL,
            "mc_stderrs": bounds.MC_STDERRS,
            "stats_decay": fourier_features.STATS_DECAY,
            "norm_eps": fourier_features.NORM_EPS,
            "projection_eps": repr_learn.PROJECTION_EPS,
            "adam_beta1": optim.ADAM_BETA1,
            "adam_beta2": optim.ADAM_BETA2,
            "adam_eps": optim.ADAM_EPS,
            "fd_step": optim.FD_STEP,
        },
        "evaluation": EVALUATION_NOTE,
        "figure_normalization": FIGURE_NOTE,
        "versions": {"numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__},
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------

def _mean_stderr(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def _fig2(rows, out_dir, render):
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in FIG2_KEYS), []).append(row)
    path = os.path.join(out_dir, "fig2.csv")
    table = []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(FIG2_KEYS) + ["count", "mean_reward", "stderr", "target_reward"])
        for key in sorted(groups, key=lambda k: (k[0],) + tuple(int(v) for v in k[1:])):
            members = groups[key]
            mean, stderr = _mean_stderr([float(r["mean_reward"]) for r in members])
            target = float(np.mean([float(r["target_reward"]) for r in members]))
            writer.writerow(list(key) + [len(members), f"{mean:.17g}", f"{stderr:.17g}", f"{target:.17g}"])
            table.append((key, mean, stderr, target))
    if render and table:
        _render_fig2(table, os.path.join(out_dir, "fig2.png"))
    return path


def _render_fig2(table, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # x axis: the first key column that actually varies
    varying = [i for i in range(1, len(FIG2_KEYS)) if len({key[i] for key, *_ in table}) > 1]
    axis = varying[0] if varying else 1
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted({key[0] for key, *_ in table}):
        points = sorted((int(key[axis]), mean, stderr) for key, mean, stderr, _ in table if key[0] == method)
        xs, ys, errs = zip(*points)
        ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label=method)
    target = float(np.mean([t for *_, t in table]))
    ax.axhline(target, color="black", linestyle=":", label="target policy")
    ax.set_xlabel(FIG2_KEYS[axis])
    ax.set_ylabel("mean per-step reward")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _bounds_figure(rows, out_dir, render):
    path = os.path.join(out_dir, "bounds.csv")
    kept = [r for r in rows if r["bound"]]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_hash", "seed", "method", "bound", "lhs", "rhs", "slack", "certified"])
        for r in kept:
            writer.writerow([r["config_hash"], r["seed"], r["method"], r["bound"],
                             r["bound_lhs"], r["bound_rhs"], r["bound_slack"], r["certified"]])
    if render and kept:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        finite = [r for r in kept if math.isfinite(float(r["bound_rhs"]))]
        lhs = [float(r["bound_lhs"]) for r in finite]
        rhs = [float(r["bound_rhs"]) for r in finite]
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(rhs, lhs, s=12)
        top = max(lhs + rhs + [1e-12])
        ax.plot([0, top], [0, top], color="black", linestyle=":")
        ax.set_xlabel("bound")
        ax.set_ylabel("perf diff")
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "bounds.png"), dpi=150)
        plt.close(fig)
    return path


def _fig1(out_dir):
    mdp, phi, target = make_counterexample()
    report = verify_counterexample(mdp, phi, target)
    doc = report.to_dict()
    with open(os.path.join(out_dir, "fig1.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    path = os.path.join(out_dir, "fig1.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "value"])
        for name, value in doc.items():
            if name != "d_star":
                writer.writerow([name, _cell(value)])
    return path


def emit_figure_data(results_path, figure, out_dir, render=False):
    """Aggregate results.csv into figures/<figure>.csv; fig1 needs no results."""
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
    os.makedirs(out_dir, exist_ok=True)
    if figure == "fig1":
        return _fig1(out_dir)
    required = FIG2_KEYS + ("mean_reward", "target_reward") if figure == "fig2" else \
        ("config_hash", "seed", "method", "bound", "bound_lhs", "bound_rhs", "bound_slack", "certified")
    rows = read_results(results_path, required)
    if figure == "fig2":
        return _fig2(rows, out_dir, render)
    return _bounds_figure(rows, out_dir, render)


# ---------------------------------------------------------------------------
# artifacts for the single-stage subcommands
# ---------------------------------------------------------------------------

def save_problem(problem, out):
    os.makedirs(out, exist_ok=True)
    doc = {"mdp": problem.mdp.to_dict(), "target": problem.target.to_dict(),
           "d_off": problem.d_off.probs.tolist(), "fingerprint": problem.mdp.fingerprint()}
    if isinstance(problem.env, TreeEnv):
        doc["canonical_map"] = problem.env.canonical_map.tolist()
        doc["spec"] = problem.env.spec.model_dump()
    path = os.path.join(out, "env.json")
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def save_datasets(offline, demos, out):
    os.makedirs(out, exist_ok=True)
    paths = []
    for name, data in (("offline.csv", offline), ("demos.csv", demos)):
        if data is not None:
            data.save(os.path.join(out, name))
            paths.append(os.path.join(out, name))
    return paths


def save_representation(rep, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "representation.json"), "w") as fh:
        fh.write(rep.to_json())
    if rep.model is not None:
        write_training_log(os.path.join(out, "training_log.csv"), rep.model.history)


def save_policy(policy, history, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "policy.json"), "w") as fh:
        json.dump(policy.to_dict(), fh)
    if history:
        write_bc_log(os.path.join(out, "bc_log.csv"), history)


def bound_suites(suites, instances, seed, jobs=1, out=None):
    """Run property suites; summaries to bound_suites.csv, violating reports to JSON."""
    summaries = []
    for suite in suites:
        reports = []
        summaries.append(bounds.run_property_suite(suite, instances, seed, jobs=jobs, reports=reports))
        if out is not None:
            report_dir = os.path.join(out, "bound_reports")
            for index, report in enumerate(reports):
                if not report.holds:
                    os.makedirs(report_dir, exist_ok=True)
                    with open(os.path.join(report_dir, f"{suite}-{index}.json"), "w") as fh:
                        fh.write(report.to_json())
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "bound_suites.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["suite", "instances", "violations", "max_negative_slack"])
            for summary in summaries:
                writer.writerow(summary.to_row())
    return summaries


def monte_carlo_checks(cfg, trials=200, n_values=(6, 15, 30, 150), seed=0, out=None):
    """Sample-efficiency curve on the tree with the ground-truth map, plus the TV check."""
    spec = TreeEnvSpec(**cfg.env.model_dump(exclude={"kind"}), seed=derive_seed(seed, "env"))
    env = make_tree_env(spec)
    target = optimal_policy(env.mdp)
    curve, terms = bounds.thm3_experiment(
        env, canonical_representation(env), canonical_models(env), target,
        offline_distribution(env), list(n_values), trials, seed, cfg.eval.reward_mode,
    )
    tv_curve = bounds.empirical_tv_check(10, [10, 100, 1000], 1000, seed)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "monte_carlo.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["check", "n", "mean", "stderr", "bound", "holds"])
            for name, points in (("thm3", curve), ("empirical-tv", tv_curve)):
                for p in points:
                    writer.writerow([name, p.n, f"{p.mean:.17g}", f"{p.stderr:.17g}", _cell(p.bound), _cell(p.holds)])
        with open(os.path.join(out, "monte_carlo_terms.json"), "w") as fh:
            json.dump({k: _cell(v) if isinstance(v, float) else v for k, v in terms.items()}, fh, indent=2)
    return curve, tv_curve, terms
