"""Seeded training runs, evaluation, summary metrics and sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numkit as nk
from .agent import AgentConfig, make_agent
from .envs import ENV_REGISTRY, make_env
from .replay import ReplayBuffer

log = logging.getLogger("fql")

AGENT_KINDS = ("fql", "td3_lite")

METRIC_FIELDS = (
    "step", "seed", "mean_return", "std_return", "critic_loss", "actor_loss",
    "recon_target", "kl_salient", "kl_irrelevant", "tc", "recon_background", "kl_background",
    "cvae_total", "disc_loss", "wall_time",
)
_INT_FIELDS = ("step", "seed")

# Desk-scale network sizes and per-environment knobs. Widths are far below
# the usual 256/512 so that a 50k-step run fits in minutes on one core.
ENV_PRESETS: dict[str, dict] = {
    "PointMass2D": {"hidden": 64, "cvae_hidden": 64, "batch_size": 128, "beta": 2.0, "critic_lr": 1e-3},
    "Reacher2Link": {"hidden": 64, "cvae_hidden": 64, "batch_size": 128, "beta": 5.0, "critic_lr": 3e-4},
    "Incline2D": {"hidden": 64, "cvae_hidden": 64, "batch_size": 128, "beta": 0.0, "critic_lr": 1e-3},
}


@dataclass
class RunConfig:
    env_id: str = "PointMass2D"
    agent_kind: str = "fql"
    total_steps: int = 50_000
    start_steps: int = 1_000
    eval_every: int = 1_000
    eval_episodes: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    buffer_capacity: int = 1_000_000
    workers: int = 1
    env_params: dict = field(default_factory=dict)
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        if self.env_id not in ENV_REGISTRY:
            raise ValueError(f"unknown env_id {self.env_id!r}")
        if self.agent_kind not in AGENT_KINDS:
            raise ValueError(f"agent_kind must be one of {AGENT_KINDS}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be nonempty and distinct")
        if self.total_steps < 0 or self.start_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.eval_every < 1 or self.eval_episodes < 1 or self.workers < 1:
            raise ValueError("eval_every, eval_episodes and workers must be >= 1")

    @staticmethod
    def keys() -> set[str]:
        run = {f.name for f in fields(RunConfig)} - {"agent"}
        return run | AgentConfig.field_names()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Flat dict -> config. The env preset fills agent fields not given explicitly."""
        unknown = set(data) - cls.keys()
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        env_id = data.get("env_id", cls.env_id)
        merged = {**ENV_PRESETS.get(env_id, {}), **data}
        agent_keys = AgentConfig.field_names()
        agent = AgentConfig(**{k: v for k, v in merged.items() if k in agent_keys})
        run = {k: v for k, v in merged.items() if k not in agent_keys}
        if "seeds" in run:
            run["seeds"] = [int(s) for s in run["seeds"]]
        return cls(**run, agent=agent)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "agent"}
        out.update(self.agent.to_dict())
        out["seeds"] = list(out["seeds"])
        return out

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **overrides})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_override(text: str) -> tuple[str, object]:
    """'key=value' with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in RunConfig.keys():
        raise ValueError(f"unknown config key {key!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seeds: list[int] | None = None) -> RunConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    for item in overrides or []:
        key, value = parse_override(item)
        data[key] = value
    if seeds is not None:
        data["seeds"] = seeds
    return RunConfig.from_dict(data)


# -- evaluation ---------------------------------------------------------------
def eval_reset_seed(seed: int, episode: int) -> int:
    return 1_000_003 * (seed + 1) + episode


def run_episode(env, policy, reset_seed: int) -> float:
    s = env.reset(seed=reset_seed)
    total, done = 0.0, False
    while not done:
        s, r, done = env.step(policy(s))
        total += r
    return total


def evaluate_policy(agent, env, episodes: int, seed: int, step: int = 0) -> np.ndarray:
    """Deterministic-policy returns over ``episodes`` fixed-start episodes."""
    rng = np.random.default_rng([seed, step, 7])
    return np.array([run_episode(env, lambda s: agent.policy_action(s, rng), eval_reset_seed(seed, i))
                     for i in range(episodes)])


def random_policy_returns(env_id: str, episodes: int, seed: int, env_params: dict | None = None) -> np.ndarray:
    env = make_env(env_id, **(env_params or {}))
    rng = np.random.default_rng([seed, 11])
    return np.array([run_episode(env, lambda s: env.sample_action(rng), eval_reset_seed(seed, i))
                     for i in range(episodes)])


# -- metrics CSV ---------------------------------------------------------------
def write_metrics(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([str(int(row[k])) if k in _INT_FIELDS else repr(float(row[k])) for k in METRIC_FIELDS])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header")
        rows = []
        for line in reader:
            if len(line) != len(METRIC_FIELDS):
                raise ValueError(f"{path}: ragged metrics row")
            rows.append({k: int(v) if k in _INT_FIELDS else float(v) for k, v in zip(METRIC_FIELDS, line)})
    return rows


# -- training -----------------------------------------------------------------
def _metrics_row(step, seed, returns, train_row, wall_time) -> dict:
    nan = float("nan")
    row = {k: nan for k in METRIC_FIELDS}
    row.update(step=step, seed=seed, mean_return=float(returns.mean()), std_return=float(returns.std()),
               wall_time=wall_time)
    for k, v in (train_row or {}).items():
        key = "cvae_total" if k == "total" else k
        if key in row:
            row[key] = float(v)
    return row


def train_seed(config: RunConfig, seed: int, run_dir: str | Path | None = None) -> list[dict]:
    """One seeded run: interact, update, evaluate every ``eval_every`` steps.

    Writes metrics_seed<k>.csv and checkpoint_seed<k>.bin when ``run_dir`` is given.
    """
    nk.tune_allocator()
    rng = np.random.default_rng(seed)
    env = make_env(config.env_id, **config.env_params)
    eval_env = make_env(config.env_id, **config.env_params)
    spec = env.spec
    agent = make_agent(config.agent_kind, spec.state_dim, spec.action_dim, spec.action_low, spec.action_high,
                       config.agent, np.random.default_rng([seed, 1]))
    buffer = ReplayBuffer(spec.state_dim, spec.action_dim, spec.action_low, spec.action_high,
                          config.buffer_capacity)
    rows: list[dict] = []
    train_row = None
    t0 = time.perf_counter()
    s = env.reset(seed=seed)
    for step in range(1, config.total_steps + 1):
        if step <= config.start_steps:
            a = env.sample_action(rng)
        else:
            a = agent.select_exploration_action(s, rng)
        s2, r, done = env.step(a)
        buffer.push(s, a, r, s2, env.terminated)
        s = env.reset() if done else s2
        if step > config.start_steps and len(buffer) >= config.agent.batch_size:
            train_row = agent.train_step(buffer, rng, step)
        if step % config.eval_every == 0:
            returns = evaluate_policy(agent, eval_env, config.eval_episodes, seed, step)
            rows.append(_metrics_row(step, seed, returns, train_row, time.perf_counter() - t0))
            log.info("seed %d step %d return %.3f", seed, step, rows[-1]["mean_return"])
    if run_dir is not None:
        run_dir = Path(run_dir)
        write_metrics(run_dir / f"metrics_seed{seed}.csv", rows)
        arrays = dict(agent.named_arrays())
        arrays["buffer/actions"] = buffer.filled_actions().copy()
        arrays["meta/step"] = np.array([config.total_steps], dtype=float)
        nk.save_checkpoint(run_dir / f"checkpoint_seed{seed}.bin", arrays)
    return rows


def _train_seed_job(args):
    config_dict, seed, run_dir = args
    return train_seed(RunConfig.from_dict(config_dict), seed, run_dir)


def train(config: RunConfig, out_dir: str | Path) -> Path:
    """Run every seed and write config.json, per-seed metrics/checkpoints and summary.json."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "plots").mkdir(exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (run_dir / "config_hash.txt").write_text(config.config_hash() + "\n")
    jobs = [(config.to_dict(), seed, str(run_dir)) for seed in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            per_seed = list(pool.map(_train_seed_job, jobs))
    else:
        per_seed = [train_seed(config, seed, run_dir) for seed in config.seeds]
    write_summary(run_dir, config, per_seed)
    return run_dir


def write_summary(run_dir: Path, config: RunConfig, per_seed: list[list[dict]]) -> dict:
    summary = {"config_hash": config.config_hash(), "seeds": list(config.seeds)}
    if per_seed and all(per_seed):
        curves = [[r["mean_return"] for r in rows] for rows in per_seed]
        grids = [[r["step"] for r in rows] for rows in per_seed]
        summary.update(compute_summary(curves, grids))
        summary["steps"] = grids[0]
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def load_run(run_dir: str | Path) -> tuple[RunConfig, dict[int, list[dict]]]:
    run_dir = Path(run_dir)
    config = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    per_seed = {}
    for seed in config.seeds:
        path = run_dir / f"metrics_seed{seed}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing metrics file {path}")
        per_seed[seed] = read_metrics(path)
    return config, per_seed


def evaluate_run(run_dir: str | Path, episodes: int | None = None) -> dict:
    """Reload each seed's final checkpoint and evaluate the deterministic policy."""
    run_dir = Path(run_dir)
    config, _ = load_run(run_dir)
    episodes = episodes or config.eval_episodes
    env = make_env(config.env_id, **config.env_params)
    spec = env.spec
    out = {}
    for seed in config.seeds:
        agent = make_agent(config.agent_kind, spec.state_dim, spec.action_dim, spec.action_low,
                           spec.action_high, config.agent, np.random.default_rng([seed, 1]))
        agent.load_arrays(nk.load_checkpoint(run_dir / f"checkpoint_seed{seed}.bin"))
        returns = evaluate_policy(agent, env, episodes, seed, config.total_steps)
        out[str(seed)] = {"mean_return": float(returns.mean()), "std_return": float(returns.std())}
    return out


# -- summary metrics -------------------------------------------------------------
def compute_summary(curves, steps=None) -> dict:
    """Step, Seed and Final metrics over aligned per-seed evaluation curves.

    Step: max over evaluation points of the cross-seed mean.
    Seed: mean over seeds of each seed's maximum.
    Final: cross-seed mean at the last evaluation point.
    Each comes with the cross-seed standard deviation (ddof=0) of the values it averages.
    """
    lengths = {len(c) for c in curves}
    if not curves or len(lengths) != 1 or 0 in lengths:
        raise ValueError("curves must be nonempty and of equal length")
    if steps is not None and any(list(s) != list(steps[0]) for s in steps):
        raise ValueError("evaluation grids are misaligned across seeds")
    arr = np.asarray(curves, dtype=float)
    mean = arr.mean(axis=0)
    best = int(np.argmax(mean))
    maxima = arr.max(axis=1)
    return {
        "step_metric": float(mean[best]), "step_std": float(arr[:, best].std()),
        "seed_metric": float(maxima.mean()), "seed_std": float(maxima.std()),
        "final_metric": float(mean[-1]), "final_std": float(arr[:, -1].std()),
    }


# -- sweeps ---------------------------------------------------------------------
ABLATION_KEYS = ("beta", "hetero_mode")
REPORT_FIELDS = ("variant", "seed", "final_return", "max_return")


def variant_name(key: str, value) -> str:
    return f"{key}={value}"


def ablate(config: RunConfig, key: str, values: list, out_dir: str | Path) -> Path:
    """Train one run per swept value and write a joint comparison report."""
    if key not in ABLATION_KEYS:
        raise ValueError(f"ablation key must be one of {ABLATION_KEYS}")
    if not values:
        raise ValueError("empty sweep")
    if len(set(map(str, values))) != len(values):
        raise ValueError("sweep values must be distinct")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, summaries = [], {}
    for value in values:
        name = variant_name(key, value)
        run_dir = train(config.with_overrides({key: value}), out_dir / name.replace("=", "_"))
        _, per_seed = load_run(run_dir)
        summaries[name] = json.loads((run_dir / "summary.json").read_text())
        for seed, metrics in per_seed.items():
            returns = [r["mean_return"] for r in metrics]
            rows.append({"variant": name, "seed": seed,
                         "final_return": returns[-1] if returns else math.nan,
                         "max_return": max(returns) if returns else math.nan})
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    (out_dir / "report.json").write_text(json.dumps({"key": key, "values": list(values), "summaries": summaries},
                                                    indent=2, sort_keys=True))
    return out_dir


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
