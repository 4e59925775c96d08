"""Randomised sweeps of the tabular laboratory, written as CSV + JSON."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import frictionlab as fl
from .envs import make_random_mdp

ERROR_FIELDS = ("instance", "state", "action", "e_theta", "e_rho", "angle")


@dataclass
class AnalyzeConfig:
    instances: int = 100
    max_states: int = 8
    max_actions: int = 4
    gamma: float = 0.9
    seed: int = 0
    deterministic: bool = False
    buffer: str = "trajectories"  # or "full"
    episodes: int = 10
    horizon: int = 10

    def __post_init__(self):
        if self.instances < 1:
            raise ValueError("instances must be >= 1")
        if self.max_states < 2 or self.max_actions < 2:
            raise ValueError("need at least 2 states and 2 actions")
        if self.buffer not in ("trajectories", "full"):
            raise ValueError("buffer must be 'trajectories' or 'full'")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "AnalyzeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown analyze keys: {sorted(unknown)}")
        return cls(**data)


def make_instance(config: AnalyzeConfig, index: int):
    """MDP, buffer and evaluation policy for one instance, fixed by (seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    S = int(rng.integers(2, config.max_states + 1))
    A = int(rng.integers(2, config.max_actions + 1))
    mdp_seed = int(rng.integers(2**31))
    if config.deterministic:
        mdp = fl.make_deterministic_mdp(S, A, mdp_seed, config.gamma)
    else:
        mdp = make_random_mdp(S, A, int(rng.integers(1, S + 1)), mdp_seed, config.gamma)
    if config.buffer == "full":
        buf = fl.full_coverage_buffer(mdp, 1 if config.deterministic else config.episodes, rng)
    else:
        buf = fl.trajectory_buffer(mdp, fl.random_policy(S, A, rng), config.episodes, config.horizon, rng)
    return mdp, buf, fl.random_policy(S, A, rng)


def analyze(config: AnalyzeConfig, out_dir: str | Path | None = None) -> dict:
    """Errors, angles and bound checks on every instance; returns the JSON report."""
    error_rows, bound_rows = [], []
    for i in range(config.instances):
        mdp, buf, pol = make_instance(config, i)
        induced = fl.build_induced_mdp(mdp, buf)
        hetero = fl.heterogeneous_buffer(buf)
        e_theta = fl.extrapolation_error_theta(mdp, induced, pol)
        e_rho = fl.extrapolation_error_rho(mdp, hetero, pol)
        recursion_gap = max(
            float(np.max(np.abs(e_theta - fl.extrapolation_error_theta(mdp, induced, pol, "recursion")))),
            float(np.max(np.abs(e_rho - fl.extrapolation_error_rho(mdp, hetero, pol, "recursion")))),
        )
        angle = fl.friction_angle(e_theta, e_rho)
        for (s, a), et in np.ndenumerate(e_theta):
            error_rows.append((i, s, a, float(et), float(e_rho[s, a]), float(angle[s, a])))
        report = fl.check_error_bounds(mdp, induced, hetero, pol)
        bound_rows.append({"instance": i, "states": mdp.num_states, "actions": mdp.num_actions,
                           "coherent": fl.check_coherence(buf, mdp), "recursion_gap": recursion_gap,
                           **report.as_dict()})
    summary = {
        "config": asdict(config),
        "instances": len(bound_rows),
        "e_rho_bound_violations": sum(not r["e_rho_holds"] for r in bound_rows),
        "angle_bound_violations": sum(not r["angle_holds"] for r in bound_rows),
        "max_recursion_gap": max(r["recursion_gap"] for r in bound_rows),
        "max_abs_e_theta": max(abs(r[3]) for r in error_rows),
        "bounds": bound_rows,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "errors.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ERROR_FIELDS)
            for row in error_rows:
                writer.writerow([row[0], row[1], row[2]] + [repr(x) for x in row[3:]])
        (out_dir / "bounds.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
