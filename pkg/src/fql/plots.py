"""SVG learning curves and action density histograms.

Uses the object-oriented matplotlib API with a fixed hash salt and no date
metadata, so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from . import numkit as nk
from .envs import make_env
from .experiment import load_run, read_report
from .replay import ActionBoxFrame, DensityHistogram, histogram_pair, orthonormal_actions

_SVG_META = {"Date": None, "Creator": "fql"}


def _save(fig: Figure, path: Path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": "fql", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    return path


def curve_stats(per_seed: dict[int, list[dict]]):
    """Evaluation steps plus cross-seed mean and std of mean_return."""
    runs = list(per_seed.values())
    if not runs or any(len(r) != len(runs[0]) for r in runs):
        raise ValueError("metrics are ragged across seeds")
    steps = [row["step"] for row in runs[0]]
    if any([row["step"] for row in r] != steps for r in runs):
        raise ValueError("evaluation steps differ across seeds")
    returns = np.array([[row["mean_return"] for row in r] for r in runs])
    return np.array(steps), returns.mean(axis=0), returns.std(axis=0)


def _draw_curve(ax, steps, mean, std, n_seeds, label):
    line, = ax.plot(steps, mean, label=label)
    if n_seeds > 1:
        ax.fill_between(steps, mean - std, mean + std, color=line.get_color(), alpha=0.25, linewidth=0,
                        gid=f"std-band-{label}")


def plot_returns(curves: dict[str, tuple], title: str, path: Path) -> Path:
    """``curves`` maps label -> (steps, mean, std, n_seeds)."""
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for label, (steps, mean, std, n) in curves.items():
        _draw_curve(ax, steps, mean, std, n, label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean episode return")
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    return _save(fig, path)


def plot_density(hist: DensityHistogram, title: str, path: Path) -> Path:
    n = hist.action.shape[0]
    fig = Figure(figsize=(4 * n, 3))
    for i in range(n):
        ax = fig.add_subplot(1, n, i + 1)
        edges = hist.edges[i]
        ax.stairs(hist.action[i], edges, fill=True, alpha=0.5, label="action")
        ax.stairs(hist.orthonormal[i], edges, fill=True, alpha=0.5, label="orthonormal")
        ax.set_xlabel(f"dimension {i}")
        ax.set_ylabel("mass")
        if i == 0:
            ax.legend()
    fig.suptitle(title)
    return _save(fig, path)


def buffer_density(actions: np.ndarray, frame: ActionBoxFrame, bins: int = 50) -> DensityHistogram:
    others = orthonormal_actions(actions, frame).reshape(-1, frame.dim)
    return histogram_pair(actions, others, frame, bins)


def plot_run(run_dir: str | Path, bins: int = 50) -> list[Path]:
    """Return curve for a run (or every variant of an ablation) plus per-seed density plots."""
    run_dir = Path(run_dir)
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    if (run_dir / "report.csv").exists():
        variants = list(dict.fromkeys(row["variant"] for row in read_report(run_dir / "report.csv")))
        curves = {}
        for name in variants:
            config, per_seed = load_run(run_dir / name.replace("=", "_"))
            steps, mean, std = curve_stats(per_seed)
            curves[name] = (steps, mean, std, len(per_seed))
        return [plot_returns(curves, f"{config.env_id} ablation", plots / "returns.svg")]
    config, per_seed = load_run(run_dir)
    steps, mean, std = curve_stats(per_seed)
    out = [plot_returns({config.agent_kind: (steps, mean, std, len(per_seed))}, config.env_id,
                        plots / "returns.svg")]
    spec = make_env(config.env_id, **config.env_params).spec
    frame = ActionBoxFrame(spec.action_low, spec.action_high)
    for seed in config.seeds:
        ckpt = run_dir / f"checkpoint_seed{seed}.bin"
        if not ckpt.exists():
            continue
        actions = nk.load_checkpoint(ckpt).get("buffer/actions")
        if actions is None or len(actions) == 0:
            continue
        out.append(plot_density(buffer_density(actions, frame, bins), f"{config.env_id} seed {seed}",
                                plots / f"density_seed{seed}.svg"))
    return out
