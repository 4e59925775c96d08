import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fql import experiment as ex
from fql.agent import AgentConfig

TINY = dict(total_steps=300, start_steps=150, eval_every=100, eval_episodes=2, seeds=[0])


def tiny_config(**kw) -> ex.RunConfig:
    return ex.RunConfig.from_dict({**TINY, **kw})


# -- config -------------------------------------------------------------------
def test_defaults_follow_experiment_protocol():
    cfg = ex.RunConfig()
    assert cfg.seeds == [0, 1, 2, 3, 4]
    assert cfg.eval_every == 1000 and cfg.eval_episodes == 10
    assert cfg.agent.latent_multiplier == 2


def test_env_preset_applied_and_overridable():
    assert ex.RunConfig.from_dict({"env_id": "Reacher2Link"}).agent.beta == 5.0
    assert ex.RunConfig.from_dict({"env_id": "Incline2D"}).agent.beta == 0.0
    assert ex.RunConfig.from_dict({"env_id": "Reacher2Link", "beta": 1.5}).agent.beta == 1.5


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"seeds": []},
    {"seeds": [1, 1]},
    {"critic_lr": 0.0},
    {"actor_lr": -1e-3},
    {"agent_kind": "sac"},
    {"env_id": "Pendulum"},
    {"total_steps": -1},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValueError):
        ex.RunConfig.from_dict(bad)


def test_invalid_override_rejected_before_compute(tmp_path, monkeypatch):
    called = []
    monkeypatch.setattr(ex, "train_seed", lambda *a, **k: called.append(1))
    with pytest.raises(ValueError):
        ex.load_config(None, ["nonsense=3"])
    with pytest.raises(ValueError):
        ex.load_config(None, ["beta"])
    assert not called


def test_override_values_parsed_as_json():
    cfg = ex.load_config(None, ["beta=2.5", "hetero_mode=augment_all", "env_params={\"dt\": 0.1}"], [3, 4])
    assert cfg.agent.beta == 2.5 and cfg.agent.hetero_mode == "augment_all"
    assert cfg.env_params == {"dt": 0.1} and cfg.seeds == [3, 4]


def test_config_dict_round_trip_and_hash():
    cfg = tiny_config(beta=3.0)
    again = ex.RunConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert cfg.with_overrides({"beta": 4.0}).config_hash() != cfg.config_hash()


# -- metrics I/O --------------------------------------------------------------
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**9), st.integers(0, 1000),
                          st.lists(finite, min_size=len(ex.METRIC_FIELDS) - 2,
                                   max_size=len(ex.METRIC_FIELDS) - 2)), max_size=5))
def test_metrics_csv_round_trip_is_lossless(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("m") / "metrics.csv"
    records = [dict(zip(ex.METRIC_FIELDS, (step, seed, *vals))) for step, seed, vals in rows]
    ex.write_metrics(path, records)
    assert ex.read_metrics(path) == records


def test_metrics_nan_losses_survive_round_trip(tmp_path):
    row = {k: 1.0 for k in ex.METRIC_FIELDS} | {"step": 5, "seed": 0, "actor_loss": math.nan}
    ex.write_metrics(tmp_path / "m.csv", [row])
    back = ex.read_metrics(tmp_path / "m.csv")[0]
    assert math.isnan(back["actor_loss"]) and back["step"] == 5


def test_read_metrics_rejects_bad_files(tmp_path):
    (tmp_path / "hdr.csv").write_text("step,seed\n1,0\n")
    with pytest.raises(ValueError):
        ex.read_metrics(tmp_path / "hdr.csv")
    (tmp_path / "ragged.csv").write_text(",".join(ex.METRIC_FIELDS) + "\n1,0,2\n")
    with pytest.raises(ValueError):
        ex.read_metrics(tmp_path / "ragged.csv")


# -- training -----------------------------------------------------------------
def test_zero_steps_gives_config_copy_and_empty_metrics(tmp_path):
    run = ex.train(tiny_config(total_steps=0), tmp_path / "run")
    assert json.loads((run / "config.json").read_text())["total_steps"] == 0
    assert ex.read_metrics(run / "metrics_seed0.csv") == []
    assert (run / "plots").is_dir()


def _strip_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


@pytest.mark.parametrize("kind", ex.AGENT_KINDS)
def test_rerun_gives_identical_metrics(tmp_path, kind):
    cfg = tiny_config(agent_kind=kind)
    a = ex.read_metrics(ex.train(cfg, tmp_path / "a") / "metrics_seed0.csv")
    b = ex.read_metrics(ex.train(cfg, tmp_path / "b") / "metrics_seed0.csv")
    assert len(a) == 3
    np.testing.assert_equal(_strip_wall(a), _strip_wall(b))


def test_metrics_rows_are_monotone_and_finite(tmp_path):
    rows = ex.train_seed(tiny_config(), 0)
    assert [r["step"] for r in rows] == [100, 200, 300]
    assert all(np.isfinite(r["mean_return"]) for r in rows)
    assert math.isnan(rows[0]["critic_loss"])  # no training before start_steps
    assert np.isfinite(rows[-1]["critic_loss"]) and np.isfinite(rows[-1]["cvae_total"])


def test_parallel_workers_match_serial(tmp_path):
    cfg = tiny_config(seeds=[0, 1])
    serial = ex.train(cfg, tmp_path / "s")
    parallel = ex.train(cfg.with_overrides({"workers": 2}), tmp_path / "p")
    for seed in (0, 1):
        np.testing.assert_equal(_strip_wall(ex.read_metrics(serial / f"metrics_seed{seed}.csv")),
                                _strip_wall(ex.read_metrics(parallel / f"metrics_seed{seed}.csv")))


def test_recorded_hash_matches_config(tmp_path):
    cfg = tiny_config()
    run = ex.train(cfg, tmp_path / "run")
    recorded = (run / "config_hash.txt").read_text().strip()
    assert recorded == cfg.config_hash()
    assert ex.RunConfig.from_dict(json.loads((run / "config.json").read_text())).config_hash() == recorded
    assert json.loads((run / "summary.json").read_text())["config_hash"] == recorded


def test_checkpoint_reload_reproduces_final_evaluation(tmp_path):
    cfg = tiny_config()
    run = ex.train(cfg, tmp_path / "run")
    last = ex.read_metrics(run / "metrics_seed0.csv")[-1]
    out = ex.evaluate_run(run)
    assert out["0"]["mean_return"] == pytest.approx(last["mean_return"], abs=1e-12)


def test_load_run_missing_metrics(tmp_path):
    run = ex.train(tiny_config(total_steps=0), tmp_path / "run")
    (run / "metrics_seed0.csv").unlink()
    with pytest.raises(FileNotFoundError):
        ex.load_run(run)


def test_random_policy_returns_are_seeded():
    a = ex.random_policy_returns("PointMass2D", 3, 0)
    np.testing.assert_array_equal(a, ex.random_policy_returns("PointMass2D", 3, 0))
    assert not np.array_equal(a, ex.random_policy_returns("PointMass2D", 3, 1))


# -- summary metrics ------------------------------------------------------------
def test_summary_hand_worked_example():
    s = ex.compute_summary([[1, 3], [2, 2]])
    assert s["step_metric"] == 2.5 and s["seed_metric"] == 2.5 and s["final_metric"] == 2.5
    assert s["step_std"] == 0.5 and s["seed_std"] == 0.5 and s["final_std"] == 0.5


def test_summary_single_seed():
    s = ex.compute_summary([[4.0, 7.0, 5.0]])
    assert (s["step_metric"], s["seed_metric"], s["final_metric"]) == (7.0, 7.0, 5.0)
    assert s["step_std"] == s["seed_std"] == s["final_std"] == 0.0


def test_summary_constant_curves():
    s = ex.compute_summary([[3.0] * 4] * 3)
    assert s["step_metric"] == s["seed_metric"] == s["final_metric"] == 3.0
    assert s["final_std"] == 0.0


@pytest.mark.parametrize("bad", [[], [[]], [[1, 2], [1]]])
def test_summary_rejects_misaligned(bad):
    with pytest.raises(ValueError):
        ex.compute_summary(bad)


def test_summary_rejects_misaligned_grids():
    with pytest.raises(ValueError):
        ex.compute_summary([[1, 2], [1, 2]], [[10, 20], [10, 30]])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.lists(
    st.lists(st.floats(-1e6, 1e6), min_size=n, max_size=n), min_size=1, max_size=6)))
def test_summary_max_dominates_final(curves):
    s = ex.compute_summary(curves)
    assert s["seed_metric"] >= s["final_metric"] - 1e-9 * (1 + abs(s["final_metric"]))
    assert s["step_metric"] >= s["final_metric"]


# -- ablation -------------------------------------------------------------------
def test_ablation_rows_are_variants_times_seeds(tmp_path):
    cfg = tiny_config(total_steps=200, eval_every=100, seeds=[0, 1])
    out = ex.ablate(cfg, "beta", [0.0, 2.0, 5.0], tmp_path / "ab")
    rows = ex.read_report(out / "report.csv")
    assert len(rows) == 6
    assert sorted({r["variant"] for r in rows}) == ["beta=0.0", "beta=2.0", "beta=5.0"]
    assert json.loads((out / "beta_2.0" / "config.json").read_text())["beta"] == 2.0


def test_method_sweep_has_two_variants(tmp_path):
    out = ex.ablate(tiny_config(total_steps=200), "hetero_mode", ["critic_select", "augment_all"], tmp_path)
    assert [r["variant"] for r in ex.read_report(out / "report.csv")] == [
        "hetero_mode=critic_select", "hetero_mode=augment_all"]


@pytest.mark.parametrize("key,values", [("beta", []), ("beta", [1.0, 1.0]), ("gamma", [0.9])])
def test_ablation_rejects_bad_sweeps(tmp_path, key, values):
    with pytest.raises(ValueError):
        ex.ablate(tiny_config(), key, values, tmp_path)


def test_agent_config_fields_exposed_as_run_keys():
    assert set(AgentConfig.field_names()) <= ex.RunConfig.keys()
