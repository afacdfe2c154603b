import csv
import json
from pathlib import Path

import numpy as np
import pytest

from coppo.harness import (
    ExperimentConfig,
    Windows,
    bootstrap_greater,
    emit_plot_data,
    event_value,
    final_reward,
    load_run_log,
    mean_ci,
    post_penalty_advantage,
    run_experiment,
    running_grad_variance,
    smoothed_reward,
    spearman_trend,
    truncate_to_common,
    within_update_trace,
)
from coppo.objectives import ConfigError


def _tiny(tmp_path, study="comparison", variants=None, name="out", **extra):
    doc = {"game": "penalty", "study": study, "seeds": 2, "total_timesteps": 120,
           "windows": {"reward": 20, "variance": 3, "final": 40}, "output_dir": str(tmp_path / name), **extra}
    if variants is not None:
        doc["variants"] = variants
    return ExperimentConfig.from_dict(doc)


# --- config -----------------------------------------------------------------

def test_config_defaults_and_overrides():
    cfg = ExperimentConfig.from_dict({"train": {"architecture": "mlp"}, "total_timesteps": 500})
    assert [v.label for v in cfg.variants] == ["coppo", "independent-ratio", "vanilla-pg"]
    assert all(v.train.architecture == "mlp" and v.train.total_timesteps == 500 for v in cfg.variants)
    abl = ExperimentConfig.from_dict({"study": "ablation"})
    assert [v.label for v in abl.variants] == ["0.05", "0.10", "0.15", "none"]
    assert abl.variants[0].train.eps2 == 0.05 and abl.variants[3].variant == "no-inner-clip"
    assert ExperimentConfig.from_dict({}).windows == Windows(100, 50, 1000)


@pytest.mark.parametrize("doc", [
    {"game": "chess"},
    {"variants": ["ppo"]},
    {"seeds": 0},
    {"colour": "red"},
    {"variants": [{"label": "x"}]},
    {"variants": ["coppo", "coppo"]},
    {"windows": {"variance": 1}},
    {"train": {"eps2": 0.5}},
    {"study": "other"},
])
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_config_load_yaml_and_json(tmp_path):
    (tmp_path / "c.yaml").write_text("game: climbing\nseeds: 3\nvariants: [coppo]\n")
    assert ExperimentConfig.load(tmp_path / "c.yaml").game == "climbing"
    (tmp_path / "c.json").write_text(json.dumps({"seeds": 4}))
    assert ExperimentConfig.load(tmp_path / "c.json").seeds == 4
    (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.yaml")


# --- metrics ----------------------------------------------------------------

def test_running_variance_oracles():
    assert np.array_equal(running_grad_variance(np.ones((10, 2, 3)), 5), np.zeros(6))
    rng = np.random.default_rng(0)
    W, P = 50, 2000
    series = running_grad_variance(rng.normal(size=(W, 2, P)), W)
    assert series.shape == (1,)
    sd = np.sqrt(2 / (W - 1) / (2 * P))
    assert abs(series[0] - 1.0) < 3 * sd
    g = rng.normal(size=(8, 3))
    assert running_grad_variance(g, 4)[2] == pytest.approx(g[2:6].var(axis=0, ddof=1).mean())


def test_reward_metrics():
    x, y = smoothed_reward(np.arange(10.0), 4)
    assert x[0] == 4 and y[0] == pytest.approx(1.5) and len(y) == 7
    assert len(smoothed_reward(np.ones(3), 4)[1]) == 0
    assert final_reward(np.r_[np.zeros(10), np.ones(5)], 5) == 1.0
    with pytest.raises(ValueError):
        final_reward([])


def test_post_penalty_synthetic():
    events = [
        {"adv": [1.0, 2.0, 3.0], "adv_tilde": [[1.0, 0.0], [2.0, 2.0], [0.0, 0.0]]},
        {"adv": [-3.0, 0.0, 0.0], "adv_tilde": [[-4.0, -2.0], [0.0, 0.0], [0.0, 0.0]]},
    ]
    assert event_value(events[0], weighted=False) == pytest.approx(2.0)
    assert event_value(events[0], weighted=True) == pytest.approx((0.5 + 2.0 + 0.0) / 3)
    assert np.allclose(post_penalty_advantage(events, weighted=True), [2.5 / 3, -1.0])
    assert np.allclose(post_penalty_advantage(events, weighted=False, cap=1), [2.0])
    assert len(post_penalty_advantage([], weighted=True)) == 0
    assert np.allclose(within_update_trace(events), [[1.0, 2 / 3], [-4 / 3, -2 / 3]])
    cut, n = truncate_to_common([np.arange(5), np.arange(3)])
    assert n == 3 and all(len(c) == 3 for c in cut)
    assert truncate_to_common([np.arange(5)], cap=2)[1] == 2


def test_statistics_helpers():
    mean, lo, hi, n = mean_ci(np.array([1.0, 2.0, 3.0, 4.0]))
    assert mean == 2.5 and n == 4 and lo < 2.5 < hi
    assert np.isnan(mean_ci(np.array([1.0]))[1])
    rng = np.random.default_rng(1)
    clear = bootstrap_greater(rng.normal(1, 0.1, 20), rng.normal(0, 0.1, 20))
    assert clear.significant and clear.lower > 0.5
    assert not bootstrap_greater(np.zeros(20), np.ones(20)).significant
    assert spearman_trend([5, 4, 3, 2]) == pytest.approx(-1.0)
    assert spearman_trend([1, 1, 1]) == 0.0


# --- runner and outputs ------------------------------------------------------

def test_run_experiment_layout_and_determinism(tmp_path):
    a = run_experiment(_tiny(tmp_path, variants=["coppo"], name="a", seeds=1))
    assert sorted(p.name for p in (a / "runs" / "coppo").iterdir()) == ["seed_0.jsonl"]
    assert (a / "aggregate" / "coppo.csv").exists()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["config"]["variants"][0]["total_timesteps"] == 120
    assert "code_version" in manifest

    b = run_experiment(_tiny(tmp_path, variants=["coppo"], name="b", seeds=1))
    assert (a / "runs/coppo/seed_0.jsonl").read_bytes() == (b / "runs/coppo/seed_0.jsonl").read_bytes()
    assert (a / "aggregate/coppo.csv").read_bytes() == (b / "aggregate/coppo.csv").read_bytes()


def test_parallel_workers_match_serial(tmp_path):
    a = run_experiment(_tiny(tmp_path, variants=["coppo", "vanilla-pg"], name="serial"))
    b = run_experiment(_tiny(tmp_path, variants=["coppo", "vanilla-pg"], name="parallel", workers=2))
    for rel in ("runs/coppo/seed_1.jsonl", "runs/vanilla-pg/seed_0.jsonl", "aggregate/vanilla-pg.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_aggregates_recomputable_from_run_logs(tmp_path):
    out = run_experiment(_tiny(tmp_path, variants=["coppo"], seeds=3))
    logs = [load_run_log(out / "runs" / "coppo" / f"seed_{s}.jsonl") for s in range(3)]
    with (out / "aggregate" / "coppo.csv").open() as fh:
        rows = [r for r in csv.DictReader(fh)]
    finals = np.array([lg["rewards"][-40:].mean() for lg in logs])
    final_row = next(r for r in rows if r["metric"] == "final_reward")
    assert float(final_row["mean"]) == pytest.approx(finals.mean(), abs=1e-12)
    assert int(final_row["n"]) == 3
    var_rows = [r for r in rows if r["metric"] == "grad_variance"]
    first = np.mean([lg["grad_variance"][0][1] for lg in logs])
    assert float(var_rows[0]["mean"]) == pytest.approx(first, abs=1e-12)
    n_events = json.loads((out / "manifest.json").read_text())["event_cap"]
    assert sum(r["metric"] == "post_penalty_advantage" for r in rows) == n_events


def test_emit_plot_data_panels(tmp_path):
    comp = run_experiment(_tiny(tmp_path, name="comp"))
    plots = emit_plot_data(comp)
    names = sorted(p.name for p in plots.glob("*.csv"))
    assert names == ["grad_variance.csv", "post_penalty_advantage.csv", "reward.csv", "within_update_advantage.csv"]
    with (plots / "reward.csv").open() as fh:
        header = next(csv.reader(fh))
    assert header == ["variant", "seed", "x", "y"]

    abl = run_experiment(_tiny(tmp_path, study="ablation", name="abl", seeds=1))
    assert sorted(p.name for p in emit_plot_data(abl).glob("*.csv")) == ["grad_variance.csv", "reward.csv"]


def test_emit_plot_data_empty_and_partial(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    out = emit_plot_data(empty)
    assert not list(out.glob("*.csv"))
    assert json.loads((out / "warnings.json").read_text())["warnings"]

    res = run_experiment(_tiny(tmp_path, variants=["coppo"], name="partial"))
    (res / "runs" / "coppo" / "seed_1.jsonl").unlink()
    out = emit_plot_data(res, tmp_path / "plots")
    warnings = json.loads((out / "warnings.json").read_text())["warnings"]
    assert any("seed_1" in w for w in warnings)
    with (out / "reward.csv").open() as fh:
        seeds = {row["seed"] for row in csv.DictReader(fh)}
    assert seeds == {"0"}


def test_shipped_configs_load():
    root = Path(__file__).resolve().parents[1] / "configs"
    paths = sorted(root.rglob("*.yaml"))
    assert len(paths) == 9
    for path in paths:
        cfg = ExperimentConfig.load(path)
        assert cfg.variants
