"""Seeded experiment runner, metrics and plot-data emission.

An experiment trains a list of objective variants on one matrix game over a
range of seeds. Results land in a directory::

    runs/<label>/seed_<k>.jsonl     one header line, then one line per update
    aggregate/<label>.csv           per-metric mean and 95% CI across seeds
    manifest.json                   resolved config and code version

``emit_plot_data`` turns that directory into tidy ``(variant, seed, x, y)``
CSVs, one per figure panel.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml
from scipy import stats

import coppo
from coppo.env import GAMES, make_game
from coppo.objectives import NO_INNER_CLIP, WEIGHTED_VARIANTS, ConfigError
from coppo.trainer import RunResult, TrainConfig, train

log = logging.getLogger(__name__)

COMPARISON, ABLATION = "comparison", "ablation"
STUDIES = (COMPARISON, ABLATION)
COMPARISON_PANELS = ("reward", "post_penalty_advantage", "within_update_advantage", "grad_variance")
ABLATION_PANELS = ("reward", "grad_variance")
DEFAULT_VARIANTS = {
    COMPARISON: ["coppo", "independent-ratio", "vanilla-pg"],
    ABLATION: [
        {"label": "0.05", "variant": "coppo", "eps2": 0.05},
        {"label": "0.10", "variant": "coppo", "eps2": 0.10},
        {"label": "0.15", "variant": "coppo", "eps2": 0.15},
        {"label": "none", "variant": NO_INNER_CLIP},
    ],
}
# Matrix-game setting used for the behavioral studies: MLP actor and learned critic.
PAPER_SETUP = {"architecture": "mlp", "critic": "learned"}


# --- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class VariantSpec:
    label: str
    train: TrainConfig

    @property
    def variant(self) -> str:
        return self.train.variant


@dataclass
class Windows:
    reward: int = 100        # trailing average for the reward curve
    variance: int = 50       # updates per running gradient-variance window
    final: int = 1000        # timesteps in the final-reward window

    def __post_init__(self):
        if min(self.reward, self.variance, self.final) < 1:
            raise ConfigError("metric windows must be positive")
        if self.variance < 2:
            raise ConfigError("the variance window needs at least two updates")


@dataclass
class ExperimentConfig:
    game: str = "penalty"
    study: str = COMPARISON
    variants: list = field(default_factory=list)      # list[VariantSpec] after resolution
    seeds: int = 20
    seed_offset: int = 0
    workers: int = 1
    output_dir: str = "results"
    windows: Windows = field(default_factory=Windows)
    event_cap: int | None = None
    log_gradients: bool = False
    train: dict = field(default_factory=dict)         # shared TrainConfig overrides, as given

    def __post_init__(self):
        if self.game not in GAMES:
            raise ConfigError(f"unknown game {self.game!r}; known: {', '.join(GAMES)}")
        if self.study not in STUDIES:
            raise ConfigError(f"study must be one of {STUDIES}")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.event_cap is not None and self.event_cap < 0:
            raise ConfigError("event_cap must be non-negative")
        labels = [v.label for v in self.variants]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"variant labels must be unique: {labels}")
        if not self.variants:
            raise ConfigError("at least one variant is required")

    @property
    def seed_list(self) -> list[int]:
        return list(range(self.seed_offset, self.seed_offset + self.seeds))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)} | {"total_timesteps"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        study = doc.get("study", COMPARISON)
        shared = dict(doc.pop("train", None) or {})
        if "total_timesteps" in doc:
            shared["total_timesteps"] = doc.pop("total_timesteps")
        if not isinstance(shared, dict):
            raise ConfigError("'train' must be a mapping")
        raw_variants = doc.pop("variants", None) or DEFAULT_VARIANTS.get(study, [])
        windows = doc.pop("windows", None) or {}
        if not isinstance(windows, dict):
            raise ConfigError("'windows' must be a mapping")
        try:
            win = Windows(**windows)
        except TypeError as exc:
            raise ConfigError(f"bad windows section: {exc}") from None
        variants = [_resolve_variant(v, shared) for v in raw_variants]
        try:
            return cls(variants=variants, windows=win, train=shared, **doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(doc or {})

    def to_dict(self) -> dict:
        return {
            "game": self.game,
            "study": self.study,
            "seeds": self.seeds,
            "seed_offset": self.seed_offset,
            "workers": self.workers,
            "output_dir": str(self.output_dir),
            "windows": vars(self.windows).copy(),
            "event_cap": self.event_cap,
            "log_gradients": self.log_gradients,
            "train": dict(self.train),
            "variants": [{"label": v.label, **v.train.to_dict()} for v in self.variants],
        }


def _resolve_variant(entry, shared: dict) -> VariantSpec:
    if isinstance(entry, str):
        label, overrides = entry, {"variant": entry}
    elif isinstance(entry, dict):
        overrides = dict(entry)
        label = str(overrides.pop("label", overrides.get("variant", "")))
        if "variant" not in overrides:
            raise ConfigError(f"variant entry {entry!r} needs a 'variant' key")
    else:
        raise ConfigError(f"variant entries must be strings or mappings, got {entry!r}")
    merged = {**shared, **overrides}
    merged.pop("seed", None)
    return VariantSpec(label or merged["variant"], TrainConfig.from_dict(merged))


# --- metrics ---------------------------------------------------------------

def smoothed_reward(rewards, window: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Trailing moving average. Returns ``(x, y)`` with x the 1-based timestep of the window end."""
    r = np.asarray(rewards, dtype=float)
    if len(r) < window:
        return np.arange(0), np.zeros(0)
    y = np.convolve(r, np.ones(window) / window, mode="valid")
    return np.arange(window, len(r) + 1), y


def final_reward(rewards, window: int = 1000) -> float:
    r = np.asarray(rewards, dtype=float)
    if len(r) == 0:
        raise ValueError("no rewards recorded")
    return float(r[-window:].mean())


def running_grad_variance(grads, window: int = 50) -> np.ndarray:
    """Windowed empirical variance of per-update gradient components.

    grads: ``(U, N, P)`` per-update, per-agent gradient vectors (or ``(U, P)``).
    For each full trailing window of updates, the unbiased variance of every
    component over the window is averaged over components, then over agents.
    Returns a series of length ``U - window + 1``.
    """
    g = np.asarray(grads, dtype=float)
    if g.ndim == 2:
        g = g[:, None, :]
    if window < 2:
        raise ValueError("window must cover at least two updates")
    U = g.shape[0]
    out = np.empty(max(0, U - window + 1))
    for end in range(window, U + 1):
        out[end - window] = g[end - window:end].var(axis=0, ddof=1).mean()
    return out


def event_value(event: dict, weighted: bool) -> float:
    """Mean over matching agents of the advantage they were updated with."""
    if weighted:
        return float(np.mean([np.mean(trace) for trace in event["adv_tilde"]]))
    return float(np.mean(event["adv"]))


def post_penalty_advantage(events: Sequence[dict], weighted: bool, cap: int | None = None) -> np.ndarray:
    """One value per miscoordination event, in order; optionally truncated to ``cap`` events."""
    series = np.array([event_value(e, weighted) for e in events], dtype=float)
    return series if cap is None else series[:cap]


def within_update_trace(events: Sequence[dict]) -> np.ndarray:
    """``(n_events, K)``: per event, the mean over matching agents of the reweighted advantage at each epoch."""
    if not events:
        return np.zeros((0, 0))
    return np.array([np.mean(e["adv_tilde"], axis=0) for e in events], dtype=float)


def truncate_to_common(series: Iterable[np.ndarray], cap: int | None = None) -> tuple[list[np.ndarray], int]:
    """Cut every series to the global minimum length (and to ``cap`` when given)."""
    series = [np.asarray(s) for s in series]
    n = min((len(s) for s in series), default=0)
    if cap is not None:
        n = min(n, cap)
    return [s[:n] for s in series], n


def mean_ci(samples, axis: int = 0, confidence: float = 0.95):
    """Mean and two-sided Student-t interval across ``axis``; the interval is NaN for one sample."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[axis]
    mean = x.mean(axis=axis)
    if n < 2:
        nan = np.full_like(mean, np.nan)
        return mean, nan, nan, n
    half = stats.t.ppf(0.5 + confidence / 2, n - 1) * x.std(axis=axis, ddof=1) / np.sqrt(n)
    return mean, mean - half, mean + half, n


@dataclass
class BootstrapResult:
    difference: float     # mean(a) - mean(b)
    lower: float          # one-sided lower confidence bound on the difference
    p_value: float        # share of resampled differences <= 0
    significant: bool


def bootstrap_greater(a, b, confidence: float = 0.95, n_resamples: int = 10_000, seed: int = 0) -> BootstrapResult:
    """One-sided percentile bootstrap for ``mean(a) > mean(b)`` with seeds resampled independently."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    def diff(x, y, axis=-1):
        return x.mean(axis=axis) - y.mean(axis=axis)

    res = stats.bootstrap((a, b), diff, n_resamples=n_resamples, confidence_level=confidence,
                          method="percentile", alternative="greater", vectorized=True,
                          random_state=np.random.default_rng(seed))
    dist = res.bootstrap_distribution
    lower = float(res.confidence_interval.low)
    return BootstrapResult(float(diff(a, b)), lower, float(np.mean(dist <= 0)), bool(lower > 0))


def spearman_trend(values) -> float:
    """Spearman rank correlation of a series against its index."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2 or np.all(values == values[0]):
        return 0.0
    return float(stats.spearmanr(np.arange(len(values)), values).statistic)


# --- running ----------------------------------------------------------------

@dataclass
class RunMetrics:
    label: str
    variant: str
    seed: int
    rewards: np.ndarray
    events: list                  # flattened penalty events, each tagged with its update index
    grad_variance: np.ndarray     # running variance, one value per full window
    records: list | None = None   # JSON-ready per-update log lines
    grads: np.ndarray | None = None

    @property
    def weighted(self) -> bool:
        return self.variant in WEIGHTED_VARIANTS

    def final_reward(self, window: int = 1000) -> float:
        return final_reward(self.rewards, window)

    def post_penalty(self, cap: int | None = None) -> np.ndarray:
        return post_penalty_advantage(self.events, self.weighted, cap)


def summarize_run(result: RunResult, label: str, windows: Windows, keep_records: bool = True,
                  keep_grads: bool = False) -> RunMetrics:
    grads = np.stack([r.grads for r in result.reports])
    var = running_grad_variance(grads, windows.variance)
    events = []
    records = [] if keep_records else None
    offset = 0
    for u, (report, evs) in enumerate(zip(result.reports, result.events)):
        tagged = [{"update": u, **e} for e in evs]
        events.extend(tagged)
        if keep_records:
            n = report.timestep - offset
            rec = {"type": "update", **report.to_json(),
                   "reward": result.rewards[offset:offset + n].tolist(),
                   "grad_variance": float(var[u - windows.variance + 1]) if u >= windows.variance - 1 else None,
                   "events": tagged}
            records.append(rec)
        offset = report.timestep
    return RunMetrics(label, result.config.variant, result.config.seed, result.rewards, events, var,
                      records, grads if keep_grads else None)


def run_single(game_id: str, spec: VariantSpec, seed: int, windows: Windows | None = None,
               keep_records: bool = True, keep_grads: bool = False) -> RunMetrics:
    cfg = TrainConfig.from_dict({**spec.train.to_dict(), "seed": seed})
    result = train(make_game(game_id), cfg)
    return summarize_run(result, spec.label, windows or Windows(), keep_records, keep_grads)


def _job(args):
    return run_single(*args)


def sweep(game_id: str, variants: Sequence[VariantSpec], seeds: Sequence[int], windows: Windows | None = None,
          workers: int = 1, keep_records: bool = False, keep_grads: bool = False) -> dict[str, list[RunMetrics]]:
    """Train every (variant, seed) pair. Results are ordered by variant, then seed, whatever ``workers`` is."""
    windows = windows or Windows()
    jobs = [(game_id, v, s, windows, keep_records, keep_grads) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_job, jobs))
    else:
        done = [_job(j) for j in jobs]
    out: dict[str, list[RunMetrics]] = {v.label: [] for v in variants}
    for m in done:
        out[m.label].append(m)
    return out


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(coppo.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{coppo.__version__}+{h.hexdigest()[:12]}"


def _write_jsonl(path: Path, lines: Iterable[dict]) -> None:
    with path.open("w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def aggregate_rows(runs: Sequence[RunMetrics], windows: Windows, event_cap: int) -> list[tuple]:
    """``(metric, x, mean, ci_low, ci_high, n)`` rows for one variant."""
    rows = []

    def add(metric, xs, samples):
        if len(xs) == 0:
            return
        mean, lo, hi, n = mean_ci(samples)
        for x, m, l, h in zip(xs, np.atleast_1d(mean), np.atleast_1d(lo), np.atleast_1d(hi)):
            rows.append((metric, x, m, l, h, n))

    curves = [smoothed_reward(r.rewards, windows.reward) for r in runs]
    add("reward", curves[0][0].tolist(), np.stack([c[1] for c in curves]))
    add("final_reward", [0], np.array([[r.final_reward(windows.final)] for r in runs]))
    var_len = min(len(r.grad_variance) for r in runs)
    add("grad_variance", list(range(windows.variance - 1, windows.variance - 1 + var_len)),
        np.stack([r.grad_variance[:var_len] for r in runs]))
    if event_cap > 0:
        add("post_penalty_advantage", list(range(event_cap)), np.stack([r.post_penalty(event_cap) for r in runs]))
    traces = [within_update_trace(r.events) for r in runs]
    if all(len(t) for t in traces):
        per_run = np.stack([t.mean(axis=0) for t in traces])
        add("within_update_advantage", list(range(1, per_run.shape[1] + 1)), per_run)
    return rows


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> Path:
    """Run every (variant, seed) job and write logs, aggregates and the manifest."""
    out = Path(config.output_dir)
    runs_dir, agg_dir = out / "runs", out / "aggregate"
    runs_dir.mkdir(parents=True, exist_ok=True)
    agg_dir.mkdir(parents=True, exist_ok=True)
    results = sweep(config.game, config.variants, config.seed_list, config.windows,
                    workers or config.workers, keep_records=True, keep_grads=config.log_gradients)

    run_paths = []
    for spec in config.variants:
        vdir = runs_dir / spec.label
        vdir.mkdir(exist_ok=True)
        for m in results[spec.label]:
            path = vdir / f"seed_{m.seed}.jsonl"
            header = {"type": "header", "label": spec.label, "seed": m.seed, "game": config.game,
                      "train": {**spec.train.to_dict(), "seed": m.seed}}
            _write_jsonl(path, [header, *m.records])
            if config.log_gradients:
                np.save(vdir / f"seed_{m.seed}.grads.npy", m.grads)
            run_paths.append(str(path.relative_to(out)))

    all_runs = [m for runs in results.values() for m in runs]
    _, observed = truncate_to_common([m.post_penalty() for m in all_runs])
    cap = observed if config.event_cap is None else min(observed, config.event_cap)
    for spec in config.variants:
        _write_csv(agg_dir / f"{spec.label}.csv", ("metric", "x", "mean", "ci_low", "ci_high", "n"),
                   aggregate_rows(results[spec.label], config.windows, cap))

    manifest = {
        "config": config.to_dict(),
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "event_cap": cap,
        "runs": run_paths,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d runs to %s", len(run_paths), out)
    return out


# --- reading results back ----------------------------------------------------

def load_run_log(path) -> dict:
    """Parse a run log into ``{header, rewards, events, grad_variance, updates}``."""
    header, updates = None, []
    with Path(path).open() as fh:
        for line in fh:
            doc = json.loads(line)
            if doc.get("type") == "header":
                header = doc
            else:
                updates.append(doc)
    if header is None:
        raise ValueError(f"{path} has no header line")
    return {
        "header": header,
        "rewards": np.array([r for u in updates for r in u["reward"]], dtype=float),
        "events": [e for u in updates for e in u["events"]],
        "grad_variance": [(u["update_idx"], u["grad_variance"]) for u in updates if u["grad_variance"] is not None],
        "updates": updates,
    }


def emit_plot_data(results_dir, out_dir=None) -> Path:
    """Write one tidy ``variant,seed,x,y`` CSV per figure panel, plus ``warnings.json``."""
    results_dir = Path(results_dir)
    out = Path(out_dir) if out_dir is not None else results_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    warnings: list[str] = []
    manifest_path = results_dir / "manifest.json"
    if not manifest_path.exists():
        warnings.append(f"no manifest in {results_dir}; nothing to plot")
        (out / "warnings.json").write_text(json.dumps({"warnings": warnings}, indent=2) + "\n")
        return out
    manifest = json.loads(manifest_path.read_text())
    cfg = manifest["config"]
    windows = Windows(**cfg["windows"])
    panels = COMPARISON_PANELS if cfg["study"] == COMPARISON else ABLATION_PANELS

    logs = []
    for rel in manifest["runs"]:
        path = results_dir / rel
        if path.exists():
            logs.append(load_run_log(path))
        else:
            warnings.append(f"missing run log {rel}")
    weighted = {v["label"]: v["variant"] in WEIGHTED_VARIANTS for v in cfg["variants"]}

    rows: dict[str, list] = {p: [] for p in panels}
    series = [post_penalty_advantage(lg["events"], weighted[lg["header"]["label"]]) for lg in logs]
    _, cap = truncate_to_common(series, cfg.get("event_cap"))
    for lg, pp in zip(logs, series):
        label, seed = lg["header"]["label"], lg["header"]["seed"]
        x, y = smoothed_reward(lg["rewards"], windows.reward)
        rows["reward"].extend((label, seed, int(a), b) for a, b in zip(x, y))
        rows["grad_variance"].extend((label, seed, int(u), v) for u, v in lg["grad_variance"])
        if "post_penalty_advantage" in rows:
            rows["post_penalty_advantage"].extend((label, seed, i, v) for i, v in enumerate(pp[:cap]))
            trace = within_update_trace(lg["events"])
            if len(trace):
                rows["within_update_advantage"].extend(
                    (label, seed, k + 1, v) for k, v in enumerate(trace.mean(axis=0)))
    for panel in panels:
        _write_csv(out / f"{panel}.csv", ("variant", "seed", "x", "y"), rows[panel])
        if not rows[panel]:
            warnings.append(f"panel {panel} is empty")
    (out / "warnings.json").write_text(json.dumps({"warnings": warnings}, indent=2) + "\n")
    return out
