"""Experiment orchestration: seeded runs, CSV traces, summaries, comparisons.

A single JSON config document describes an experiment: the distribution
constants, the trainer settings, which algorithms to run, and a list of
seeds. Each (algorithm, seed) job owns the directory
<output_dir>/<algo>/<seed>/ and writes trace.csv there; each algorithm
directory gets a summary.json with one entry per seed. Every random choice
in a job derives from its seed alone (directions, train/test data, network
init, gradient noise, probes), so any subset of seeds run alone, or the same
config run twice, reproduces traces byte for byte.

Numbers in trace.csv use the shortest round-trip decimal representation;
missing optional values are empty fields and NaN is spelled "nan".
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .diagnostics import CSV_COLUMNS, MetricsRecord
from .distribution import generate_dataset, make_params
from .trainer import DivergenceError, TrainerConfig, run, stream

__all__ = [
    "ConfigError",
    "PROFILES",
    "resolve_config",
    "apply_overrides",
    "run_experiment",
    "compare_runs",
    "run_sweep",
    "write_trace",
    "read_trace",
]

DEFAULT_THRESHOLD = 0.3  # "has learned the subset" loss level, configurable


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to exit code 2)."""


PROFILES = {
    # engineering defaults sized so every algorithm finishes in minutes on a
    # few cores; these are not the asymptotic parameter choices
    "desk": {
        "distribution": {
            "d": 100, "kappa": 0.25, "p0": 0.2, "q0": 0.2, "r": 0.5,
            "n_test": 5000,
        },
        "trainer": {
            "m": 256, "eta1": 1.25, "eta2": 0.25, "lambda": 1e-3,
            "tau0": 0.05, "epsilon1": 0.05, "epsilon2": 0.08,
            "epsilon2_prime": 0.08, "max_iters": 200_000, "eval_every": 50,
            "algorithm": "ls",
        },
        "algorithms": ["ls", "s"],
        "seeds": [1, 2, 3, 4, 5],
    },
    # the asymptotic scalings (r = d^-3/4, lambda = d^-5/4, p0 = kappa^2/2);
    # convergence times at these values are far beyond desk budgets
    "theory": {
        "distribution": {"d": 400, "kappa": 0.5, "q0": 0.2, "n_test": 5000},
        "trainer": {
            "m": 8192, "eta1": 0.5, "eta2": 5e-3, "tau0": 0.01,
            "epsilon1": 0.01, "epsilon2_prime": 0.01,
            "max_iters": 200_000, "eval_every": 50, "algorithm": "ls",
        },
        "algorithms": ["ls", "s"],
        "seeds": [1, 2, 3, 4, 5],
    },
}

_DIST_KEYS = {
    "d", "kappa", "p0", "q0", "r", "gamma0", "q_support", "n_train", "n_test",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply dotted-path assignments like trainer.eta1=0.1 to a config dict.

    Values are parsed as JSON when possible and kept as strings otherwise.
    """
    config = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object")
        node[parts[-1]] = value
    return config


def resolve_config(config: dict) -> dict:
    """Fill profile defaults, validate, and return the canonical config dict."""
    config = copy.deepcopy(config)
    profile = config.get("profile", "desk")
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(
                f"unknown profile {profile!r}, expected one of {sorted(PROFILES)}"
            )
        config = _merge(PROFILES[profile], config)
    config.setdefault("profile", profile)

    dist = config.get("distribution", {})
    unknown = set(dist) - _DIST_KEYS
    if unknown:
        raise ConfigError(f"unknown distribution keys: {sorted(unknown)}")
    for key in ("d", "kappa", "q0"):
        if key not in dist:
            raise ConfigError(f"distribution.{key} is required")
    dist.setdefault("n_train", int(round(dist["d"] / dist["kappa"] ** 2)))
    dist.setdefault("n_test", 5000)
    if dist["n_train"] < 1:
        raise ConfigError("distribution.n_train must be >= 1")
    if dist["n_test"] < 1000:
        raise ConfigError(
            "distribution.n_test must be >= 1000 for usable error estimates"
        )
    config["distribution"] = dist

    try:
        trainer = TrainerConfig.from_dict(config.get("trainer", {}))
        trainer.validate()
    except ValueError as err:
        raise ConfigError(f"trainer config: {err}") from err
    config["trainer"] = trainer.to_dict()

    algos = config.get("algorithms") or [config["trainer"]["algorithm"]]
    norm = [TrainerConfig.from_dict({"algorithm": a}).algorithm for a in algos]
    if len(set(norm)) != len(norm):
        raise ConfigError(f"duplicate algorithms in {algos}")
    config["algorithms"] = norm

    seeds = config.get("seeds")
    if not seeds:
        raise ConfigError("seeds must be a nonempty list")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    config["seeds"] = [int(s) for s in seeds]

    try:
        make_params_for_seed(dist, config["seeds"][0])
    except ValueError as err:
        raise ConfigError(f"distribution config: {err}") from err

    if "output_dir" not in config:
        raise ConfigError("output_dir is required")
    config.setdefault("threshold", DEFAULT_THRESHOLD)
    return config


def load_config_file(path: str, overrides: list[str] | None = None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        config = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"{path}:{err.lineno}:{err.colno}: {err.msg}"
        ) from err
    if overrides:
        config = apply_overrides(config, overrides)
    return resolve_config(config)


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _fmt_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trace(path: Path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow([_fmt_cell(getattr(rec, col)) for col in CSV_COLUMNS])


def read_trace(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for key, raw in row.items():
                if raw == "":
                    parsed[key] = None
                elif key == "t":
                    parsed[key] = int(raw)
                else:
                    parsed[key] = float(raw)
            rows.append(parsed)
    return rows


def make_params_for_seed(dist: dict, seed: int):
    overrides = {
        key: dist[key]
        for key in ("p0", "q0", "r", "gamma0", "q_support")
        if key in dist and dist[key] is not None
    }
    return make_params(
        d=int(dist["d"]), kappa=float(dist["kappa"]), q0=float(dist["q0"]),
        overrides=overrides, seed=seed,
    )


def _run_job(config: dict, algo: str, seed: int) -> dict:
    """One (algorithm, seed) training run; writes its trace, returns a summary row."""
    dist = config["distribution"]
    params = make_params_for_seed(dist, seed)
    train = generate_dataset(params, int(dist["n_train"]), stream(seed, 0))
    test = generate_dataset(params, int(dist["n_test"]), stream(seed, 1))
    cfg = TrainerConfig.from_dict(
        {**config["trainer"], "algorithm": algo, "seed": seed}
    )
    run_dir = Path(config["output_dir"]) / algo / str(seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    diverged = False
    try:
        state, trace = run(cfg, train, test)
        converged = state.converged
        t0 = state.t0
        iterations = state.t
    except DivergenceError as err:
        trace = list(err.trace) + [err.record]
        converged = False
        diverged = True
        t0 = err.state.t0
        iterations = err.state.t
    wall = time.perf_counter() - started
    write_trace(run_dir / "trace.csv", trace)
    return {
        "seed": seed,
        "algorithm": algo,
        "converged": converged,
        "diverged": diverged,
        "t0": t0,
        "iterations": iterations,
        "wall_time_s": round(wall, 3),
        "final": asdict(trace[-1]),
    }


def _max_workers(n_jobs: int) -> int:
    env = os.environ.get("LOL_THREADS")
    if env:
        return max(1, min(int(env), n_jobs))
    return max(1, min(os.cpu_count() or 1, n_jobs))


def _execute_jobs(config: dict, jobs: list[tuple[str, int]]) -> list[dict]:
    workers = _max_workers(len(jobs))
    if workers == 1 or len(jobs) == 1:
        return [_run_job(config, algo, seed) for algo, seed in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_job, config, a, s) for a, s in jobs]
        return [f.result() for f in futures]


def _write_summaries(config: dict, rows: list[dict]) -> None:
    chash = config_hash(config)
    for algo in config["algorithms"]:
        algo_rows = sorted(
            (r for r in rows if r["algorithm"] == algo), key=lambda r: r["seed"]
        )
        doc = {
            "config_hash": chash,
            "algorithm": algo,
            "config": config,
            "runs": algo_rows,
        }
        path = Path(config["output_dir"]) / algo / "summary.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")


def run_experiment(config: dict) -> int:
    """Run every seed x algorithm job; returns the process exit code."""
    config = resolve_config(config)
    Path(config["output_dir"]).mkdir(parents=True, exist_ok=True)
    jobs = [(a, s) for a in config["algorithms"] for s in config["seeds"]]
    rows = _execute_jobs(config, jobs)
    _write_summaries(config, rows)
    return 3 if any(r["diverged"] for r in rows) else 0


def first_crossing(trace_rows: list[dict], column: str, threshold: float):
    """First iteration at which a trace column drops below the threshold."""
    for row in trace_rows:
        val = row.get(column)
        if val is not None and not math.isnan(val) and val < threshold:
            return row["t"]
    return None


def _mean_std(values: list) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def _summarize_dir(algo_dir: Path, threshold: float) -> dict:
    summary_path = algo_dir / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"{algo_dir} has no summary.json")
    doc = json.loads(summary_path.read_text())
    per_seed = []
    for row in doc["runs"]:
        trace = read_trace(algo_dir / str(row["seed"]) / "trace.csv")
        q_cross = first_crossing(trace, "loss_m1bar_g", threshold)
        p_cross = first_crossing(trace, "loss_m2bar", threshold)
        inversion = q_cross is not None and (p_cross is None or q_cross < p_cross)
        per_seed.append(
            {
                "seed": row["seed"],
                "converged": row["converged"],
                "t0": row["t0"],
                "iterations": row["iterations"],
                "q_cross": q_cross,
                "p_cross": p_cross,
                "inversion": inversion,
                "final": row["final"],
            }
        )
    out = {
        "dir": str(algo_dir),
        "algorithm": doc["algorithm"],
        "distribution": doc["config"]["distribution"],
        "n_seeds": len(per_seed),
        "per_seed": per_seed,
    }
    for key in (
        "test_err", "test_loss", "test_err_p_only", "test_err_q_only",
        "test_err_both", "train_loss", "span_residual", "alpha_norm",
    ):
        mean, std = _mean_std([r["final"][key] for r in per_seed])
        out[f"{key}_mean"], out[f"{key}_std"] = mean, std
    for key in ("q_cross", "p_cross", "t0"):
        vals = [r[key] for r in per_seed]
        mean, std = _mean_std(vals)
        out[f"{key}_mean"], out[f"{key}_std"] = mean, std
        out[f"{key}_count"] = sum(v is not None for v in vals)
    out["inversion_frac"] = float(np.mean([r["inversion"] for r in per_seed]))
    out["learning_order_inversion"] = out["inversion_frac"] > 0.5
    return out


_COMPARE_CSV_COLUMNS = [
    "dir", "algorithm", "n_seeds",
    "test_err_mean", "test_err_std",
    "test_err_p_only_mean", "test_err_p_only_std",
    "test_err_q_only_mean", "test_err_q_only_std",
    "test_err_both_mean", "test_err_both_std",
    "test_loss_mean", "train_loss_mean",
    "span_residual_mean", "alpha_norm_mean",
    "q_cross_mean", "q_cross_count",
    "p_cross_mean", "p_cross_count",
    "t0_mean", "t0_count",
    "inversion_frac", "learning_order_inversion",
]


def compare_runs(
    run_dirs: list[str],
    out_dir: str = ".",
    threshold: float = DEFAULT_THRESHOLD,
) -> int:
    """Tabulate per-algorithm aggregates side by side.

    Every directory must be an algorithm directory written by `run` (it holds
    summary.json plus per-seed traces), and all of them must share the same
    distribution configuration.
    """
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    summaries = [_summarize_dir(Path(d), threshold) for d in run_dirs]
    base = summaries[0]["distribution"]
    for summ in summaries[1:]:
        if summ["distribution"] != base:
            raise ConfigError(
                f"distribution config of {summ['dir']} does not match "
                f"{summaries[0]['dir']}"
            )
    deltas = []
    for i, a in enumerate(summaries):
        for b in summaries[i + 1 :]:
            entry = {"a": a["dir"], "b": b["dir"]}
            for key in (
                "test_err_mean", "test_err_p_only_mean", "test_err_q_only_mean",
                "test_err_both_mean", "test_loss_mean",
            ):
                if a[key] is None or b[key] is None:
                    entry[f"delta_{key}"] = None
                else:
                    entry[f"delta_{key}"] = a[key] - b[key]
            deltas.append(entry)
    doc = {"threshold": threshold, "runs": summaries, "deltas": deltas}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(doc, indent=2) + "\n")
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_COMPARE_CSV_COLUMNS)
        for summ in summaries:
            writer.writerow([_fmt_cell(summ.get(c)) for c in _COMPARE_CSV_COLUMNS])
    return 0


def _set_path(config: dict, path: str, value) -> None:
    node = config
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _get_path(config: dict, path: str):
    node = config
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


_SWEEP_META = ["axis", "value", "algorithm", "seed", "converged", "t0", "iterations"]


def run_sweep(config: dict, axis: str, values: list) -> int:
    """Cross product of the config with one numeric axis; long-format CSV out."""
    config = resolve_config(config)
    current = _get_path(config, axis)
    if current is not None and not isinstance(current, (int, float)):
        raise ConfigError(f"sweep axis {axis} is not numeric (found {current!r})")
    if not values:
        raise ConfigError("sweep needs at least one value")
    root = Path(config["output_dir"])
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    exit_code = 0
    for value in values:
        sub = copy.deepcopy(config)
        _set_path(sub, axis, value)
        sub["output_dir"] = str(root / f"{axis.replace('.', '_')}={value}")
        sub = resolve_config(sub)
        jobs = [(a, s) for a in sub["algorithms"] for s in sub["seeds"]]
        result_rows = _execute_jobs(sub, jobs)
        _write_summaries(sub, result_rows)
        if any(r["diverged"] for r in result_rows):
            exit_code = 3
        for row in result_rows:
            rows.append({"axis": axis, "value": value, **row})
    with open(root / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_SWEEP_META + list(CSV_COLUMNS))
        for row in rows:
            cells = [_fmt_cell(row.get(k)) for k in _SWEEP_META]
            cells += [_fmt_cell(row["final"][c]) for c in CSV_COLUMNS]
            writer.writerow(cells)
    return exit_code
