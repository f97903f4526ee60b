"""Metrics, experiment orchestration and wall-clock benchmarks."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines as bl
from .dataset import Dataset, DatasetError
from .model import LaCGKN
from .nn import angular_embed, angular_unembed
from .tracers import min_image

log = logging.getLogger(__name__)

__all__ = [
    "rmse",
    "tracer_rmse",
    "field_rmse",
    "fingerprint",
    "MetricsReport",
    "ExperimentConfig",
    "BenchConfig",
    "run_experiment",
    "bench",
    "write_snapshot",
    "read_snapshot",
]

TARGETS = ("tracer", "upper", "lower", "two_layer")


def rmse(a, a_star) -> float:
    """``sqrt(||a - a_star||^2 / d)`` over all entries."""
    a = np.asarray(a, float).ravel()
    b = np.asarray(a_star, float).ravel()
    if a.size == 0:
        raise ValueError("rmse of empty vectors")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def tracer_rmse(pos, pos_star) -> float:
    """RMSE of minimal-image position differences."""
    d = min_image(np.asarray(pos, float) - np.asarray(pos_star, float))
    return rmse(d, np.zeros_like(d))


def field_rmse_series(psi, psi_star) -> dict[str, np.ndarray]:
    """Per-step RMSE of each layer and of both layers, each of shape (T,)."""
    d = np.asarray(psi, float) - np.asarray(psi_star, float)
    sq = d**2
    return {
        "upper": np.sqrt(sq[:, 0].mean(axis=(1, 2))),
        "lower": np.sqrt(sq[:, 1].mean(axis=(1, 2))),
        "two_layer": np.sqrt(sq.mean(axis=(1, 2, 3))),
    }


def field_rmse(psi, psi_star) -> dict[str, float]:
    """Time-averaged per-step RMSE per layer and for both layers."""
    return {k: float(v.mean()) for k, v in field_rmse_series(psi, psi_star).items()}


def tracer_rmse_series(pos, pos_star) -> np.ndarray:
    d = min_image(np.asarray(pos, float) - np.asarray(pos_star, float))
    return np.sqrt((d**2).reshape(len(d), -1).mean(axis=1))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def fingerprint(config: dict, manifest_text: str = "", weights_header: dict | None = None) -> str:
    """SHA-256 over the canonical config, the dataset manifest and the weights identity."""
    h = hashlib.sha256()
    h.update(_canonical(config).encode())
    h.update(manifest_text.encode())
    if weights_header is not None:
        h.update(_canonical({k: weights_header.get(k) for k in ("format", "version", "seed")}).encode())
        h.update(_canonical(weights_header.get("tensors", {})).encode())
    return h.hexdigest()


@dataclass
class MetricsReport:
    """RMSE table plus per-step series and timings."""

    rows: list = field(default_factory=list)  # dicts: method, task, target, rmse
    series: dict = field(default_factory=dict)  # (method, task) -> {target: array}
    spread: dict = field(default_factory=dict)  # method -> per-step mean spread
    seconds: dict = field(default_factory=dict)  # method -> wall clock
    fingerprint: str = ""

    def add(self, method, task, values: dict):
        for target in TARGETS:
            if target in values:
                v = float(values[target])
                if v < 0 or not np.isfinite(v):
                    raise ValueError(f"invalid RMSE {v} for {method}/{target}")
                self.rows.append({"method": method, "task": task, "target": target, "rmse": v})

    def get(self, method, task, target) -> float:
        for r in self.rows:
            if (r["method"], r["task"], r["target"]) == (method, task, target):
                return r["rmse"]
        raise KeyError((method, task, target))

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "task", "target", "rmse", "fingerprint"])
        for r in self.rows:
            w.writerow([r["method"], r["task"], r["target"], repr(r["rmse"]), self.fingerprint])
        return buf.getvalue()

    def series_csv(self, task) -> str:
        keys = [k for k in self.series if k[1] == task]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["step"]
        cols = []
        for k in keys:
            for target, arr in self.series[k].items():
                header.append(f"{k[0]}:{target}")
                cols.append(arr)
        spread_keys = [m for m in self.spread if task == "assimilation"]
        for m in spread_keys:
            header.append(f"{m}:spread")
            cols.append(self.spread[m])
        w.writerow(header)
        n = max((len(c) for c in cols), default=0)
        for i in range(n):
            w.writerow([i] + [repr(float(c[i])) if i < len(c) else "" for c in cols])
        return buf.getvalue()


# -- snapshots ---------------------------------------------------------
def write_snapshot(stem, array: np.ndarray, meta: dict | None = None) -> None:
    """Raw little-endian float32 values plus a JSON header with shape and metadata."""
    stem = Path(stem)
    a = np.ascontiguousarray(array, "<f4")
    stem.with_suffix(".bin").write_bytes(a.tobytes())
    stem.with_suffix(".json").write_text(json.dumps({"dtype": "<f4", "shape": list(a.shape),
                                                     "meta": meta or {}}, sort_keys=True, indent=1))


def read_snapshot(stem) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    head = json.loads(stem.with_suffix(".json").read_text())
    a = np.frombuffer(stem.with_suffix(".bin").read_bytes(), "<f4").reshape(head["shape"])
    return a.copy(), head


# -- experiments -------------------------------------------------------
@dataclass
class ExperimentConfig:
    dataset: str = ""
    weights: str = ""
    split: str = "test"
    n_steps: int | None = None
    n_tracers: int = 16
    tracer_seed: int = 0
    spin_up: int = 50
    da_methods: tuple = ("lacgkn", "climatology")
    forecast_methods: tuple = ("lacgkn", "persistence")
    eakf_members: int = 40
    eakf_inflation: float = 1.0
    eakf_loc_radius: float | None = 8.0
    eakf_obs_var: float | None = None
    oi_sigma_b: float = 1.0
    oi_loc_radius: float = 2.0
    snapshot_steps: tuple = ()
    seed: int = 0

    def __post_init__(self):
        self.da_methods = tuple(self.da_methods)
        self.forecast_methods = tuple(self.forecast_methods)
        self.snapshot_steps = tuple(self.snapshot_steps)
        bad = set(self.da_methods) - {"lacgkn", "eakf", "oi", "climatology"}
        if bad:
            raise ValueError(f"unknown assimilation methods {sorted(bad)}")
        bad = set(self.forecast_methods) - {"lacgkn", "persistence"}
        if bad:
            raise ValueError(f"unknown forecast methods {sorted(bad)}")
        if self.spin_up < 0:
            raise ValueError("spin_up must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)


def _require(path, what):
    p = Path(path)
    if not str(path) or not (p.exists() or p.with_suffix(".json").exists()):
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _eakf_init(psi_train, n_members, seed):
    rng = np.random.default_rng([seed, 12])
    idx = rng.choice(len(psi_train), size=n_members, replace=False)
    return psi_train[np.sort(idx)].astype(float)


def run_experiment(config: ExperimentConfig, out_dir=None) -> MetricsReport:
    """Assimilation and one-step forecast comparison on one split.

    Posterior metrics exclude the first ``spin_up`` steps.  When
    ``out_dir`` is given, writes ``metrics.csv``, ``series_assimilation.csv``,
    ``series_forecast.csv`` and the requested field snapshots.
    """
    _require(Path(config.dataset) / "manifest.json", "dataset")
    ds = Dataset(config.dataset)
    needs_model = "lacgkn" in config.da_methods or "lacgkn" in config.forecast_methods
    model = header = None
    if needs_model:
        _require(config.weights, "weights")
        model = LaCGKN.load(config.weights)
        header = json.loads(Path(config.weights).with_suffix(".json").read_text())
    n_split = ds.split_length(config.split)
    n_steps = n_split if config.n_steps is None else min(config.n_steps, n_split)
    if n_steps <= config.spin_up + 1:
        raise DatasetError("evaluation window is not longer than the spin-up")
    rec = ds.load_window(config.split, 0, n_steps)
    train = ds.load_split("train")
    rng = np.random.default_rng([config.tracer_seed, 5])
    pool = rec["positions"].shape[1]
    if config.n_tracers > pool:
        raise DatasetError(f"cannot draw {config.n_tracers} tracers from {pool}")
    sel = np.sort(rng.choice(pool, size=config.n_tracers, replace=False))
    psi = rec["psi"].astype(float)
    pos = rec["positions"][:, sel].astype(float)
    u1 = angular_embed(pos)
    params = ds.qg_params()
    m = ds.manifest

    report = MetricsReport()
    # artifact locations are left out: the manifest text and weights header identify the content
    identity = {k: v for k, v in asdict(config).items() if k not in ("dataset", "weights")}
    report.fingerprint = fingerprint(identity, (Path(config.dataset) / "manifest.json").read_text(), header)
    s = config.spin_up
    posteriors = {}

    for method in config.da_methods:
        t0 = time.perf_counter()
        if method == "lacgkn":
            out = model.assimilate(u1)
            post = out["psi"]
            if "std" in out:
                report.spread[method] = out["std"].mean(axis=-1)
        elif method == "climatology":
            post = np.broadcast_to(bl.climatology(train["psi"]), psi.shape)
        elif method == "eakf":
            ens = bl.EnsembleConfig(config.eakf_members, config.eakf_inflation, config.eakf_loc_radius,
                                    config.eakf_obs_var or m.obs_noise_std**2)
            init = _eakf_init(train["psi"], config.eakf_members, config.seed)
            out = bl.eakf_assimilate(pos, params, ens, config.seed, m.subsample, init, m.tracer_sigma)
            post = out["mean"]
            report.spread[method] = out["spread"].mean(axis=(1, 2, 3))
        else:  # oi
            coef = bl.fit_layer_regression(train["psi"], params)
            init = bl.climatology(train["psi"])
            post = bl.oi_assimilate(pos, params, bl.OIConfig(config.oi_sigma_b, config.oi_loc_radius), m.dt_obs,
                                    m.subsample, init, coef, m.obs_noise_std, m.tracer_sigma)
        report.seconds[f"assimilate:{method}"] = time.perf_counter() - t0
        posteriors[method] = post
        series = field_rmse_series(post, psi)
        report.series[(method, "assimilation")] = series
        report.add(method, "assimilation", {k: v[s:].mean() for k, v in series.items()})

    for method in config.forecast_methods:
        if method == "persistence":
            psi_pred = bl.persistence(psi[:-1])
            pos_pred = bl.persistence(pos[:-1])
        else:
            pred = model.one_step(u1[:-1], psi[:-1])
            psi_pred = pred["psi"]
            pos_pred = angular_unembed(pred["u1"])
        series = field_rmse_series(psi_pred, psi[1:])
        series["tracer"] = tracer_rmse_series(pos_pred, pos[1:])
        report.series[(method, "forecast")] = series
        report.add(method, "forecast", {k: v.mean() for k, v in series.items()})

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.table_csv())
        (out / "series_assimilation.csv").write_text(report.series_csv("assimilation"))
        (out / "series_forecast.csv").write_text(report.series_csv("forecast"))
        for step in config.snapshot_steps:
            if not 0 <= step < n_steps:
                raise ValueError(f"snapshot step {step} outside the evaluation window")
            write_snapshot(out / f"truth_{step:05d}", psi[step], {"step": step})
            for method, post in posteriors.items():
                write_snapshot(out / f"{method}_{step:05d}", post[step], {"step": step, "method": method})
    return report


# -- benchmarks --------------------------------------------------------
@dataclass
class BenchConfig:
    dataset: str = ""
    weights: str = ""
    tracer_counts: tuple = (8, 16, 32)
    n_steps: int = 5
    repeats: int = 3
    eakf_members: int = 40
    eakf_loc_radius: float | None = 8.0
    seed: int = 0

    def __post_init__(self):
        self.tracer_counts = tuple(int(c) for c in self.tracer_counts)
        if self.n_steps < 1 or self.repeats < 1:
            raise ValueError("bench needs n_steps >= 1 and repeats >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**d)


def _elapsed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def bench(config: BenchConfig, model: LaCGKN | None = None, dataset: Dataset | None = None) -> list[dict]:
    """Best-of-repeats wall clock per assimilation step, LaCGKN against EAKF.

    Repeats sweep all tracer counts in turn, so slow drift in machine speed
    hits every count alike; the minimum over repeats discards interruptions.
    The same weights serve every tracer count.
    """
    ds = dataset if dataset is not None else Dataset(_require(Path(config.dataset) / "manifest.json", "dataset").parent)
    if model is None:
        _require(config.weights, "weights")
        model = LaCGKN.load(config.weights)
    rec = ds.load_window("test", 0, config.n_steps)
    train = ds.load_window("train", 0, min(ds.split_length("train"), 500))
    params = ds.qg_params()
    m = ds.manifest
    init = _eakf_init(train["psi"], config.eakf_members, config.seed)
    ens = bl.EnsembleConfig(config.eakf_members, 1.0, config.eakf_loc_radius, m.obs_noise_std**2)
    jobs = []
    for count in config.tracer_counts:
        if count > rec["positions"].shape[1]:
            raise DatasetError(f"cannot draw {count} tracers from {rec['positions'].shape[1]}")
        pos = rec["positions"][:, :count].astype(float)
        u1 = angular_embed(pos)
        jobs.append((lambda u1=u1: model.assimilate(u1, with_uncertainty=False),
                     lambda pos=pos: bl.eakf_assimilate(pos, params, ens, config.seed, m.subsample, init,
                                                        m.tracer_sigma)))
    t_cg = np.full(len(jobs), np.inf)
    t_en = np.full(len(jobs), np.inf)
    for _ in range(config.repeats):
        for i, (cg, en) in enumerate(jobs):
            t_cg[i] = min(t_cg[i], _elapsed(cg))
            t_en[i] = min(t_en[i], _elapsed(en))
    steps = config.n_steps
    return [{"n_tracers": c, "lacgkn_seconds": a / steps, "eakf_seconds": b / steps, "speedup": b / a}
            for c, a, b in zip(config.tracer_counts, t_cg, t_en)]


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_tracers", "lacgkn_seconds", "eakf_seconds", "speedup"])
    for r in rows:
        w.writerow([r["n_tracers"], repr(r["lacgkn_seconds"]), repr(r["eakf_seconds"]), repr(r["speedup"])])
    return buf.getvalue()
