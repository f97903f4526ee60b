"""Command-line interface.

Every subcommand reads one JSON config with the sections ``paths``,
``simulate``, ``data``, ``model``, ``experiment``, ``forecast`` and
``bench``; absent sections take their defaults.  ``--set a.b=value``
overrides single keys (values are parsed as JSON when possible).

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

SECTIONS = ("paths", "simulate", "data", "model", "experiment", "forecast", "bench")
SIMULATE_DEFAULTS = {"grid_n": 32, "n_steps": 1000, "record_every": 50, "init_pv_std": 10.0, "topography": "standard",
                     "seed": 0, "qg": {}}
FORECAST_DEFAULTS = {"split": "test", "start": 0, "horizon": 10, "n_tracers": 16, "tracer_seed": 0}
PATH_DEFAULTS = {"dataset": None, "weights": None}

log = logging.getLogger("lagrangian_da")


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config section {parts[0]!r}")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-object key {key!r}")
    node[parts[-1]] = _parse_value(value)


def load_config(path, overrides=()) -> dict:
    cfg = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def _section(cfg, name, defaults):
    sec = dict(cfg.get(name, {}))
    unknown = set(sec) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    out = dict(defaults)
    out.update(sec)
    return out


def _dataclass_from(cls, d: dict, name: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from exc


def _paths(cfg, out_dir: Path) -> dict:
    p = _section(cfg, "paths", PATH_DEFAULTS)
    return {"dataset": Path(p["dataset"]) if p["dataset"] else out_dir / "dataset",
            "weights": Path(p["weights"]) if p["weights"] else out_dir / "weights" / "lacgkn"}


def _with_seed(d: dict, seed):
    if seed is not None:
        d = dict(d)
        d["seed"] = seed
    return d


# -- subcommands -------------------------------------------------------
def cmd_simulate(cfg, args, out: Path):
    from .qg import QGModel, QGParams

    s = _section(cfg, "simulate", SIMULATE_DEFAULTS)
    s = _with_seed(s, args.seed)
    qg_over = dict(s["qg"])
    try:
        params = QGParams.desk_scale(int(s["grid_n"]), **qg_over)
    except TypeError as exc:
        raise ConfigError(f"invalid simulate.qg: {exc}") from exc
    if s["topography"] == "flat":
        params = params.with_(topography=None)
    elif s["topography"] != "standard":
        raise ConfigError("simulate.topography must be 'standard' or 'flat'")
    model = QGModel(params)
    state = model.random_state(np.random.default_rng(int(s["seed"])), float(s["init_pv_std"]))
    rows = []
    for n in range(int(s["n_steps"]) + 1):
        if n % int(s["record_every"]) == 0:
            rows.append([n, repr(state.time), repr(float(model.energy(state.q))),
                         repr(float(model.enstrophy(state.q)))])
        if n < int(s["n_steps"]):
            state = model.step(state)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "time", "energy", "enstrophy"])
    w.writerows(rows)
    (out / "simulate_diagnostics.csv").write_text(buf.getvalue())
    from .evaluation import write_snapshot

    write_snapshot(out / "simulate_final_psi", model.snapshot(state).psi, {"time": state.time})
    print(f"simulated {s['n_steps']} steps; wrote {out / 'simulate_diagnostics.csv'}")


def cmd_gen_data(cfg, args, out: Path):
    from .dataset import GenerationConfig, generate

    gc = _dataclass_from(GenerationConfig, _with_seed(cfg.get("data", {}), args.seed), "data")
    path = _paths(cfg, out)["dataset"]
    generate(gc, path)
    print(f"wrote dataset to {path}")


def _load_dataset(path):
    from .dataset import Dataset

    if not (Path(path) / "manifest.json").exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return Dataset(path)


def cmd_train(cfg, args, out: Path):
    from .model import LaCGKN, SurrogateConfig, Trajectories, train_stage1, train_stage2, train_uncertainty

    paths = _paths(cfg, out)
    ds = _load_dataset(paths["dataset"])
    mc = dict(cfg.get("model", {}))
    mc.setdefault("grid_n", ds.manifest.grid_n)
    mc = _with_seed(mc, args.seed)
    config = _dataclass_from(SurrogateConfig, mc, "model")
    train = Trajectories.from_window(ds.load_split("train"))
    model = LaCGKN(config)
    history = []
    train_stage1(model, train, log_fn=history.append)
    if config.stage2_epochs > 0 and config.stage2_iters > 0:
        train_stage2(model, train, log_fn=history.append)
    if config.unc_epochs > 0 and config.unc_iters > 0:
        val = Trajectories.from_window(ds.load_split("val"))
        train_uncertainty(model, val, log_fn=history.append)
    model.save(paths["weights"], extra_meta={"dataset_manifest_crc": _text_crc(ds.path / "manifest.json")})
    log_path = Path(str(paths["weights"]) + "_training_log.json")
    log_path.write_text(json.dumps(history, indent=1, default=float))
    print(f"wrote weights {paths['weights']} and {log_path}")


def _text_crc(path):
    import zlib

    return zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF


def _weights(paths):
    from .model import LaCGKN

    stem = paths["weights"]
    if not Path(stem).with_suffix(".json").exists():
        raise FileNotFoundError(f"weights not found: {stem}")
    return LaCGKN.load(stem)


def _experiment_config(cfg, args, out):
    from .evaluation import ExperimentConfig

    paths = _paths(cfg, out)
    ec = dict(cfg.get("experiment", {}))
    ec.setdefault("dataset", str(paths["dataset"]))
    ec.setdefault("weights", str(paths["weights"]))
    return _dataclass_from(ExperimentConfig, _with_seed(ec, args.seed), "experiment")


def cmd_assimilate(cfg, args, out: Path):
    from .evaluation import write_snapshot

    ec = _experiment_config(cfg, args, out)
    ds = _load_dataset(ec.dataset)
    model = _weights({"weights": ec.weights})
    from .nn import angular_embed

    n = ds.split_length(ec.split) if ec.n_steps is None else min(ec.n_steps, ds.split_length(ec.split))
    rec = ds.load_window(ec.split, 0, n)
    rng = np.random.default_rng([ec.tracer_seed, 5])
    sel = np.sort(rng.choice(rec["positions"].shape[1], size=ec.n_tracers, replace=False))
    res = model.assimilate(angular_embed(rec["positions"][:, sel].astype(float)))
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out / "posterior_psi", res["psi"], {"split": ec.split, "tracers": sel.tolist()})
    if "std" in res:
        write_snapshot(out / "posterior_std", res["std"], {"split": ec.split})
    print(f"assimilated {n} steps; wrote {out / 'posterior_psi.bin'}")


def cmd_forecast(cfg, args, out: Path):
    from .evaluation import field_rmse_series, tracer_rmse_series
    from .nn import angular_embed, angular_unembed

    paths = _paths(cfg, out)
    f = _section(cfg, "forecast", FORECAST_DEFAULTS)
    ds = _load_dataset(paths["dataset"])
    model = _weights(paths)
    h = int(f["horizon"])
    if h < 1:
        raise ConfigError("forecast.horizon must be >= 1")
    rec = ds.load_window(f["split"], int(f["start"]), h + 1)
    rng = np.random.default_rng([int(f["tracer_seed"]), 5])
    sel = np.sort(rng.choice(rec["positions"].shape[1], size=int(f["n_tracers"]), replace=False))
    psi = rec["psi"].astype(float)
    pos = rec["positions"][:, sel].astype(float)
    z0 = model.encode_many(psi[:1])[0]
    roll = model.forecast(angular_embed(pos[0]), z0, h)
    fs = field_rmse_series(roll["psi"], psi[1:])
    ts = tracer_rmse_series(angular_unembed(roll["u1"]), pos[1:])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lead", "tracer", "upper", "lower", "two_layer"])
    for i in range(h):
        w.writerow([i + 1, repr(float(ts[i])), repr(float(fs["upper"][i])), repr(float(fs["lower"][i])),
                    repr(float(fs["two_layer"][i]))])
    out.mkdir(parents=True, exist_ok=True)
    (out / "forecast_rmse.csv").write_text(buf.getvalue())
    print(f"wrote {out / 'forecast_rmse.csv'}")


def cmd_evaluate(cfg, args, out: Path):
    from .evaluation import run_experiment

    ec = _experiment_config(cfg, args, out)
    report = run_experiment(ec, out)
    print(report.table_csv(), end="")


def cmd_bench(cfg, args, out: Path):
    from .evaluation import BenchConfig, bench, bench_csv

    paths = _paths(cfg, out)
    bc = dict(cfg.get("bench", {}))
    bc.setdefault("dataset", str(paths["dataset"]))
    bc.setdefault("weights", str(paths["weights"]))
    config = _dataclass_from(BenchConfig, _with_seed(bc, args.seed), "bench")
    rows = bench(config, model=_weights({"weights": config.weights}), dataset=_load_dataset(config.dataset))
    out.mkdir(parents=True, exist_ok=True)
    text = bench_csv(rows)
    (out / "bench.csv").write_text(text)
    print(text, end="")


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "assimilate": cmd_assimilate,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lagrangian-da",
                                description="Lagrangian data assimilation with a learned latent filter.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", "-c", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key, e.g. model.lr=0.0005")
    p.add_argument("--seed", type=int, default=None, help="seed applied to every pipeline stage")
    p.add_argument("--out-dir", default="out", help="directory for outputs (default: out)")
    p.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .cgfilter import FilterError
    from .dataset import DatasetError
    from .model import TrainingDivergedError
    from .qg import QGBlowupError

    try:
        cfg = load_config(args.config, args.overrides)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=args.threads)
        else:
            limiter = nullcontext()
        with limiter:
            COMMANDS[args.command](cfg, args, Path(args.out_dir))
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (QGBlowupError, FilterError, TrainingDivergedError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
