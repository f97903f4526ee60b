import numpy as np
import pytest

from lagrangian_da.dataset import DatasetError
from lagrangian_da.evaluation import (
    BenchConfig,
    ExperimentConfig,
    MetricsReport,
    bench,
    bench_csv,
    field_rmse,
    fingerprint,
    read_snapshot,
    rmse,
    run_experiment,
    tracer_rmse,
    write_snapshot,
)
from lagrangian_da.model import LaCGKN
from lagrangian_da.tracers import TWO_PI

from conftest import TINY_DATA

TINY_TEST_STEPS = TINY_DATA["n_test"]


def test_rmse_examples():
    a = np.array([1.0, -2.0, 0.5])
    assert rmse(a, a) == 0.0
    assert rmse(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(np.sqrt(12.5), abs=1e-15)
    assert rmse(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(3.5355339, abs=1e-7)


def test_rmse_errors():
    with pytest.raises(ValueError, match="empty"):
        rmse(np.array([]), np.array([]))
    with pytest.raises(ValueError, match="mismatch"):
        rmse(np.zeros(2), np.zeros(3))


def test_tracer_rmse_wraps():
    eps = 1e-4
    d = tracer_rmse(np.array([[0.0, 1.0]]), np.array([[TWO_PI - eps, 1.0]]))
    assert d == pytest.approx(eps / np.sqrt(2), rel=1e-9)


def test_field_rmse_layers():
    truth = np.zeros((3, 2, 4, 4))
    psi = truth.copy()
    psi[:, 0] = 2.0
    r = field_rmse(psi, truth)
    assert r["upper"] == pytest.approx(2.0) and r["lower"] == 0.0
    assert r["two_layer"] == pytest.approx(np.sqrt(2.0))


def test_report_rejects_negative_and_lookup():
    rep = MetricsReport()
    rep.add("m", "assimilation", {"upper": 0.5, "bogus": 1.0})
    assert rep.get("m", "assimilation", "upper") == 0.5
    with pytest.raises(KeyError):
        rep.get("m", "assimilation", "bogus")
    with pytest.raises(ValueError):
        rep.add("m", "forecast", {"tracer": -1.0})
    with pytest.raises(ValueError):
        rep.add("m", "forecast", {"tracer": float("nan")})


def test_snapshot_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 5, 5)).astype(np.float32)
    write_snapshot(tmp_path / "snap", a, {"step": 3})
    b, head = read_snapshot(tmp_path / "snap")
    assert b.tobytes() == a.tobytes() and head["meta"] == {"step": 3} and head["shape"] == [2, 5, 5]


def test_fingerprint_sensitivity():
    base = fingerprint({"a": 1, "b": [1, 2]}, "manifest", {"format": "f", "version": "1", "seed": "0"})
    assert base == fingerprint({"b": [1, 2], "a": 1}, "manifest", {"seed": "0", "version": "1", "format": "f"})
    assert base != fingerprint({"a": 2, "b": [1, 2]}, "manifest", {"format": "f", "version": "1", "seed": "0"})
    assert base != fingerprint({"a": 1, "b": [1, 2]}, "other", {"format": "f", "version": "1", "seed": "0"})
    assert base != fingerprint({"a": 1, "b": [1, 2]}, "manifest", {"format": "f", "version": "1", "seed": "1"})


def test_experiment_config_validation():
    with pytest.raises(ValueError, match="unknown experiment config keys"):
        ExperimentConfig.from_dict({"dataset": "x", "typo": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(da_methods=("magic",))
    with pytest.raises(ValueError):
        ExperimentConfig(forecast_methods=("magic",))
    with pytest.raises(ValueError):
        ExperimentConfig(spin_up=-1)
    with pytest.raises(ValueError):
        BenchConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        BenchConfig(repeats=0)


def _exp(tiny_dataset, tiny_weights, **kw):
    base = dict(dataset=str(tiny_dataset.path), weights=str(tiny_weights), n_tracers=4, spin_up=5,
                da_methods=("lacgkn", "climatology", "eakf", "oi"), eakf_members=4, snapshot_steps=(0, 7))
    base.update(kw)
    return ExperimentConfig(**base)


def test_run_experiment_outputs(tmp_path, tiny_dataset, tiny_weights):
    rep = run_experiment(_exp(tiny_dataset, tiny_weights), tmp_path)
    for m in ("lacgkn", "climatology", "eakf", "oi"):
        for t in ("upper", "lower", "two_layer"):
            assert rep.get(m, "assimilation", t) >= 0
    for m in ("lacgkn", "persistence"):
        assert rep.get(m, "forecast", "tracer") >= 0
    assert all(r["rmse"] >= 0 for r in rep.rows)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "method,task,target,rmse,fingerprint"
    assert all(line.endswith(rep.fingerprint) for line in lines[1:])
    series = (tmp_path / "series_assimilation.csv").read_text().splitlines()
    assert len(series) == 1 + TINY_TEST_STEPS
    assert "eakf:spread" in series[0]
    truth, _ = read_snapshot(tmp_path / "truth_00007")
    np.testing.assert_array_equal(truth, tiny_dataset.load_window("test", 7, 1)["psi"][0])
    assert (tmp_path / "oi_00000.bin").exists()


def test_spin_up_excluded(tiny_dataset, tiny_weights):
    rep = run_experiment(_exp(tiny_dataset, tiny_weights, da_methods=("climatology",), spin_up=10))
    s = rep.series[("climatology", "assimilation")]["two_layer"]
    assert rep.get("climatology", "assimilation", "two_layer") == pytest.approx(s[10:].mean(), abs=1e-15)


def test_persistence_forecast_matches_lagged_rmse(tiny_dataset, tiny_weights):
    rep = run_experiment(_exp(tiny_dataset, tiny_weights, da_methods=("climatology",)))
    psi = tiny_dataset.load_split("test")["psi"].astype(float)
    want = np.mean(np.sqrt(((psi[1:] - psi[:-1]) ** 2).mean(axis=(1, 2, 3))))
    assert rep.get("persistence", "forecast", "two_layer") == pytest.approx(want, rel=1e-12)


def test_run_experiment_identical_bytes(tmp_path, tiny_dataset, tiny_weights):
    cfg = _exp(tiny_dataset, tiny_weights)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("metrics.csv", "series_assimilation.csv", "series_forecast.csv", "eakf_00007.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_experiment_errors(tmp_path, tiny_dataset, tiny_weights):
    with pytest.raises(FileNotFoundError):
        run_experiment(_exp(tiny_dataset, tiny_weights, dataset=str(tmp_path / "none")))
    with pytest.raises(FileNotFoundError):
        run_experiment(_exp(tiny_dataset, tiny_weights, weights=str(tmp_path / "none")))
    with pytest.raises(DatasetError, match="spin-up"):
        run_experiment(_exp(tiny_dataset, tiny_weights, spin_up=50))
    with pytest.raises(DatasetError):
        run_experiment(_exp(tiny_dataset, tiny_weights, n_tracers=100))
    with pytest.raises(ValueError, match="snapshot"):
        run_experiment(_exp(tiny_dataset, tiny_weights, da_methods=("climatology",), snapshot_steps=(999,)),
                       tmp_path / "c")


def test_bench_rows(tiny_dataset, tiny_weights):
    cfg = BenchConfig(tracer_counts=(2, 4, 8), n_steps=2, repeats=1, eakf_members=4)
    model = LaCGKN.load(tiny_weights)
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    rows = bench(cfg, model=model, dataset=tiny_dataset)
    assert [r["n_tracers"] for r in rows] == [2, 4, 8]
    assert all(r["lacgkn_seconds"] > 0 and r["eakf_seconds"] > 0 for r in rows)
    text = bench_csv(rows)
    assert text.splitlines()[0] == "n_tracers,lacgkn_seconds,eakf_seconds,speedup" and len(text.splitlines()) == 4
    after = model.state_arrays()  # one set of weights serves every tracer count unchanged
    assert all(np.array_equal(before[k], after[k]) for k in before)
    with pytest.raises(DatasetError):
        bench(BenchConfig(tracer_counts=(99,), n_steps=1, repeats=1, eakf_members=4), model=model,
              dataset=tiny_dataset)


def _median_seconds(fn, repeats=3):
    import time

    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def test_latent_filter_cost_independent_of_grid():
    from lagrangian_da.model import SurrogateConfig
    from lagrangian_da.nn import angular_embed

    u1 = angular_embed(np.random.default_rng(0).uniform(0, TWO_PI, (40, 16, 2)))
    times = []
    for n, ch in ((32, (16, 32)), (64, (16, 32, 32))):
        m = LaCGKN(SurrogateConfig(grid_n=n, conv_channels=ch))
        m.sigma1 = np.full(4, 0.05)
        assert m.d_z == 128
        m.assimilate(u1[:2], decode=False)
        times.append(_median_seconds(lambda: m.assimilate(u1, decode=False)))
    assert abs(times[1] / times[0] - 1) < 0.2, times


def test_eakf_cost_grows_linearly_with_members():
    from lagrangian_da.baselines import EnsembleConfig, eakf_assimilate
    from lagrangian_da.qg import QGParams

    params = QGParams.desk_scale(32)
    rng = np.random.default_rng(0)
    pos = np.mod(np.cumsum(0.01 * rng.standard_normal((3, 16, 2)), axis=0) + 1.0, TWO_PI)
    ns = np.array([10, 20, 40])
    times = []
    for n_e in ns:
        init = 0.1 * rng.standard_normal((n_e, 2, 32, 32))
        times.append(_median_seconds(lambda: eakf_assimilate(pos, params, EnsembleConfig(n_members=int(n_e)), 0,
                                                             10, init)))
    slope = np.polyfit(np.log(ns), np.log(times), 1)[0]
    assert 0.7 < slope < 1.4, (slope, times)
