import numpy as np
import pytest

from lagrangian_da import model as M
from lagrangian_da import nn
from lagrangian_da.cgfilter import LatentPosterior, run_filter
from lagrangian_da.model import (
    LaCGKN,
    SurrogateConfig,
    Trajectories,
    TrainingDivergedError,
    composite_loss,
    filter_tape,
    spectral_radius,
)
from lagrangian_da.nn import autodiff as ad
from lagrangian_da.synthetic import SyntheticCGSystem
from lagrangian_da.tracers import TWO_PI
from conftest import tiny_model_config
from gradcheck import module_errors


def random_u1(rng, n_tr, lead=()):
    return nn.angular_embed(rng.uniform(0, 2 * np.pi, lead + (n_tr, 2)))


@pytest.fixture
def model():
    m = LaCGKN(tiny_model_config())
    m.sigma1 = np.full(4, 0.05)
    return m


@pytest.fixture
def window(rng):
    psi = rng.standard_normal((3, 8, 2, 16, 16))
    return psi, random_u1(rng, 5, (3, 8))


def smooth(m):
    """Swap relu for tanh so finite differences are well posed."""
    for part in (m.encoder, m.decoder):
        for block in getattr(part, "blocks", []):
            if block.act is ad.relu:
                block.act = ad.tanh
    return m


# -- config ---------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ValueError):
        SurrogateConfig(N_l=10, N_b=10)
    with pytest.raises(ValueError):
        SurrogateConfig(lam_u=-1)
    with pytest.raises(ValueError):
        SurrogateConfig(n_c=0)
    with pytest.raises(ValueError):
        SurrogateConfig(grid_n=32, latent_hw=4)
    with pytest.raises(ValueError):
        SurrogateConfig.from_dict({"bogus": 1})


def test_config_round_trip():
    c = tiny_model_config(rank=None, sigma2="calibrate")
    assert SurrogateConfig.from_dict(c.to_dict()) == c


def test_default_latent_size():
    c = SurrogateConfig()
    assert c.d_z == 128 and c.K == 6 and c.rank == 32 and c.n_tracers == 16


# -- autoencoder ----------------------------------------------------------
def test_round_trip_shapes_and_zero_input(model):
    psi = np.zeros((3, 2, 16, 16))
    z = model.encode(psi)
    assert z.shape == (3, model.d_z)
    out = model.decode(z).value
    assert out.shape == psi.shape
    assert np.all(np.isfinite(out))


def test_shape_mismatch_raises(model):
    with pytest.raises(ValueError):
        model.encode(np.zeros((1, 2, 8, 8)))
    with pytest.raises(ValueError):
        model.decode(np.zeros((1, model.d_z + 1)))


# -- coefficients ---------------------------------------------------------
def test_swapping_tracers_swaps_blocks(model, rng):
    u1 = random_u1(rng, 4)
    perm = np.array([2, 0, 3, 1])
    a, b = model.eval_coefficients(u1), model.eval_coefficients(u1[perm])
    rows = (perm[:, None] * 4 + np.arange(4)).ravel()
    np.testing.assert_array_equal(b.F1, a.F1[rows])
    np.testing.assert_array_equal(b.G1, a.G1[rows])


def test_leading_block_independent_of_other_tracers(model, rng):
    u1 = random_u1(rng, 3)
    one, three = model.eval_coefficients(u1[:1]), model.eval_coefficients(u1)
    np.testing.assert_array_equal(one.F1, three.F1[:4])
    np.testing.assert_array_equal(one.G1, three.G1[:4])


def test_latent_coefficients_constant(model, rng):
    a, b = model.eval_coefficients(random_u1(rng, 3)), model.eval_coefficients(random_u1(rng, 5))
    assert a.F2.tobytes() == b.F2.tobytes()
    assert a.G2.tobytes() == b.G2.tobytes()


def test_uncalibrated_sigma1_raises(rng):
    m = LaCGKN(tiny_model_config())
    with pytest.raises(RuntimeError, match="run stage-1 calibration first"):
        m.eval_coefficients(random_u1(rng, 2))


def test_low_rank_parameter_count(model):
    c = model.config
    assert model.G2_module.num_parameters() == c.d_z * (2 * c.rank + 1) + c.rank


def test_fourier_features_drive_networks(model):
    assert model.f_net.layers[0].W.shape[0] == 2 + 4 * model.config.K


# -- forecast ---------------------------------------------------------------
def test_forecast_horizon_one_matches_algebra(model, rng):
    u1 = random_u1(rng, 3)
    z0 = rng.standard_normal(model.d_z)
    c = model.eval_coefficients(u1)
    out = model.forecast(u1, z0, 1)
    np.testing.assert_allclose(out["u1"][0], nn.renormalize_angular((c.F1 + c.G1 @ z0).reshape(3, 4)), atol=1e-12)
    np.testing.assert_allclose(out["z"][0], c.F2 + c.G2 @ z0, atol=1e-12)
    assert out["psi"].shape == (1, 2, 16, 16)


def test_identity_latent_dynamics_keep_z_constant(rng):
    m = LaCGKN(tiny_model_config(rank=None))
    m.G2_module.G.value = np.eye(m.d_z)
    z0 = rng.standard_normal(m.d_z)
    out = m.forecast(random_u1(rng, 2), z0, 5)
    np.testing.assert_allclose(out["z"], np.broadcast_to(z0, out["z"].shape), atol=1e-14)


def test_forecast_embeddings_on_unit_circle(model, rng):
    out = model.forecast(random_u1(rng, 4), rng.standard_normal(model.d_z), 3)
    u = out["u1"]
    np.testing.assert_allclose(u[..., 0] ** 2 + u[..., 1] ** 2, 1.0, atol=1e-12)


def test_forecast_horizon_validation(model, rng):
    with pytest.raises(ValueError):
        model.forecast(random_u1(rng, 1), np.zeros(model.d_z), 0)


def test_untrained_f_is_persistence(rng):
    # with zero correction networks the skip connection returns the input embedding
    m = LaCGKN(tiny_model_config())
    for p in list(m.f_net.parameters().values()) + list(m.g_net.parameters().values()):
        p.value = np.zeros_like(p.value)
    u1 = random_u1(rng, 3)
    f, _ = m.tracer_coefficients(u1)
    np.testing.assert_allclose(f.value, u1, atol=1e-15)


def test_spectral_radius_matches_eigenvalues(rng):
    A = rng.standard_normal((6, 6))
    assert abs(spectral_radius(A, iters=3000) / np.max(np.abs(np.linalg.eigvals(A))) - 1) < 0.02


# -- losses -------------------------------------------------------------------
def test_all_zero_weights_give_zero_loss(window):
    m = LaCGKN(tiny_model_config(lam_ae=0, lam_u=0, lam_z=0, lam_da=0))
    m.sigma1 = np.full(4, 0.05)
    loss, _ = composite_loss(m, *window, include_da=True)
    assert loss.value == 0.0


def test_window_too_short(model, window):
    psi, u1 = window
    with pytest.raises(ValueError):
        composite_loss(model, psi[:, :2], u1[:, :2], include_da=True)
    with pytest.raises(ValueError):
        composite_loss(model, psi[:, :1], u1[:, :1], include_da=False)


def test_da_term_ignores_warmup_truth(model, window):
    psi, u1 = window
    c = model.config
    _, base = composite_loss(model, psi, u1, include_da=True)
    changed = psi.copy()
    changed[:, 2: c.N_b + 1] += 10.0  # frames N_s+1..N_b feed neither forecast nor DA terms
    _, after = composite_loss(model, changed, u1, include_da=True)
    assert after["da"] == base["da"]
    changed[:, c.N_b + 1] += 1.0
    _, after = composite_loss(model, changed, u1, include_da=True)
    assert after["da"] != base["da"]


def test_da_window_length(monkeypatch):
    c = SurrogateConfig(N_l=100, N_b=20)
    seen = {}
    orig = ad.stack

    def spy(ts, axis=0):
        seen["n"] = len(ts)
        return orig(ts, axis)

    m = LaCGKN(tiny_model_config(N_l=100, N_b=20))
    m.sigma1 = np.full(4, 0.05)
    rng = np.random.default_rng(0)
    monkeypatch.setattr(ad, "stack", spy)
    composite_loss(m, rng.standard_normal((1, 101, 2, 16, 16)), random_u1(rng, 2, (1, 101)), include_da=True)
    assert seen["n"] == c.N_l - c.N_b == 80


def test_filter_tape_matches_cg_filter(model, rng):
    B, N, n_tr = 2, 5, 3
    u1 = random_u1(rng, n_tr, (B, N + 1))
    F1, G1 = model.observation_operator(u1[:, :N])
    init = model.init_posterior()
    mus = filter_tape(F1, G1, model.F2, model.G2(), model.sigma1_full(n_tr), model.sigma2,
                      u1[:, 1:].reshape(B, N, -1), init.mu, init.R)
    for b in range(B):
        ref = model.assimilate(u1[b], with_uncertainty=False)["mu_z"]
        got = np.stack([m.value[b] for m in mus])
        np.testing.assert_allclose(got, ref, atol=1e-10)


def test_lambda_da_zero_reduces_to_stage1_objective(window):
    m = LaCGKN(tiny_model_config(lam_da=0.0))
    m.sigma1 = np.full(4, 0.05)
    a, _ = composite_loss(m, *window, include_da=True)
    b, _ = composite_loss(m, *window, include_da=False)
    assert a.value == b.value


@pytest.mark.parametrize("autoencoder", ["conv", "linear"])
def test_composite_loss_gradient(autoencoder, window):
    kw = dict(autoencoder=autoencoder, N_s=1, N_l=5, N_b=2, rank=4)
    if autoencoder == "linear":
        kw.update(latent_hw=2)
    m = smooth(LaCGKN(tiny_model_config(**kw)))
    m.sigma1 = np.full(4, 0.3)
    psi, u1 = window
    errs = module_errors(m, lambda: composite_loss(m, psi[:1], u1[:1, :, :3], include_da=True)[0], n_dirs=20)
    assert errs.max() < 1e-4


def test_loss_terms_reported(model, window):
    _, terms = composite_loss(model, *window, include_da=True)
    assert set(terms) == {"ae", "u", "z", "da"}
    assert all(v >= 0 for v in terms.values())


# -- training -----------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(tiny_dataset):
    data = Trajectories.from_window(tiny_dataset.load_split("train"))
    m = LaCGKN(tiny_model_config())
    h1 = M.train_stage1(m, data)
    h2 = M.train_stage2(m, data)
    M.train_uncertainty(m, data)
    return m, data, h1, h2


def test_stage1_calibrates_positive_sigma1(trained):
    m, _, h1, h2 = trained
    assert m.sigma1.shape == (4,) and np.all(m.sigma1 > 0)
    assert h1[0]["stage"] == "stage1" and h2[0]["stage"] == "stage2"
    assert "da" in h2[0] and "da" not in h1[0]


def test_sigma1_is_one_step_rmse(tiny_dataset):
    data = Trajectories.from_window(tiny_dataset.load_split("train"))
    m = LaCGKN(tiny_model_config())
    M.train_stage1(m, data)
    pred = m.one_step(data.u1[:-1], data.psi[:-1])["u1_raw"]
    rmse = np.sqrt(np.mean((pred - data.u1[1:]) ** 2, axis=(0, 1)))
    np.testing.assert_allclose(m.sigma1, rmse, rtol=1e-10)


def test_calibrated_sigma2(tiny_dataset):
    data = Trajectories.from_window(tiny_dataset.load_split("train"))
    m = LaCGKN(tiny_model_config(sigma2="calibrate", stage1_iters=1))
    M.train_stage1(m, data)
    assert m.sigma2.shape == (m.d_z,) and np.all(m.sigma2 > 0)


def test_stage2_requires_stage1(tiny_dataset):
    data = Trajectories.from_window(tiny_dataset.load_split("train"))
    with pytest.raises(RuntimeError):
        M.train_stage2(LaCGKN(tiny_model_config()), data)


def test_divergence_restores_checkpoint(tiny_dataset, monkeypatch):
    data = Trajectories.from_window(tiny_dataset.load_split("train"))
    m = LaCGKN(tiny_model_config(stage1_epochs=2, stage1_iters=2))
    calls = {"n": 0}
    orig = M.composite_loss

    def flaky(*a, **k):
        calls["n"] += 1
        loss, terms = orig(*a, **k)
        if calls["n"] == 3:
            loss = loss * np.nan
        return loss, terms

    monkeypatch.setattr(M, "composite_loss", flaky)
    snaps = []
    with pytest.raises(TrainingDivergedError) as err:
        M.train_stage1(m, data, log_fn=lambda rec: snaps.append(m.snapshot_params()))
    assert err.value.stage == "stage1"
    for k, v in m.snapshot_params().items():
        np.testing.assert_array_equal(v, snaps[0][k])


def test_training_is_deterministic(tiny_dataset):
    data = Trajectories.from_window(tiny_dataset.load_split("train"))
    outs = []
    for _ in range(2):
        m = LaCGKN(tiny_model_config())
        M.train_stage1(m, data)
        outs.append(m.state_arrays())
    for k in outs[0]:
        assert outs[0][k].tobytes() == outs[1][k].tobytes()


def test_uncertainty_outputs_nonnegative(trained, rng):
    m, data, _, _ = trained
    res = m.assimilate(data.u1[:10, :4])
    assert res["std"].shape == (10, 2)
    assert np.all(res["std"] >= 0)


def test_uncertainty_regresses_constant():
    rng = np.random.default_rng(0)
    net = M.UncertaintyNet(2, 2, (8,), rng)
    u1 = random_u1(rng, 6, (200,))
    target = np.broadcast_to([0.3, 0.7], (200, 2))
    M.fit_uncertainty(net, u1, target, epochs=20, iters=25, batch=32, lr=1e-2)
    with ad.no_graph():
        pred = net(u1).value
    np.testing.assert_allclose(pred.mean(axis=0), [0.3, 0.7], rtol=0.05)


def test_uncertainty_field_mode(tiny_dataset):
    data = Trajectories.from_window(tiny_dataset.load_split("train"))
    m = LaCGKN(tiny_model_config(unc_mode="field"))
    M.train_stage1(m, data)
    M.train_uncertainty(m, data)
    assert m.assimilate(data.u1[:3, :4])["std"].shape == (3, 2 * 16 * 16)


# -- assimilation -------------------------------------------------------------
def test_assimilate_permutation_invariant(trained):
    m, data, _, _ = trained
    u1 = data.u1[:12, :6]
    perm = np.random.default_rng(1).permutation(6)
    a = m.assimilate(u1, with_uncertainty=False)["psi"]
    b = m.assimilate(u1[:, perm], with_uncertainty=False)["psi"]
    np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


def test_assimilate_with_more_tracers_than_trained(trained):
    m, data, _, _ = trained
    out = m.assimilate(data.u1[:5, : 2 * m.config.n_tracers])
    assert out["psi"].shape == (5, 2, 16, 16)


def test_inference_does_not_touch_solver(trained, monkeypatch):
    from lagrangian_da import qg

    def boom(*a, **k):
        raise AssertionError("solver used during inference")

    monkeypatch.setattr(qg.QGModel, "step_q", boom)
    monkeypatch.setattr(qg.QGModel, "__init__", boom)
    m, data, _, _ = trained
    m.assimilate(data.u1[:4, :3])
    m.forecast(data.u1[0, :3], np.zeros(m.d_z), 2)


def test_assimilate_matches_oracle_through_known_decoder(monkeypatch):
    sys = SyntheticCGSystem()
    path = sys.simulate(40, 5, seed=2)
    m = LaCGKN(tiny_model_config(autoencoder="linear", latent_hw=2, n_c=2))
    n = sys.grid_n
    W = sys.D.reshape(2, n, n, 8).transpose(1, 2, 0, 3).reshape(-1, 8).T
    m.decoder.map.W.value = W
    m.decoder.map.b.value = np.zeros(W.shape[1])
    monkeypatch.setattr(m, "eval_coefficients", sys.coefficients)
    init = LatentPosterior(np.zeros(8), 0.5 * np.eye(8))
    got = m.assimilate(path["u1"], init=init, with_uncertainty=False)["psi"]
    obs = list(path["u1"].reshape(40, -1))
    oracle = run_filter(lambda o: sys.coefficients(o.reshape(-1, 4)), obs, init)
    want = sys.decode(np.stack([p.mu for p in oracle]))
    np.testing.assert_allclose(got, want, atol=1e-8, rtol=0)


# -- persistence --------------------------------------------------------------
def test_save_load_round_trip(trained, tmp_path):
    m, data, _, _ = trained
    m.save(tmp_path / "w")
    back = LaCGKN.load(tmp_path / "w")
    assert back.config == m.config and back.unc_trained
    a = m.assimilate(data.u1[:6, :4])
    b = back.assimilate(data.u1[:6, :4])
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_load_rejects_shape_mismatch(trained, tmp_path):
    m, _, _, _ = trained
    arrs = m.state_arrays()
    arrs["F2"] = np.zeros(3)
    with pytest.raises(ValueError):
        LaCGKN(m.config).load_arrays(arrs)
    del arrs["F2"]
    with pytest.raises(KeyError):
        LaCGKN(m.config).load_arrays(arrs)


def test_encode_position_is_periodic():
    from lagrangian_da.model import encode_position

    pos = np.random.default_rng(0).uniform(0, TWO_PI, (20, 2))
    # the trigonometric features are periodic; the two raw coordinates are not
    a = encode_position(pos, 4)[:, 2:]
    b = encode_position(pos + TWO_PI, 4)[:, 2:]
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert encode_position(pos, 6).shape == (20, 26)
