"""Reference assimilation methods that use the true QG solver, plus naive baselines.

EAKF
    Ensemble adjustment Kalman filter on the augmented state
    ``[psi1, psi2 on the grid; angular embeddings of the simulated tracers]``
    with serial scalar updates, multiplicative inflation and Gaspari-Cohn
    localisation on the torus.
OI
    Optimal interpolation of pseudo-velocities obtained by differencing
    consecutive tracer positions, with a fixed Gaussian background
    covariance and a per-grid regression from the upper to the lower layer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .qg import QGBlowupError, QGModel, QGParams
from .tracers import TWO_PI, min_image, wrap

log = logging.getLogger(__name__)

__all__ = [
    "gaspari_cohn",
    "torus_distance",
    "EnsembleConfig",
    "eakf_scalar_update",
    "serial_eakf_update",
    "eakf_assimilate",
    "OIConfig",
    "fit_layer_regression",
    "oi_gain",
    "oi_assimilate",
    "climatology",
    "persistence",
]


def gaspari_cohn(distance, c: float) -> np.ndarray:
    """Fifth-order compactly supported taper; 1 at zero, 0 beyond ``2c``."""
    if c <= 0:
        raise ValueError("localisation radius must be positive")
    r = np.abs(np.asarray(distance, float)) / c
    out = np.zeros_like(r)
    a = r <= 1
    b = (r > 1) & (r < 2)
    ra = r[a]
    out[a] = -0.25 * ra**5 + 0.5 * ra**4 + 0.625 * ra**3 - 5.0 / 3.0 * ra**2 + 1.0
    rb = r[b]
    out[b] = rb**5 / 12.0 - 0.5 * rb**4 + 0.625 * rb**3 + 5.0 / 3.0 * rb**2 - 5.0 * rb + 4.0 - 2.0 / (3.0 * rb)
    return np.clip(out, 0.0, 1.0)


def torus_distance(p, q, n: int) -> np.ndarray:
    """Minimal-image Euclidean distance in grid units between positions in radians."""
    d = min_image(np.asarray(p, float) - np.asarray(q, float)) * (n / TWO_PI)
    return np.sqrt(np.sum(d**2, axis=-1))


# -- EAKF --------------------------------------------------------------
@dataclass(frozen=True)
class EnsembleConfig:
    n_members: int = 40
    inflation: float = 1.0  # multiplies prior anomalies
    loc_radius: float | None = 8.0  # grid units; None disables localisation
    obs_var: float = 0.01**2  # in embedding coordinates
    init_tracer_std: float = 0.01
    tracer_noise: bool = True

    def __post_init__(self):
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least 2 members")
        if self.inflation <= 0:
            raise ValueError("inflation must be positive")
        if self.loc_radius is not None and self.loc_radius <= 0:
            raise ValueError("localisation radius must be positive")
        if self.obs_var <= 0:
            raise ValueError("observation variance must be positive")


def eakf_scalar_update(y_ens: np.ndarray, y_obs: float, r: float):
    """Observation-space adjustment for one scalar.

    Returns the increments to ``y_ens`` and the prior variance, or
    ``(None, 0.0)`` when the ensemble has no spread.  The adjusted ensemble
    has the Kalman posterior mean and (sample) variance.
    """
    m = y_ens.mean()
    dev = y_ens - m
    var = float(dev @ dev) / (len(y_ens) - 1)
    if var <= 0:
        return None, 0.0
    post_var = 1.0 / (1.0 / var + 1.0 / r)
    post_mean = post_var * (m / var + y_obs / r)
    return post_mean + np.sqrt(post_var / var) * dev - y_ens, var


def serial_eakf_update(X: np.ndarray, obs: np.ndarray, obs_index: np.ndarray, r, loc=None) -> np.ndarray:
    """Assimilate scalars one at a time into ensemble ``X`` of shape (N_e, d).

    ``obs_index[j]`` is the state component observed by ``obs[j]``; ``loc``
    is an optional (p, d) taper applied to the regression coefficients.
    """
    X = np.array(X, float, copy=True)
    n_e = X.shape[0]
    r = np.broadcast_to(np.asarray(r, float), (len(obs),))
    for j, (y, k) in enumerate(zip(obs, obs_index)):
        dy, var = eakf_scalar_update(X[:, k], float(y), float(r[j]))
        if dy is None:
            log.info("skipping observation %d: zero ensemble variance", j)
            continue
        anom = X - X.mean(axis=0)
        beta = (anom[:, k] @ anom) / ((n_e - 1) * var)
        if loc is not None:
            beta = beta * loc[j]
        X += dy[:, None] * beta[None, :]
    return X


def _embed(pos):
    return np.stack([np.cos(pos[..., 0]), np.sin(pos[..., 0]), np.cos(pos[..., 1]), np.sin(pos[..., 1])], axis=-1)


def _unembed(emb):
    return wrap(np.stack([np.arctan2(emb[..., 1], emb[..., 0]), np.arctan2(emb[..., 3], emb[..., 2])], axis=-1))


def _bilinear_batched(field, pos):
    """``field`` (B, n, n), ``pos`` (B, I, 2) -> (B, I)."""
    n = field.shape[-1]
    g = pos / (TWO_PI / n)
    i0 = np.floor(g).astype(int)
    f = g - i0
    ix0, iy0 = i0[..., 0] % n, i0[..., 1] % n
    ix1, iy1 = (ix0 + 1) % n, (iy0 + 1) % n
    b = np.arange(field.shape[0])[:, None]
    fx, fy = f[..., 0], f[..., 1]
    return ((1 - fx) * (1 - fy) * field[b, iy0, ix0] + fx * (1 - fy) * field[b, iy0, ix1]
            + (1 - fx) * fy * field[b, iy1, ix0] + fx * fy * field[b, iy1, ix1])


def _grid_points(n):
    c = np.arange(n) * (TWO_PI / n)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=-1)  # (n*n, 2), ordered [iy, ix]


def _member_forecast(model: QGModel, q, pos, n_sub, sigma, rng):
    dt = model.params.dt
    for _ in range(n_sub):
        snap = model.snapshot(q)
        u = _bilinear_batched(snap.u[:, 0], pos)
        v = _bilinear_batched(snap.v[:, 0], pos)
        pos = pos + np.stack([u, v], axis=-1) * dt
        if sigma > 0:
            pos = pos + sigma * np.sqrt(dt) * rng.standard_normal(pos.shape)
        pos = wrap(pos)
        q = model.step_q(q)
        if not np.all(np.isfinite(q)):
            raise QGBlowupError(float("nan"))
    return q, pos


def eakf_assimilate(positions: np.ndarray, params: QGParams, config: EnsembleConfig, seed: int,
                    substeps: int, init_psi: np.ndarray, tracer_sigma: float = 0.1) -> dict:
    """Cycle forecast and analysis over an observed tracer series.

    Parameters
    ----------
    positions : (T, I, 2) observed tracer positions.
    params : true solver parameters (perfect model).
    substeps : solver steps between observations.
    init_psi : (N_e, 2, n, n) initial member stream functions, e.g. drawn
        from the training split.

    Returns
    -------
    dict with posterior ``mean`` and ``spread`` of shape (T, 2, n, n) and the
    posterior mean tracer positions ``tracers`` (T, I, 2).
    """
    positions = np.asarray(positions, float)
    T, n_tr = positions.shape[:2]
    n_e = config.n_members
    if init_psi.shape[0] != n_e:
        raise ValueError("init_psi must hold one field per member")
    model = QGModel(params)
    n = params.grid_n
    rng = np.random.default_rng([seed, 11])
    d_flow = 2 * n * n
    grid = _grid_points(n)
    obs_index = d_flow + np.arange(4 * n_tr)

    psi = np.array(init_psi, float)
    pos = wrap(positions[0][None] + config.init_tracer_std * rng.standard_normal((n_e, n_tr, 2)))
    means, spreads, tracer_means = [], [], []
    sig = tracer_sigma if config.tracer_noise else 0.0
    for t in range(T):
        if t > 0:
            q = model.state_from_psi(psi).q
            q, pos = _member_forecast(model, q, pos, substeps, sig, rng)
            psi = model.snapshot(q).psi
        X = np.concatenate([psi.reshape(n_e, d_flow), _embed(pos).reshape(n_e, 4 * n_tr)], axis=1)
        if config.inflation != 1.0:
            mean = X.mean(axis=0)
            X = mean + config.inflation * (X - mean)
        loc = None
        if config.loc_radius is not None:
            loc = _localisation(grid, positions[t], _unembed(X[:, d_flow:].reshape(n_e, n_tr, 4).mean(0)),
                                n, config.loc_radius)
        X = serial_eakf_update(X, _embed(positions[t]).ravel(), obs_index, config.obs_var, loc)
        psi = X[:, :d_flow].reshape(n_e, 2, n, n)
        pos = _unembed(X[:, d_flow:].reshape(n_e, n_tr, 4))
        means.append(psi.mean(axis=0))
        spreads.append(psi.std(axis=0, ddof=1))
        tracer_means.append(_unembed(_embed(pos).mean(axis=0)))
    return {"mean": np.stack(means), "spread": np.stack(spreads), "tracers": np.stack(tracer_means)}


def _localisation(grid, obs_pos, tracer_pos, n, radius):
    """(4I, d) taper: flow entries by grid distance, tracer entries by tracer distance."""
    d_grid = torus_distance(obs_pos[:, None, :], grid[None, :, :], n)  # (I, n*n)
    w_grid = gaspari_cohn(d_grid, radius)
    d_tr = torus_distance(obs_pos[:, None, :], tracer_pos[None, :, :], n)  # (I, I)
    w_tr = np.repeat(gaspari_cohn(d_tr, radius), 4, axis=1)
    w = np.concatenate([w_grid, w_grid, w_tr], axis=1)
    return np.repeat(w, 4, axis=0)


# -- OI ----------------------------------------------------------------
@dataclass(frozen=True)
class OIConfig:
    sigma_b: float = 1.0  # background velocity error std
    loc_radius: float = 2.0  # Gaussian length scale, grid units
    obs_std: float | None = None  # pseudo-velocity error; None derives it from the noise levels

    def __post_init__(self):
        if self.sigma_b <= 0:
            raise ValueError("sigma_b must be positive")
        if self.loc_radius < 0:
            raise ValueError("localisation radius must be non-negative")


def fit_layer_regression(psi_train: np.ndarray, params: QGParams) -> np.ndarray:
    """Per-grid slope of lower- on upper-layer velocity anomalies, shape (n, n)."""
    if len(psi_train) == 0:
        raise ValueError("empty training split")
    model = QGModel(params)
    ph = model.to_spectral(np.asarray(psi_train, float))
    u, v = model.velocity_from_psi(ph)
    u = u - u.mean(axis=0)
    v = v - v.mean(axis=0)
    num = np.sum(u[:, 0] * u[:, 1] + v[:, 0] * v[:, 1], axis=0)
    den = np.sum(u[:, 0] ** 2 + v[:, 0] ** 2, axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _nearest_cells(pos, n):
    idx = np.rint(np.asarray(pos) / (TWO_PI / n)).astype(int) % n
    return idx[..., 1] * n + idx[..., 0]  # flat [iy, ix]


def oi_gain(cell_obs: np.ndarray, n: int, sigma_b: float, radius: float, obs_std: float) -> np.ndarray:
    """Gain ``K = B H^T (H B H^T + R)^{-1}`` of shape (n*n, p) for observations at grid cells."""
    grid = _grid_points(n)
    obs_loc = grid[cell_obs]
    d_go = torus_distance(grid[:, None, :], obs_loc[None, :, :], n)
    d_oo = torus_distance(obs_loc[:, None, :], obs_loc[None, :, :], n)
    if radius == 0:
        bgo = sigma_b**2 * (d_go == 0)
        boo = sigma_b**2 * (d_oo == 0)
    else:
        bgo = sigma_b**2 * np.exp(-0.5 * (d_go / radius) ** 2)
        boo = sigma_b**2 * np.exp(-0.5 * (d_oo / radius) ** 2)
    S = boo + obs_std**2 * np.eye(len(cell_obs))
    return np.linalg.solve(S, bgo.T).T


def _psi_from_velocity(model, du, dv):
    """Stream-function increment whose velocity best matches ``(du, dv)``."""
    uh, vh = model.to_spectral(du), model.to_spectral(dv)
    lap = np.where(model.k2 > 0, -model.k2, 1.0)
    ph = (model.ddy(uh) - model.ddx(vh)) / lap
    ph[..., 0, 0] = 0.0
    return model.to_grid(ph)


def oi_assimilate(positions: np.ndarray, params: QGParams, config: OIConfig, dt_obs: float, substeps: int,
                  init_psi: np.ndarray, layer_coef: np.ndarray | None, obs_noise_std: float = 0.01,
                  tracer_sigma: float = 0.1) -> np.ndarray:
    """Posterior mean stream functions (T, 2, n, n) by cycled OI.

    The first step has no velocity observation and returns the background.
    """
    if dt_obs <= 0:
        raise ValueError("dt_obs must be positive")
    if layer_coef is None:
        raise ValueError("layer regression coefficients are missing; fit them on the training split")
    positions = np.asarray(positions, float)
    model = QGModel(params)
    n = params.grid_n
    obs_std = config.obs_std
    if obs_std is None:
        obs_std = float(np.sqrt(2 * obs_noise_std**2 / dt_obs**2 + tracer_sigma**2 / dt_obs))
    psi = np.array(init_psi, float)
    out = [psi.copy()]
    for t in range(1, len(positions)):
        q = model.run(model.state_from_psi(psi), substeps).q
        ph = model.psi_from_q(q)
        psi = model.to_grid(ph)
        disp = min_image(positions[t] - positions[t - 1])
        vel_obs = disp / dt_obs
        mid = wrap(positions[t - 1] + 0.5 * disp)
        cells = _nearest_cells(mid, n)
        u_b, v_b = model.velocity_from_psi(ph)
        innov_u = vel_obs[:, 0] - u_b[0].ravel()[cells]
        innov_v = vel_obs[:, 1] - v_b[0].ravel()[cells]
        K = oi_gain(cells, n, config.sigma_b, config.loc_radius, obs_std)
        du = (K @ innov_u).reshape(n, n)
        dv = (K @ innov_v).reshape(n, n)
        dpsi1 = _psi_from_velocity(model, du, dv)
        dpsi2 = _psi_from_velocity(model, layer_coef * du, layer_coef * dv)
        psi = psi + np.stack([dpsi1, dpsi2])
        out.append(psi.copy())
    return np.stack(out)


# -- naive baselines ---------------------------------------------------
def climatology(psi_train: np.ndarray) -> np.ndarray:
    """Time mean of the training split, shape (2, n, n)."""
    psi_train = np.asarray(psi_train, float)
    if psi_train.shape[0] == 0:
        raise ValueError("empty training split")
    return psi_train.mean(axis=0)


def persistence(x):
    """Forecast that the next state equals the current one."""
    return x
