"""Passive tracers advected by the upper-layer velocity on the torus.

Noise is keyed by ``(seed, step)`` and indexed by the tracer id, so a
tracer gets the same draw regardless of its slot in the array.  Permuting
tracers therefore commutes with stepping, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .qg import FlowSnapshot

TWO_PI = 2.0 * np.pi

__all__ = [
    "TracerSet",
    "ObservationRecord",
    "wrap",
    "min_image",
    "velocity_at",
    "tracer_step",
    "observe",
    "initial_tracers",
]


def wrap(x):
    """Map coordinates into ``[0, 2pi)``."""
    x = np.mod(x, TWO_PI)
    # np.mod returns 2pi for tiny negative inputs
    return np.where(x >= TWO_PI, 0.0, x)


def min_image(d):
    """Minimal-image representative of a periodic difference, in ``[-pi, pi)``."""
    return np.mod(np.asarray(d) + np.pi, TWO_PI) - np.pi


@dataclass(frozen=True)
class TracerSet:
    positions: np.ndarray  # (I, 2) columns x, y
    ids: np.ndarray  # (I,) int, index into the noise pool
    sigma_x: float = 0.1
    sigma_y: float = 0.1
    rng_seed: int = 0
    step: int = 0
    pool_size: int | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, float)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise ValueError("positions must have shape (I, 2) with I >= 1")
        if np.any(pos < 0) or np.any(pos >= TWO_PI):
            raise ValueError("tracer coordinates must lie in [0, 2pi)")
        ids = np.asarray(self.ids, int)
        if ids.shape != (pos.shape[0],):
            raise ValueError("ids must have one entry per tracer")
        pool = self.pool_size if self.pool_size is not None else int(ids.max()) + 1
        if ids.min() < 0 or ids.max() >= pool:
            raise ValueError("tracer ids outside the noise pool")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "pool_size", pool)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def take(self, index) -> "TracerSet":
        return replace(self, positions=self.positions[index], ids=self.ids[index])


@dataclass(frozen=True)
class ObservationRecord:
    n: int
    positions: np.ndarray  # (I, 2)
    obs_noise_std: float
    ids: np.ndarray | None = None


def initial_tracers(n_tracers: int, rng: np.random.Generator, center: float = np.pi,
                    spread: float = 0.1, sigma: float = 0.1, seed: int = 0) -> TracerSet:
    """Tracers drawn from ``N(center, spread^2)`` per coordinate, wrapped."""
    pos = wrap(center + spread * rng.standard_normal((n_tracers, 2)))
    return TracerSet(pos, np.arange(n_tracers), sigma, sigma, seed, 0, n_tracers)


def _bilinear(field: np.ndarray, positions: np.ndarray) -> np.ndarray:
    n = field.shape[-1]
    h = TWO_PI / n
    gx = positions[:, 0] / h
    gy = positions[:, 1] / h
    ix = np.floor(gx).astype(int)
    iy = np.floor(gy).astype(int)
    fx = gx - ix
    fy = gy - iy
    ix0, iy0 = ix % n, iy % n
    ix1, iy1 = (ix + 1) % n, (iy + 1) % n
    return ((1 - fx) * (1 - fy) * field[iy0, ix0] + fx * (1 - fy) * field[iy0, ix1]
            + (1 - fx) * fy * field[iy1, ix0] + fx * fy * field[iy1, ix1])


def _spectral_point_values(psi: np.ndarray, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(dpsi/dy, -dpsi/dx)`` at arbitrary points by direct Fourier summation."""
    n = psi.shape[-1]
    psi_hat = np.fft.rfft2(psi) / n**2
    kx = np.arange(n // 2 + 1, dtype=float)
    ky = np.fft.fftfreq(n) * n
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    coef = psi_hat * w[None, :]
    ex = np.exp(1j * positions[:, 0:1] * kx[None, :])  # (I, nkx)
    ey = np.exp(1j * positions[:, 1:2] * ky[None, :])  # (I, nky)
    dpsi_dx = np.real(np.einsum("iy,yx,ix->i", ey, coef * (1j * kx[None, :]), ex))
    dpsi_dy = np.real(np.einsum("iy,yx,ix->i", ey, coef * (1j * ky[:, None]), ex))
    return dpsi_dy, -dpsi_dx


def velocity_at(positions, flow: FlowSnapshot, mode: str = "bilinear", layer: int = 0) -> np.ndarray:
    """Velocity of layer ``layer`` at tracer positions, shape ``(I, 2)``."""
    pos = positions.positions if isinstance(positions, TracerSet) else np.asarray(positions, float)
    if mode == "bilinear":
        u = _bilinear(flow.u[layer], pos)
        v = _bilinear(flow.v[layer], pos)
    elif mode == "spectral_direct":
        u, v = _spectral_point_values(flow.psi[layer], pos)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return np.stack([u, v], axis=-1)


def _keyed_normals(seed: int, step: int, ids: np.ndarray, pool_size: int, tag: int) -> np.ndarray:
    rng = np.random.default_rng([tag, seed, step])
    return rng.standard_normal((pool_size, 2))[ids]


def tracer_step(tracers: TracerSet, flow: FlowSnapshot, dt: float, mode: str = "bilinear") -> TracerSet:
    """Euler-Maruyama step ``x <- wrap(x + v(x) dt + sigma sqrt(dt) xi)``."""
    vel = velocity_at(tracers, flow, mode)
    x = tracers.positions + vel * dt
    sig = np.array([tracers.sigma_x, tracers.sigma_y])
    if np.any(sig):
        xi = _keyed_normals(tracers.rng_seed, tracers.step, tracers.ids, tracers.pool_size, 0)
        x = x + sig * np.sqrt(dt) * xi
    return replace(tracers, positions=wrap(x), step=tracers.step + 1)


def observe(tracers: TracerSet, noise_std: float, seed: int, n: int | None = None) -> ObservationRecord:
    """Noisy, wrapped copy of the tracer positions at time index ``n``."""
    n = tracers.step if n is None else n
    pos = tracers.positions
    if noise_std > 0:
        pos = wrap(pos + noise_std * _keyed_normals(seed, n, tracers.ids, tracers.pool_size, 1))
    return ObservationRecord(n, pos, noise_std, tracers.ids.copy())
