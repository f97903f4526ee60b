"""An exactly conditional Gaussian tracer-flow system with a known linear decoder.

The latent state holds the Fourier coefficients of two stream-function
layers,

    psi_l(x, y) = a_l cos x + b_l sin x + c_l cos y + d_l sin y,

so ``psi = D z`` with a fixed linear ``D``.  The latent evolves by damped
rotations.  Each tracer's embedding ``e(x) = (cos x, sin x, cos y, sin y)``
is advanced by a linearised Euler step through the upper-layer velocity
``(psi_y, -psi_x)``:

    a^{n+1} = e(x^n) + dt J_e(x^n) B(x^n) z^n + sigma1 eps,   x^n = unembed(a^n)

which is linear in ``z`` given the observation.  Filtering with the true
coefficients is therefore the exact posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cgfilter import CGCoefficients, LatentPosterior, run_filter
from .tracers import TWO_PI

__all__ = ["SyntheticCGSystem"]


def _unembed(a):
    return np.mod(np.stack([np.arctan2(a[..., 1], a[..., 0]), np.arctan2(a[..., 3], a[..., 2])], axis=-1), TWO_PI)


@dataclass
class SyntheticCGSystem:
    grid_n: int = 16
    dt: float = 0.1
    rho: float = 0.98
    omega: tuple = (0.3, -0.2, 0.25, -0.15)  # rotation per coefficient pair
    amplitude: float = 1.0
    sigma1: float = 0.02
    seed: int = 0

    d_z = 8

    def __post_init__(self):
        n = self.grid_n
        c = np.arange(n) * (TWO_PI / n)
        yy, xx = np.meshgrid(c, c, indexing="ij")
        basis = np.stack([np.cos(xx), np.sin(xx), np.cos(yy), np.sin(yy)])  # (4, n, n)
        D = np.zeros((2, n, n, 8))
        D[0, ..., :4] = np.moveaxis(basis, 0, -1)
        D[1, ..., 4:] = np.moveaxis(basis, 0, -1)
        self.D = D.reshape(2 * n * n, 8)
        G2 = np.zeros((8, 8))
        for p, w in enumerate(self.omega):
            cs, sn = np.cos(w), np.sin(w)
            G2[2 * p: 2 * p + 2, 2 * p: 2 * p + 2] = self.rho * np.array([[cs, -sn], [sn, cs]])
        self.G2 = G2
        self.F2 = np.zeros(8)
        self.sigma2 = np.full(8, self.amplitude * np.sqrt(1 - self.rho**2))

    # -- coefficients ----------------------------------------------------
    def tracer_G(self, pos: np.ndarray) -> np.ndarray:
        """Per-tracer ``dt J_e B`` of shape (I, 4, d_z) at positions (I, 2)."""
        x, y = pos[:, 0], pos[:, 1]
        n_tr = len(pos)
        # u = psi_y = -c sin y + d cos y ; v = -psi_x = a sin x - b cos x
        B = np.zeros((n_tr, 2, 8))
        B[:, 0, 2] = -np.sin(y)
        B[:, 0, 3] = np.cos(y)
        B[:, 1, 0] = np.sin(x)
        B[:, 1, 1] = -np.cos(x)
        J = np.zeros((n_tr, 4, 2))
        J[:, 0, 0] = -np.sin(x)
        J[:, 1, 0] = np.cos(x)
        J[:, 2, 1] = -np.sin(y)
        J[:, 3, 1] = np.cos(y)
        return self.dt * J @ B

    def coefficients(self, u1: np.ndarray) -> CGCoefficients:
        """True coefficients at observation ``u1`` (I, 4)."""
        pos = _unembed(np.asarray(u1, float))
        e = np.stack([np.cos(pos[:, 0]), np.sin(pos[:, 0]), np.cos(pos[:, 1]), np.sin(pos[:, 1])], -1)
        G1 = self.tracer_G(pos).reshape(-1, 8)
        return CGCoefficients(e.ravel(), G1, self.F2, self.G2, np.full(G1.shape[0], self.sigma1), self.sigma2)

    def decode(self, z: np.ndarray) -> np.ndarray:
        n = self.grid_n
        z = np.asarray(z, float)
        return (z @ self.D.T).reshape(z.shape[:-1] + (2, n, n))

    # -- simulation ------------------------------------------------------
    def simulate(self, n_steps: int, n_tracers: int, seed: int | None = None) -> dict:
        """Sample a path: latents, fields and tracer embeddings for every step."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        z = self.amplitude * rng.standard_normal(8)
        pos = rng.uniform(0, TWO_PI, size=(n_tracers, 2))
        a = np.stack([np.cos(pos[:, 0]), np.sin(pos[:, 0]), np.cos(pos[:, 1]), np.sin(pos[:, 1])], -1)
        zs, us = [z], [a]
        for _ in range(n_steps - 1):
            c = self.coefficients(a)
            a_next = c.F1 + c.G1 @ z + self.sigma1 * rng.standard_normal(c.d_obs)
            z = self.F2 + self.G2 @ z + self.sigma2 * rng.standard_normal(8)
            a = a_next.reshape(n_tracers, 4)
            zs.append(z)
            us.append(a)
        zs = np.stack(zs)
        return {"z": zs, "u1": np.stack(us), "psi": self.decode(zs)}

    def oracle_posterior(self, u1_seq: np.ndarray, init: LatentPosterior) -> list[LatentPosterior]:
        """Exact filtering posteriors from the true coefficients."""
        u1_seq = np.asarray(u1_seq, float)
        obs = list(u1_seq.reshape(len(u1_seq), -1))
        return run_filter(lambda o: self.coefficients(o.reshape(-1, 4)), obs, init)
