"""Pseudo-spectral two-layer quasi-geostrophic model on the doubly periodic torus.

The prognostic variables are the layer potential vorticity disturbances

    q1 = lap(psi1) + kd^2/2 (psi2 - psi1)
    q2 = lap(psi2) + kd^2/2 (psi1 - psi2) + h

stored as real-FFT coefficients (``numpy.fft.rfft2`` layout, last axis is x).
Grid arrays are indexed ``[iy, ix]`` on ``[0, 2pi)^2``.

Time stepping is fourth-order Runge-Kutta with an exact integrating factor
for the hyperviscosity, and the quadratic Jacobian is dealiased with the
2/3 rule.  All array routines accept arbitrary leading batch axes, so an
ensemble of shape ``(n_members, 2, n, n//2 + 1)`` steps in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "QGBlowupError",
    "QGParams",
    "QGState",
    "FlowSnapshot",
    "QGModel",
    "standard_topography",
    "rescaled_hyperviscosity",
]


class QGBlowupError(FloatingPointError):
    """Raised when the solver produces non-finite coefficients."""

    def __init__(self, time: float):
        super().__init__(f"QG blow-up: non-finite state at t={time:.6g}")
        self.time = time


def standard_topography(n: int) -> np.ndarray:
    """``h(x, y) = 40 cos x + 80 cos 2y`` sampled on an ``n x n`` grid."""
    x = 2 * np.pi * np.arange(n) / n
    return 40.0 * np.cos(x)[None, :] + 80.0 * np.cos(2 * x)[:, None]


def rescaled_hyperviscosity(n: int, ref_nu: float = 1e-12, ref_n: int = 128, s: int = 4) -> float:
    """Hyperviscosity giving the same damping rate at the highest retained mode.

    The reference value ``ref_nu`` is quoted for an ``ref_n`` grid; on an
    ``n`` grid the highest mode kept by the 2/3 rule is ``n // 3``.
    """
    k_ref = ref_n // 3
    k_new = n // 3
    return ref_nu * (k_ref / k_new) ** (2 * s)


@dataclass(frozen=True)
class QGParams:
    kd: float = 10.0
    beta: float = 22.0
    U: float = 1.0
    kappa: float = 9.0
    nu: float = 1e-12
    s: int = 4
    dt: float = 2e-3
    grid_n: int = 128
    topography: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.kd > 0:
            raise ValueError("kd must be positive")
        if self.kappa < 0 or self.nu < 0:
            raise ValueError("kappa and nu must be non-negative")
        if int(self.s) != self.s or self.s < 1:
            raise ValueError("hyperviscosity order s must be an integer >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        n = self.grid_n
        if n < 4 or n & (n - 1):
            raise ValueError("grid_n must be a power of two >= 4")
        if self.topography is not None and np.shape(self.topography) != (n, n):
            raise ValueError(f"topography must have shape ({n}, {n})")

    @classmethod
    def desk_scale(cls, grid_n: int = 32, **overrides) -> "QGParams":
        """Standard turbulent regime with hyperviscosity rescaled to ``grid_n``."""
        s = overrides.pop("s", 4)
        kw = dict(
            grid_n=grid_n,
            s=s,
            nu=rescaled_hyperviscosity(grid_n, s=s),
            topography=standard_topography(grid_n),
        )
        kw.update(overrides)
        return cls(**kw)

    def with_(self, **changes) -> "QGParams":
        return replace(self, **changes)


@dataclass
class QGState:
    """Spectral PV of both layers, ``q[..., 0]`` upper and ``q[..., 1]`` lower."""

    q: np.ndarray  # (..., 2, n, n//2+1) complex
    time: float = 0.0

    @property
    def q1(self) -> np.ndarray:
        return self.q[..., 0, :, :]

    @property
    def q2(self) -> np.ndarray:
        return self.q[..., 1, :, :]

    def copy(self) -> "QGState":
        return QGState(self.q.copy(), self.time)


@dataclass
class FlowSnapshot:
    """Grid stream functions and velocities; ``u[..., l]`` / ``v[..., l]`` for layer ``l``."""

    psi: np.ndarray  # (..., 2, n, n)
    u: np.ndarray
    v: np.ndarray

    @property
    def psi1(self):
        return self.psi[..., 0, :, :]

    @property
    def psi2(self):
        return self.psi[..., 1, :, :]

    @property
    def u1v1(self):
        return self.u[..., 0, :, :], self.v[..., 0, :, :]

    @property
    def u2v2(self):
        return self.u[..., 1, :, :], self.v[..., 1, :, :]

    @property
    def grid_n(self) -> int:
        return self.psi.shape[-1]


class QGModel:
    """Spectral operators for one parameter set.

    Construction caches wavenumbers, the 2x2 inversion, the dealiasing
    mask, the integrating factors and the transformed topography.
    """

    def __init__(self, params: QGParams):
        self.params = params
        n = params.grid_n
        self.n = n
        self.kx = np.arange(n // 2 + 1, dtype=float)[None, :]
        self.ky = (np.fft.fftfreq(n) * n)[:, None]
        self.kx_full = np.broadcast_to(self.kx, (n, n // 2 + 1))
        self.ky_full = np.broadcast_to(self.ky, (n, n // 2 + 1))
        self.k2 = self.kx**2 + self.ky**2
        cutoff = n // 3
        self.dealias = (np.abs(self.kx) <= cutoff) & (np.abs(self.ky) <= cutoff)

        a = params.kd**2 / 2.0
        k2 = self.k2
        det = k2 * (k2 + 2 * a)
        det[0, 0] = 1.0  # gauge mode, zeroed below
        self._inv_diag = -(k2 + a) / det
        self._inv_off = -a / det
        self._inv_diag[0, 0] = 0.0
        self._inv_off[0, 0] = 0.0

        h = params.topography
        self.h_hat = np.zeros((n, n // 2 + 1), complex) if h is None else np.fft.rfft2(h) * self.dealias

        damping = params.nu * self.k2**params.s
        self._if_full = np.exp(-damping * params.dt)
        self._if_half = np.exp(-damping * params.dt / 2)

    # -- transforms -------------------------------------------------------
    def to_grid(self, f_hat: np.ndarray) -> np.ndarray:
        return np.fft.irfft2(f_hat, s=(self.n, self.n))

    def to_spectral(self, f: np.ndarray) -> np.ndarray:
        return np.fft.rfft2(f)

    def ddx(self, f_hat):
        return 1j * self.kx * f_hat

    def ddy(self, f_hat):
        return 1j * self.ky * f_hat

    # -- elliptic inversion ----------------------------------------------
    def psi_from_q(self, q: np.ndarray) -> np.ndarray:
        """Stream functions from PV, ``q`` of shape ``(..., 2, n, n//2+1)``.

        Topography is removed from the lower layer before inverting; the
        k=0 mode of both layers is set to zero.
        """
        q1 = q[..., 0, :, :]
        q2 = q[..., 1, :, :] - self.h_hat
        psi = np.empty_like(q)
        psi[..., 0, :, :] = self._inv_diag * q1 + self._inv_off * q2
        psi[..., 1, :, :] = self._inv_off * q1 + self._inv_diag * q2
        return psi

    def q_from_psi(self, psi: np.ndarray) -> np.ndarray:
        a = self.params.kd**2 / 2.0
        p1 = psi[..., 0, :, :]
        p2 = psi[..., 1, :, :]
        q = np.empty_like(psi)
        q[..., 0, :, :] = -self.k2 * p1 + a * (p2 - p1)
        q[..., 1, :, :] = -self.k2 * p2 + a * (p1 - p2) + self.h_hat
        return q

    def velocity_from_psi(self, psi_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Grid velocity ``(dpsi/dy, -dpsi/dx)``."""
        return self.to_grid(self.ddy(psi_hat)), -self.to_grid(self.ddx(psi_hat))

    def jacobian(self, a_hat: np.ndarray, b_hat: np.ndarray) -> np.ndarray:
        """Dealiased ``J(A, B) = A_x B_y - A_y B_x`` in spectral space."""
        a_hat = a_hat * self.dealias
        b_hat = b_hat * self.dealias
        ax = self.to_grid(self.ddx(a_hat))
        ay = self.to_grid(self.ddy(a_hat))
        bx = self.to_grid(self.ddx(b_hat))
        by = self.to_grid(self.ddy(b_hat))
        return self.to_spectral(ax * by - ay * bx) * self.dealias

    # -- dynamics --------------------------------------------------------
    def tendency(self, q: np.ndarray) -> np.ndarray:
        """All terms of dq/dt except hyperviscosity."""
        p = self.params
        a = p.kd**2 / 2.0
        u1, u2 = p.U, -p.U
        psi = self.psi_from_q(q)
        p1 = psi[..., 0, :, :]
        p2 = psi[..., 1, :, :]
        ikx = 1j * self.kx
        lap = -self.k2

        out = -self.jacobian(psi, q)
        out[..., 0, :, :] -= ikx * (p.beta * p1 + u1 * lap * p1 + a * (u1 * p2 - u2 * p1))
        out[..., 1, :, :] -= ikx * (p.beta * p2 + u2 * lap * p2 + a * (u2 * p1 - u1 * p2) + u2 * self.h_hat)
        out[..., 1, :, :] -= p.kappa * lap * p2
        return out * self.dealias

    def step_q(self, q: np.ndarray, forcing_hat: np.ndarray | None = None) -> np.ndarray:
        """One integrating-factor RK4 step on spectral PV (no time bookkeeping)."""
        dt = self.params.dt
        e1, e2 = self._if_full, self._if_half
        k1 = self.tendency(q)
        k2 = self.tendency(e2 * (q + 0.5 * dt * k1))
        k3 = self.tendency(e2 * q + 0.5 * dt * k2)
        k4 = self.tendency(e1 * q + dt * e2 * k3)
        q_new = e1 * q + dt / 6.0 * (e1 * k1 + 2 * e2 * (k2 + k3) + k4)
        if forcing_hat is not None:
            q_new = q_new + np.sqrt(dt) * forcing_hat * self.dealias
        return q_new

    def step(self, state: QGState, noise: tuple[float, float] | None = None,
             rng: np.random.Generator | None = None) -> QGState:
        """Advance ``state`` by one ``dt``.

        ``noise`` gives per-layer white-in-time forcing strengths; the
        forcing is spatially white on the grid, scaled by ``sqrt(dt)``.
        """
        forcing = None
        if noise is not None and any(noise):
            if rng is None:
                raise ValueError("stochastic forcing requires an rng")
            white = rng.standard_normal(state.q.shape[:-2] + (self.n, self.n))
            white *= np.asarray(noise, float).reshape((2, 1, 1))
            forcing = self.to_spectral(white)
        q_new = self.step_q(state.q, forcing)
        t_new = state.time + self.params.dt
        if not np.all(np.isfinite(q_new)):
            raise QGBlowupError(t_new)
        return QGState(q_new, t_new)

    def run(self, state: QGState, n_steps: int, **kw) -> QGState:
        for _ in range(n_steps):
            state = self.step(state, **kw)
        return state

    def snapshot(self, state: QGState | np.ndarray) -> FlowSnapshot:
        q = state.q if isinstance(state, QGState) else state
        psi_hat = self.psi_from_q(q)
        u, v = self.velocity_from_psi(psi_hat)
        return FlowSnapshot(self.to_grid(psi_hat), u, v)

    # -- state construction and diagnostics ------------------------------
    def random_state(self, rng: np.random.Generator, std: float = 10.0) -> QGState:
        """Initial condition ``q1 = q2 ~ N(0, std^2)`` pointwise, dealiased.

        The topography is added to the lower layer so that the sampled field
        is the dynamic part of the PV.
        """
        q0 = self.to_spectral(std * rng.standard_normal((self.n, self.n))) * self.dealias
        q = np.stack([q0, q0 + self.h_hat])
        return QGState(q, 0.0)

    def state_from_psi(self, psi: np.ndarray, time: float = 0.0) -> QGState:
        """PV state from grid stream functions ``(..., 2, n, n)``."""
        psi_hat = self.to_spectral(psi) * self.dealias
        psi_hat[..., 0, 0] = 0.0
        return QGState(self.q_from_psi(psi_hat), time)

    def _spectral_sum(self, f_hat_sq: np.ndarray) -> np.ndarray:
        # Parseval over the rfft half plane; interior kx columns count twice.
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return np.sum(f_hat_sq * w, axis=(-2, -1)) / self.n**4

    def energy(self, q: np.ndarray) -> np.ndarray:
        """Domain-mean total energy ``1/2 <|grad psi|^2 + kd^2/2 (psi1-psi2)^2>``."""
        psi = self.psi_from_q(q)
        a = self.params.kd**2 / 2.0
        kin = self.k2 * (np.abs(psi[..., 0, :, :]) ** 2 + np.abs(psi[..., 1, :, :]) ** 2)
        pot = a * np.abs(psi[..., 0, :, :] - psi[..., 1, :, :]) ** 2
        return 0.5 * self._spectral_sum(kin + pot)

    def enstrophy(self, q: np.ndarray) -> np.ndarray:
        """Domain-mean ``1/2 <q1^2 + q2^2>``."""
        return 0.5 * self._spectral_sum(np.abs(q[..., 0, :, :]) ** 2 + np.abs(q[..., 1, :, :]) ** 2)
