"""Closed-form filter for conditional Gaussian systems.

The surrogate model is

    u^{n+1} = F1(u^n) + G1(u^n) z^n + Sigma1 eps1
    z^{n+1} = F2(u^n) + G2(u^n) z^n + Sigma2 eps2

with diagonal noise strengths.  Given the observed path ``u^0..u^{n+1}``
the posterior of ``z^{n+1}`` is Gaussian with mean and covariance updated by
:func:`cg_update`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "CGCoefficients",
    "LatentPosterior",
    "FilterError",
    "cg_update",
    "run_filter",
    "default_init",
]

MAX_CONDITION = 1e12


class FilterError(np.linalg.LinAlgError):
    def __init__(self, message, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(message + where)
        self.step = step


@dataclass(frozen=True)
class CGCoefficients:
    F1: np.ndarray  # (d_obs,)
    G1: np.ndarray  # (d_obs, d_z)
    F2: np.ndarray  # (d_z,)
    G2: np.ndarray  # (d_z, d_z)
    Sigma1: np.ndarray  # (d_obs,) diagonal noise strength
    Sigma2: np.ndarray  # (d_z,)

    def __post_init__(self):
        d_obs, d_z = np.shape(self.G1)
        for name, shape in (("F1", (d_obs,)), ("F2", (d_z,)), ("G2", (d_z, d_z))):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        s1 = np.broadcast_to(np.asarray(self.Sigma1, float), (d_obs,))
        s2 = np.broadcast_to(np.asarray(self.Sigma2, float), (d_z,))
        if np.any(s1 <= 0):
            raise ValueError("Sigma1 entries must be positive")
        if np.any(s2 < 0):
            raise ValueError("Sigma2 entries must be non-negative")
        object.__setattr__(self, "Sigma1", s1)
        object.__setattr__(self, "Sigma2", s2)

    @property
    def d_obs(self) -> int:
        return self.G1.shape[0]

    @property
    def d_z(self) -> int:
        return self.G1.shape[1]


@dataclass(frozen=True)
class LatentPosterior:
    mu: np.ndarray
    R: np.ndarray


def default_init(d_z: int, std: float = 0.1) -> LatentPosterior:
    """Zero mean with covariance ``std^2 I``."""
    return LatentPosterior(np.zeros(d_z), std**2 * np.eye(d_z))


def _psd_floor(r):
    r = 0.5 * (r + r.T)
    w, v = np.linalg.eigh(r)
    if w[0] >= 0:
        return r
    return (v * np.maximum(w, 0.0)) @ v.T


def cg_update(post: LatentPosterior, coeffs: CGCoefficients, obs_next, step: int | None = None,
              floor: bool = True) -> LatentPosterior:
    """One analytic posterior update from ``u^n`` coefficients and observation ``u^{n+1}``."""
    mu, R = post.mu, post.R
    F1, G1, F2, G2 = coeffs.F1, coeffs.G1, coeffs.F2, coeffs.G2
    G1R = G1 @ R
    S = G1R @ G1.T + np.diag(coeffs.Sigma1**2)
    S = 0.5 * (S + S.T)
    ev = np.linalg.eigvalsh(S)
    if ev[0] <= 0 or ev[-1] / ev[0] > MAX_CONDITION:
        raise FilterError("innovation covariance is numerically singular", step)
    cross = G1R @ G2.T  # (d_obs, d_z) = G1 R G2^T
    Kt = cho_solve(cho_factor(S, lower=True), cross)  # K^T
    innov = np.asarray(obs_next, float) - F1 - G1 @ mu
    mu_new = F2 + G2 @ mu + Kt.T @ innov
    R_new = G2 @ R @ G2.T + np.diag(coeffs.Sigma2**2) - Kt.T @ cross
    R_new = _psd_floor(R_new) if floor else 0.5 * (R_new + R_new.T)
    return LatentPosterior(mu_new, R_new)


def run_filter(coeff_provider: Callable[[np.ndarray], CGCoefficients], obs_sequence: Sequence,
               init: LatentPosterior) -> list[LatentPosterior]:
    """Posteriors for ``z^0 .. z^N`` given observations ``u^0 .. u^N``.

    The coefficients for the update into step ``n+1`` are evaluated at the
    current observation ``u^n``.
    """
    out = [init]
    post = init
    for n in range(len(obs_sequence) - 1):
        coeffs = coeff_provider(obs_sequence[n])
        post = cg_update(post, coeffs, obs_sequence[n + 1], step=n + 1)
        out.append(post)
    return out
