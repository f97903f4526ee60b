"""Lagrangian data assimilation with a conditional Gaussian Koopman surrogate.

Subpackages and modules
-----------------------
qg          two-layer quasi-geostrophic solver
tracers     passive tracer transport and noisy observations
dataset     on-disk trajectory datasets
cgfilter    closed-form conditional Gaussian filter
nn          tape autodiff, layers, optimiser and weight files
model       the LaCGKN surrogate and its training stages
baselines   EAKF, optimal interpolation and naive references
evaluation  metrics, experiment runner and benchmarks
"""

from .cgfilter import CGCoefficients, FilterError, LatentPosterior, cg_update, run_filter
from .qg import FlowSnapshot, QGBlowupError, QGModel, QGParams, QGState
from .tracers import ObservationRecord, TracerSet, observe, tracer_step, velocity_at

__version__ = "0.1.0"

__all__ = [
    "CGCoefficients",
    "FilterError",
    "LatentPosterior",
    "cg_update",
    "run_filter",
    "FlowSnapshot",
    "QGBlowupError",
    "QGModel",
    "QGParams",
    "QGState",
    "ObservationRecord",
    "TracerSet",
    "observe",
    "tracer_step",
    "velocity_at",
]
