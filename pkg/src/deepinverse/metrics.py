"""Reconstruction quality metrics and the per-recovery result record."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError

SUCCESS_THRESHOLD = 0.1


def _pair(estimate, truth):
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise DimensionError(f"estimate {estimate.shape} vs truth {truth.shape}")
    return estimate, truth


def psnr(estimate, truth):
    """Peak signal-to-noise ratio in dB.

    The peak is the maximum of the ground-truth image itself, not a fixed
    dynamic range. Returns ``math.inf`` when the estimate is exact.
    """
    estimate, truth = _pair(estimate, truth)
    mse = float(np.mean((estimate - truth) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(truth.max())
    if peak == 0.0:
        raise DomainError("PSNR is undefined for a ground truth with zero peak")
    return 10.0 * math.log10(peak * peak / mse)


def nmse(estimate, truth):
    """``||estimate - truth||^2 / ||truth||^2``."""
    estimate, truth = _pair(estimate, truth)
    energy = float(np.sum(truth * truth))
    if energy == 0.0:
        raise DomainError("NMSE is undefined for an all-zero ground truth")
    return float(np.sum((estimate - truth) ** 2)) / energy


def success(estimate, truth):
    """1 if the recovery NMSE is at most 0.1 (inclusive), else 0."""
    return int(nmse(estimate, truth) <= SUCCESS_THRESHOLD)


@dataclass
class RecoveryResult:
    """Output of one recovery run.

    ``history`` holds one per-iteration scalar whose meaning depends on the
    solver (objective value for TV, residual norm for AMP/IHT); ``details``
    carries any solver-specific extras.
    """

    estimate: np.ndarray
    wall_time: float
    iterations: int = 1
    converged: bool = True
    method: str = ""
    aborted: bool = False
    history: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.wall_time < 0:
            raise DomainError(f"wall time must be non-negative, got {self.wall_time}")
