"""Preference vector -> conditioning token at inference time.

Selection here is a plain argmax over utility values at the target reward,
not a percentile rank: no reference distribution exists at inference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ensemble import UtilityEnsemble
from .errors import DataError, ShapeError
from .labeler import DEFAULT_TOKEN, augment_prompt
from .reward_stats import NormalizationParams, RunningBounds, normalize

log = logging.getLogger(__name__)

_CUBE_TOL = 1e-9  # round-off from the normalization arithmetic


@dataclass(frozen=True)
class RewardBounds:
    r_min: np.ndarray
    r_max: np.ndarray

    def __post_init__(self):
        if np.shape(self.r_min) != np.shape(self.r_max):
            raise ShapeError("r_min and r_max differ in length")
        if np.any(np.asarray(self.r_min) > np.asarray(self.r_max)):
            raise DataError("r_min must not exceed r_max")

    @classmethod
    def from_running(cls, bounds: RunningBounds) -> "RewardBounds":
        return cls(bounds.z_min.copy(), bounds.z_max.copy())


def check_preference(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise ShapeError("preference must be a vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
        raise DataError(f"preference weights must lie in [0, 1], got {w.tolist()}")
    return w


def preference_to_reward(w, bounds: RewardBounds) -> np.ndarray:
    """``z_i = w_i * (r_max_i - r_min_i) + r_min_i`` per dimension."""
    w = check_preference(w)
    if w.shape != np.shape(bounds.r_min):
        raise ShapeError(f"preference has {w.size} weights, bounds have {np.size(bounds.r_min)}")
    return w * (np.asarray(bounds.r_max) - np.asarray(bounds.r_min)) + np.asarray(bounds.r_min)


def select_inference_index(z_target, ensemble: UtilityEnsemble, params: NormalizationParams) -> int:
    z = normalize(params, z_target)
    if np.any(z < -_CUBE_TOL) or np.any(z > 1 + _CUBE_TOL):
        log.warning("target %s falls outside the unit cube after normalization; clamping", np.round(z, 4).tolist())
    z = np.clip(z, 0.0, 1.0)
    return int(np.argmax(ensemble.scores(z)))


def build_inference_prompt(
    x: str,
    w: Sequence[float],
    bounds: RewardBounds,
    ensemble: UtilityEnsemble,
    params: NormalizationParams,
    token: str = DEFAULT_TOKEN,
) -> str:
    idx = select_inference_index(preference_to_reward(w, bounds), ensemble, params)
    return augment_prompt(x, idx, token)
