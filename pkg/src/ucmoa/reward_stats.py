"""Return normalization and percentile-rank bookkeeping."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateRangeError, ParseError, ShapeError, StateError


@dataclass(frozen=True)
class RunningBounds:
    """Per-dimension extrema over every return seen so far."""

    z_min: np.ndarray
    z_max: np.ndarray

    @property
    def k(self) -> int:
        return len(self.z_min)

    @classmethod
    def from_samples(cls, samples) -> "RunningBounds":
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or len(samples) == 0:
            raise DataError("need a non-empty (n, K) array of returns")
        for idx, z in enumerate(samples):
            _check_finite(z, idx)
        return cls(samples.min(axis=0), samples.max(axis=0))

    def to_dict(self) -> dict:
        return {"z_min": self.z_min.tolist(), "z_max": self.z_max.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunningBounds":
        return cls(np.asarray(doc["z_min"], dtype=float), np.asarray(doc["z_max"], dtype=float))


def _check_finite(z: np.ndarray, label) -> None:
    if not np.all(np.isfinite(z)):
        raise DataError(f"sample {label}: non-finite reward component in {z.tolist()}")


def update_bounds(bounds: Optional[RunningBounds], z, label=None) -> RunningBounds:
    """Merge one return into the running extrema (``bounds=None`` starts fresh)."""
    z = np.asarray(z, dtype=float)
    _check_finite(z, label if label is not None else "?")
    if bounds is None:
        return RunningBounds(z.copy(), z.copy())
    if z.shape != bounds.z_min.shape:
        raise ShapeError(f"expected {bounds.k} reward components, got {z.shape[0] if z.ndim else 0}")
    return RunningBounds(np.minimum(bounds.z_min, z), np.maximum(bounds.z_max, z))


@dataclass(frozen=True)
class NormalizationParams:
    z_mid: np.ndarray
    d: float

    @classmethod
    def from_bounds(cls, bounds: RunningBounds) -> "NormalizationParams":
        return cls((bounds.z_min + bounds.z_max) / 2.0, float(np.max(bounds.z_max - bounds.z_min)))

    @property
    def k(self) -> int:
        return len(self.z_mid)


def normalize(params: NormalizationParams, z) -> np.ndarray:
    """Map a raw return (or a batch) into the unit cube with one shared scale.

    ``z_norm = (z - z_mid) / d + 1/2``; ``d`` is the widest per-dimension range,
    so dimensions keep their relative scale.
    """
    if not params.d > 0:
        raise DegenerateRangeError("all tracked returns are identical (d = 0)")
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.k:
        raise ShapeError(f"expected {params.k} reward components, got {z.shape[-1]}")
    return (z - params.z_mid) / params.d + 0.5


class PercentileTable:
    """Sorted reference scores per utility; ``scores`` has shape ``(M, N)``."""

    def __init__(self, scores):
        scores = np.asarray(scores, dtype=float)
        if scores.ndim != 2:
            raise ShapeError("scores must be an (M, N) array")
        self.scores = np.sort(scores, axis=1)

    @property
    def n_samples(self) -> int:
        return self.scores.shape[1]

    @property
    def m(self) -> int:
        return self.scores.shape[0]

    def percentiles(self, utility_scores) -> np.ndarray:
        """Percentiles for a column of scores ``(M,)`` or a matrix ``(M, n)``."""
        if self.n_samples == 0:
            raise StateError("percentile table is empty")
        u = np.asarray(utility_scores, dtype=float)
        single = u.ndim == 1
        u = u.reshape(self.m, -1)
        ranks = np.stack([np.searchsorted(self.scores[i], u[i], side="right") for i in range(self.m)])
        out = ranks / self.n_samples
        return out[:, 0] if single else out

    def to_dict(self) -> dict:
        return {"n": self.n_samples, "scores": self.scores.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PercentileTable":
        try:
            table = cls(doc["scores"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed percentile table: {exc}") from exc
        if table.n_samples != doc.get("n", table.n_samples):
            raise ParseError(f"declared n={doc['n']} but rows hold {table.n_samples} scores")
        return table


def build_percentile_table(score_matrix) -> PercentileTable:
    return PercentileTable(score_matrix)


def percentile_rank(table: PercentileTable, i: int, score: float) -> float:
    """Fraction of utility ``i``'s reference scores that are ``<= score``."""
    if table.n_samples == 0:
        raise StateError("percentile table is empty")
    row = table.scores[i]
    return int(np.searchsorted(row, score, side="right")) / table.n_samples


def select_max_index(percentiles: Sequence[float]) -> int:
    """Argmax with ties going to the lowest index."""
    p = np.asarray(percentiles, dtype=float)
    if p.size == 0:
        raise StateError("no percentiles to select from")
    if not np.all(np.isfinite(p)):
        raise DataError("percentiles must be finite")
    return int(np.argmax(p))


def save_table(table: PercentileTable, path):
    with open(path, "w") as fh:
        json.dump(table.to_dict(), fh)
        fh.write("\n")
