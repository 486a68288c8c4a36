"""Pareto fronts, 2-D hypervolume and distributional preference metrics.

Both distributional metrics score a set of policies against ``m`` random
preferences ``p`` and report ``mean_p max_pi u(p, pi)``:

* constraint satisfaction: ``u`` is the fraction of the policy's return
  samples satisfying every linear constraint ``w_r . z >= c_r`` of ``p``;
* variance objective: ``u = w1 . mean(Z) + sign * w2 . std(Z)``.

All maximization, in every dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Mapping, Sequence

import numpy as np

from .errors import DataError, ShapeError, StateError


@dataclass
class PolicySampleSet:
    policy_id: str
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or len(self.samples) == 0:
            raise DataError(f"policy {self.policy_id!r}: sample set must be a non-empty (n, K) array")


@dataclass
class Constraint:
    weights: np.ndarray  # (n_rows, K), rows on the simplex
    thresholds: np.ndarray  # (n_rows,)

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=float).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim == 1:
            self.weights = self.weights[None, :]
        if len(self.weights) != len(self.thresholds):
            raise ShapeError("one threshold per weight row")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-12):
            raise DataError("constraint weights must be non-negative and sum to one")


@dataclass
class VarianceWeights:
    w1: np.ndarray
    w2: np.ndarray
    sign: float = 1.0


def pareto_mask(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) == 0:
        raise DataError("pareto_front needs a non-empty (n, K) array")
    ge = np.all(pts[:, None, :] >= pts[None, :, :], axis=2)  # ge[q, p]: q >= p everywhere
    gt = np.any(pts[:, None, :] > pts[None, :, :], axis=2)
    dominated = np.any(ge & gt, axis=0)
    return ~dominated


def pareto_front(points) -> np.ndarray:
    """Non-dominated points, in input order."""
    pts = np.asarray(points, dtype=float)
    return pts[pareto_mask(pts)]


def hypervolume_2d(front, ref) -> float:
    """Area dominated by ``front`` and bounded below by ``ref``."""
    ref = np.asarray(ref, dtype=float)
    pts = np.asarray(front, dtype=float)
    if ref.shape != (2,):
        raise ShapeError("hypervolume_2d is defined for K = 2 only")
    if pts.size == 0:
        return 0.0
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError("hypervolume_2d is defined for K = 2 only")
    if np.any(pts < ref):
        bad = pts[np.any(pts < ref, axis=1)][0]
        raise DataError(f"point {bad.tolist()} does not dominate the reference {ref.tolist()}")
    pts = pareto_front(pts)
    order = np.lexsort((-pts[:, 1], -pts[:, 0]))  # x descending
    area = 0.0
    y_done = ref[1]
    for x, y in pts[order]:
        if y > y_done:
            area += (x - ref[0]) * (y - y_done)
            y_done = y
    return float(area)


def sample_simplex(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws from ``{w >= 0, sum(w) = 1}`` (Dirichlet(1, ..., 1))."""
    e = rng.standard_exponential((n, k))
    w = e / e.sum(axis=1, keepdims=True)
    # land exactly on the simplex up to rounding of the last coordinate
    w[:, -1] = 1.0 - w[:, :-1].sum(axis=1)
    return np.clip(w, 0.0, None)


def _pool(policies) -> np.ndarray:
    if isinstance(policies, np.ndarray):
        pool = policies
    else:
        pool = np.concatenate([p.samples if isinstance(p, PolicySampleSet) else np.asarray(p, dtype=float) for p in policies])
    if pool.ndim != 2 or len(pool) == 0:
        raise DataError("sample pool is empty")
    return pool


def gen_constraints(m: int, n_rows: int, sample_pool, rng: np.random.Generator) -> List[Constraint]:
    pool = _pool(sample_pool)
    k = pool.shape[1]
    out = []
    for _ in range(m):
        w = sample_simplex(n_rows, k, rng) if n_rows else np.zeros((0, k))
        proj = pool @ w.T  # (n_pool, n_rows)
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        c = rng.uniform(lo, hi) if n_rows else np.zeros(0)
        out.append(Constraint(w, c))
    return out


def gen_variance_weights(m: int, k: int, rng: np.random.Generator, sign: float = 1.0) -> List[VarianceWeights]:
    w = sample_simplex(m, 2 * k, rng)
    return [VarianceWeights(row[:k].copy(), row[k:].copy(), sign) for row in w]


def _as_sets(policies) -> List[PolicySampleSet]:
    if isinstance(policies, Mapping):
        return [PolicySampleSet(str(k), v) for k, v in policies.items()]
    out = []
    for idx, p in enumerate(policies):
        out.append(p if isinstance(p, PolicySampleSet) else PolicySampleSet(str(idx), p))
    if not out:
        raise StateError("no policies to score")
    return out


def _mean(values) -> float:
    # correctly rounded sum: the aggregate does not depend on preference order
    return math.fsum(values) / len(values)


def constraint_utility(constraint: Constraint, samples: np.ndarray) -> float:
    """Fraction of samples meeting every row of ``constraint`` (1 if it has no rows)."""
    if len(constraint.thresholds) == 0:
        return 1.0
    ok = np.all(samples @ constraint.weights.T >= constraint.thresholds, axis=1)
    return float(ok.mean())


def constraint_satisfaction(policies, constraints: Sequence[Constraint]) -> float:
    sets = _as_sets(policies)
    if not constraints:
        raise StateError("no constraints to score")
    best = [max(constraint_utility(c, p.samples) for p in sets) for c in constraints]
    return _mean(best)


def variance_utility(weights: VarianceWeights, samples: np.ndarray) -> float:
    mean = samples.mean(axis=0)
    if np.any(weights.w2 != 0) and weights.sign != 0:
        if len(samples) < 2:
            raise DataError("standard deviation needs at least two samples")
        std = samples.std(axis=0)  # population convention
        return float(weights.w1 @ mean + weights.sign * (weights.w2 @ std))
    return float(weights.w1 @ mean)


def variance_objective(policies, weight_draws: Sequence[VarianceWeights]) -> float:
    sets = _as_sets(policies)
    if not weight_draws:
        raise StateError("no weight draws to score")
    best = [max(variance_utility(w, p.samples) for p in sets) for w in weight_draws]
    return _mean(best)
