"""Diversity-promoting training of an ensemble of monotone utilities.

Each candidate ``g_i`` is pushed away from its nearest neighbour in two ways:
by the squared difference of values on uniform samples of the unit cube, and
by the squared difference of their difference quotients on random pairs.
The two terms are mixed with weight ``mu``.  Training performs projected
gradient *ascent* on this objective (``maximize_diversity=True``).

Ascent on raw outputs is unbounded, so the trainer scores a range-normalized
view of every candidate::

    gbar(z) = (g(z) - g(0)) / (g(1) - g(0) + scale_floor)

and keeps every parameter inside a box (weights in ``[0, weight_cap]``,
biases in ``[-weight_cap, weight_cap]``).  After training each member is
rescaled exactly so that ``g(0) = 0`` and ``g(1) = 1`` before the strict
``epsilon`` term is attached.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError, ParseError, ShapeError, StateError, TrainingDivergenceError
from .monotone_net import (
    MonotoneLayer,
    MonotoneNet,
    StrictUtility,
    backward,
    forward,
    init_net,
    net_from_dict,
    strict_forward,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_COLUMNS = ("step", "member", "l_val", "l_grad", "objective")


@dataclass
class EnsembleConfig:
    k: int = 2
    m_utilities: int = 10
    mu: float = 0.5
    epsilon: float = 0.01
    steps: int = 2000
    batch: int = 128
    pair_batch: int = 128
    learning_rate: float = 1e-2
    seed: int = 0
    hidden: int = 16
    n_layers: int = 3
    maximize_diversity: bool = True
    # None disables the box / the normalized view (raw objective, unbounded under ascent)
    weight_cap: Optional[float] = 1.0
    scale_floor: Optional[float] = 0.1
    normalize_output: bool = True
    probe_size: int = 1024

    def validate(self) -> "EnsembleConfig":
        if self.m_utilities < 2:
            raise ConfigError(f"m_utilities must be >= 2 (got {self.m_utilities}): the nearest-neighbour min needs j != i")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.steps < 0 or self.batch < 1 or self.pair_batch < 1:
            raise ConfigError("steps must be >= 0 and batch sizes >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_cap is not None and not self.weight_cap > 0:
            raise ConfigError("weight_cap must be positive or null")
        if self.scale_floor is not None and not self.scale_floor > 0:
            raise ConfigError("scale_floor must be positive or null")
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "EnsembleConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown ensemble config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class UtilityEnsemble:
    utilities: List[StrictUtility]
    k: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.utilities:
            raise StateError("ensemble has no utilities")
        for idx, u in enumerate(self.utilities):
            if u.k != self.k:
                raise ShapeError(f"utility {idx} has K={u.k}, ensemble K={self.k}")

    def __len__(self) -> int:
        return len(self.utilities)

    @property
    def epsilon(self) -> float:
        return self.utilities[0].epsilon

    @property
    def nets(self) -> List[MonotoneNet]:
        return [u.base for u in self.utilities]

    def scores(self, z) -> np.ndarray:
        """Strict utility values, shape ``(M,)`` for one input or ``(M, n)`` for a batch."""
        return np.array([strict_forward(u, z) for u in self.utilities])


def sample_unit_cube(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise DataError(f"cannot draw an empty batch (n={n})")
    return rng.uniform(0.0, 1.0, size=(n, k))


def sample_pairs(n: int, k: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """``n`` independent pairs from the unit cube, redrawn where ``z == z'``."""
    z = sample_unit_cube(n, k, rng)
    z2 = sample_unit_cube(n, k, rng)
    same = np.all(z == z2, axis=1)
    while same.any():
        z2[same] = rng.uniform(0.0, 1.0, size=(int(same.sum()), k))
        same = np.all(z == z2, axis=1)
    return z, z2


def _as_nets(ensemble) -> List[MonotoneNet]:
    if isinstance(ensemble, UtilityEnsemble):
        return ensemble.nets
    return [m.base if isinstance(m, StrictUtility) else m for m in ensemble]


def _nearest(distances: np.ndarray, i: int) -> Tuple[int, float]:
    d = distances.copy()
    d[i] = np.inf
    j = int(np.argmin(d))
    return j, float(d[j])


def _check_members(n: int, i: int):
    if n < 2:
        raise ConfigError("discrepancy needs at least two members")
    if not 0 <= i < n:
        raise IndexError(f"member index {i} out of range for {n} members")


def _pair_quotients(outputs_a: np.ndarray, outputs_b: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (outputs_b - outputs_a) / norms


def _pair_norms(pairs) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    z, z2 = (np.asarray(p, dtype=float) for p in pairs)
    if z.shape != z2.shape or z.ndim != 2:
        raise ShapeError("pair batch must be two arrays of shape (n, K)")
    norms = np.linalg.norm(z2 - z, axis=1)
    if np.any(norms == 0):
        raise DataError(f"degenerate pair (z == z') at index {int(np.argmin(norms))}")
    return z, z2, norms


def value_discrepancy(i: int, ensemble, batch) -> float:
    """Squared-difference value gap between member ``i`` and its closest peer."""
    nets = _as_nets(ensemble)
    _check_members(len(nets), i)
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or len(batch) == 0:
        raise DataError("batch must be a non-empty (n, K) array")
    out = np.stack([forward(n, batch) for n in nets])
    return _nearest(((out - out[i]) ** 2).mean(axis=1), i)[1]


def grad_discrepancy(i: int, ensemble, pairs) -> float:
    """Squared difference-quotient gap between member ``i`` and its closest peer."""
    nets = _as_nets(ensemble)
    _check_members(len(nets), i)
    z, z2, norms = _pair_norms(pairs)
    q = np.stack([_pair_quotients(forward(n, z), forward(n, z2), norms) for n in nets])
    return _nearest(((q - q[i]) ** 2).mean(axis=1), i)[1]


def diversity_objective(i: int, ensemble, batch, pairs, mu: float) -> float:
    return mu * value_discrepancy(i, ensemble, batch) + (1.0 - mu) * grad_discrepancy(i, ensemble, pairs)


def normalize_net_range(net: MonotoneNet) -> MonotoneNet:
    """Affine rescale of the output layer so that ``g(0) = 0`` and ``g(1) = 1``.

    A constant network is only shifted to zero.
    """
    out = net.copy()
    g0, g1 = forward(out, np.stack([np.zeros(net.k), np.ones(net.k)]))
    span = g1 - g0
    head = out.layers[-1]
    head.bias = head.bias - g0
    if span > 0:
        head.weights = head.weights / span
        head.bias = head.bias / span
    return out


def min_pairwise_discrepancy(nets: Sequence[MonotoneNet], probe: np.ndarray) -> float:
    out = np.stack([forward(n, probe) for n in nets])
    d = ((out[:, None, :] - out[None, :, :]) ** 2).mean(axis=2)
    np.fill_diagonal(d, np.inf)
    return float(d.min())


class _Trainer:
    """Holds the mutable state of one training run."""

    def __init__(self, config: EnsembleConfig):
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        self.nets = [init_net(config.k, self.rng, config.hidden, config.n_layers) for _ in range(config.m_utilities)]
        self.ends = np.stack([np.zeros(config.k), np.ones(config.k)])

    def view(self, net: MonotoneNet, x: np.ndarray) -> Tuple[np.ndarray, float]:
        """Outputs as scored by the objective, plus the scale they were divided by."""
        if self.cfg.scale_floor is None:
            return forward(net, x), 1.0
        v = forward(net, np.concatenate([x, self.ends]))
        scale = v[-1] - v[-2] + self.cfg.scale_floor
        return (v[:-2] - v[-2]) / scale, scale

    def view_backward(self, net, x, outputs, scale, upstream) -> List[MonotoneLayer]:
        if self.cfg.scale_floor is None:
            return backward(net, x, upstream)
        # chain rule through (g(z) - g(0)) / (g(1) - g(0) + floor)
        s = upstream.sum()
        t = float(upstream @ outputs)
        up = np.concatenate([upstream / scale, [(t - s) / scale, -t / scale]])
        return backward(net, np.concatenate([x, self.ends]), up)

    def project(self, net: MonotoneNet):
        cap = self.cfg.weight_cap
        for layer in net.layers:
            if cap is None:
                np.maximum(layer.weights, 0.0, out=layer.weights)
            else:
                np.clip(layer.weights, 0.0, cap, out=layer.weights)
                np.clip(layer.bias, -cap, cap, out=layer.bias)

    def step(self, step: int, writer=None):
        cfg = self.cfg
        batch = sample_unit_cube(cfg.batch, cfg.k, self.rng)
        z, z2 = sample_pairs(cfg.pair_batch, cfg.k, self.rng)
        norms = np.linalg.norm(z2 - z, axis=1)
        x = np.concatenate([batch, z, z2])
        nb, np_ = cfg.batch, cfg.pair_batch
        views = [self.view(n, x) for n in self.nets]
        out = np.stack([v[0] for v in views])
        sign = 1.0 if cfg.maximize_diversity else -1.0

        for i, net in enumerate(self.nets):
            g = out[:, :nb]
            q = _pair_quotients(out[:, nb:nb + np_], out[:, nb + np_:], norms)
            j_val, l_val = _nearest(((g - g[i]) ** 2).mean(axis=1), i)
            j_grad, l_grad = _nearest(((q - q[i]) ** 2).mean(axis=1), i)
            objective = cfg.mu * l_val + (1.0 - cfg.mu) * l_grad
            if not np.isfinite(objective):
                raise TrainingDivergenceError(step, f"objective for member {i} is {objective}")
            if writer is not None:
                writer.writerow([step, i, repr(l_val), repr(l_grad), repr(objective)])

            dq = 2.0 * (1.0 - cfg.mu) * (q[i] - q[j_grad]) / (np_ * norms)
            upstream = np.concatenate([2.0 * cfg.mu * (g[i] - g[j_val]) / nb, -dq, dq])
            grads = self.view_backward(net, x, out[i], views[i][1], upstream)
            for layer, grad in zip(net.layers, grads):
                layer.weights += sign * cfg.learning_rate * grad.weights
                layer.bias += sign * cfg.learning_rate * grad.bias
            self.project(net)
            fresh, scale = self.view(net, x)
            if not np.all(np.isfinite(fresh)):
                raise TrainingDivergenceError(step, f"member {i} produced non-finite outputs")
            out[i] = fresh
            views[i] = (fresh, scale)


def train_ensemble(config: EnsembleConfig, log_sink: Optional[IO[str]] = None) -> UtilityEnsemble:
    """Train ``config.m_utilities`` diverse monotone utilities.

    When ``log_sink`` is given, a CSV with columns
    ``step,member,l_val,l_grad,objective`` is written to it.
    """
    config.validate()
    trainer = _Trainer(config)
    writer = None
    if log_sink is not None:
        writer = csv.writer(log_sink, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(config.steps):
            trainer.step(step, writer)
    nets = trainer.nets
    if config.normalize_output:
        nets = [normalize_net_range(n) for n in nets]
    log.info("trained %d utilities for %d steps", len(nets), config.steps)
    return UtilityEnsemble([StrictUtility(n, config.epsilon) for n in nets], config.k, asdict(config))


def initial_ensemble(config: EnsembleConfig) -> UtilityEnsemble:
    """The ensemble ``train_ensemble`` starts from (zero training steps)."""
    cfg = EnsembleConfig(**{**asdict(config), "steps": 0})
    return train_ensemble(cfg)


def probe_batch(config: EnsembleConfig) -> np.ndarray:
    """Held-out probe batch, drawn from a stream separate from training."""
    rng = np.random.default_rng([config.seed, 0x9E0B])
    return sample_unit_cube(config.probe_size, config.k, rng)


def linear_ensemble(m: int, k: int, rng: np.random.Generator, epsilon: float = 0.01) -> UtilityEnsemble:
    """``m`` unit-norm linear utilities ``w . z`` with ``w >= 0``.

    For ``k == 2`` the directions are uniform on the quarter circle; otherwise
    they are uniform on the non-negative orthant of the unit sphere.
    """
    if m < 1:
        raise ConfigError("m must be >= 1")
    if k == 2:
        theta = rng.uniform(0.0, np.pi / 2, size=m)
        w = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    else:
        w = np.abs(rng.standard_normal((m, k)))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
    utilities = [StrictUtility(MonotoneNet(k, [MonotoneLayer(row[None, :], np.zeros(1))]), epsilon) for row in w]
    return UtilityEnsemble(utilities, k, {"kind": "linear", "m_utilities": m})


def ensemble_to_dict(ensemble: UtilityEnsemble) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "k": ensemble.k,
        "epsilon": ensemble.epsilon,
        "nets": [u.base.to_dict() for u in ensemble.utilities],
        "config": ensemble.config,
    }


def ensemble_from_dict(doc: dict, expected_k: Optional[int] = None, source: str = "<ensemble>") -> UtilityEnsemble:
    if not isinstance(doc, dict):
        raise ParseError("top-level value must be an object", source)
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {version!r}", source)
    for key in ("k", "epsilon", "nets"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}", source)
    k = doc["k"]
    if expected_k is not None and k != expected_k:
        raise ShapeError(f"{source}: ensemble has K={k}, expected K={expected_k}")
    utilities = []
    for idx, net_doc in enumerate(doc["nets"]):
        try:
            net = net_from_dict(k, net_doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed network: {exc}", f"{source}:nets[{idx}]") from exc
        utilities.append(StrictUtility(net, float(doc["epsilon"])))
    if not utilities:
        raise ParseError("ensemble has no networks", source)
    return UtilityEnsemble(utilities, k, doc.get("config", {}))


def save_ensemble(ensemble: UtilityEnsemble, sink: Union[str, Path, IO[str]]):
    text = json.dumps(ensemble_to_dict(ensemble), indent=1, sort_keys=True) + "\n"
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        Path(sink).write_text(text)


def load_ensemble(source: Union[str, Path, IO[str]], expected_k: Optional[int] = None) -> UtilityEnsemble:
    if hasattr(source, "read"):
        name, text = getattr(source, "name", "<stream>"), source.read()
    else:
        name, text = str(source), Path(source).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{name}:{exc.lineno}:{exc.colno}") from exc
    return ensemble_from_dict(doc, expected_k, name)
