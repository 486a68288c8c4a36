"""Monotone feedforward utility networks.

A network maps normalized returns in ``[0, 1]^K`` to a scalar.  Hidden layers
use a three-way saturating activation that triples the width, and every weight
is kept non-negative, so the composed map is non-decreasing in each input.
``StrictUtility`` adds a small linear term on top to make it strictly
increasing.

Gradients are computed by hand (no autodiff dependency).  At the activation
kinks ``x = -0.5`` and ``x = 0.5`` the right-hand derivative is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ShapeError

KINK = 0.5


def nondecreasing_activation(x):
    """Return ``(max(x, -0.5), min(x, 0.5), clip(x, -0.5, 0.5))``.

    Works on scalars (returns a tuple) and on arrays, where the three parts
    are concatenated along the last axis.
    """
    if np.ndim(x) == 0:
        x = float(x)
        return (max(x, -KINK), min(x, KINK), min(max(x, -KINK), KINK))
    x = np.asarray(x, dtype=float)
    return np.concatenate(
        [np.maximum(x, -KINK), np.minimum(x, KINK), np.clip(x, -KINK, KINK)], axis=-1
    )


def _activation_derivative(x: np.ndarray) -> np.ndarray:
    # right-hand derivatives, same concatenated layout as the forward pass
    upper = x >= -KINK
    lower = x < KINK
    return np.concatenate([upper, lower, upper & lower], axis=-1).astype(float)


@dataclass
class MonotoneLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def copy(self) -> "MonotoneLayer":
        return MonotoneLayer(self.weights.copy(), self.bias.copy())


@dataclass
class MonotoneNet:
    input_dim: int
    layers: List[MonotoneLayer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        expected = self.input_dim
        for idx, layer in enumerate(self.layers):
            w = np.asarray(layer.weights, dtype=float)
            b = np.asarray(layer.bias, dtype=float)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {idx}: weights {w.shape} and bias {b.shape} do not agree")
            if w.shape[1] != expected:
                raise ShapeError(f"layer {idx}: expected input size {expected}, got {w.shape[1]}")
            layer.weights, layer.bias = w, b
            expected = 3 * w.shape[0]
        if self.layers[-1].weights.shape[0] != 1:
            raise ShapeError("final layer must have a single output")

    @property
    def k(self) -> int:
        return self.input_dim

    def copy(self) -> "MonotoneNet":
        return MonotoneNet(self.input_dim, [layer.copy() for layer in self.layers])

    def n_params(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"weights": layer.weights.tolist(), "bias": layer.bias.tolist()}
                for layer in self.layers
            ]
        }


@dataclass
class StrictUtility:
    base: MonotoneNet
    epsilon: float = 0.01

    @property
    def k(self) -> int:
        return self.base.input_dim

    def __call__(self, z):
        return strict_forward(self, z)


def init_net(
    k: int, rng: np.random.Generator, hidden: int = 16, n_layers: int = 3
) -> MonotoneNet:
    """Random network with weights uniform on ``[0, 1/fan_in]`` and zero biases."""
    if n_layers < 1:
        raise ShapeError("n_layers must be >= 1")
    sizes = [hidden] * (n_layers - 1) + [1]
    layers = []
    fan_in = k
    for out in sizes:
        w = rng.uniform(0.0, 1.0 / fan_in, size=(out, fan_in))
        layers.append(MonotoneLayer(w, np.zeros(out)))
        fan_in = 3 * out
    return MonotoneNet(k, layers)


def _as_batch(net: MonotoneNet, z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of length {net.input_dim}, got shape {np.shape(z)[1:]}")
    return z, single


def _forward_cache(net: MonotoneNet, z: np.ndarray):
    pre_acts = []
    h = z
    last = len(net.layers) - 1
    for idx, layer in enumerate(net.layers):
        a = h @ layer.weights.T + layer.bias
        if idx == last:
            return a[:, 0], pre_acts
        pre_acts.append((h, a))
        h = nondecreasing_activation(a)


def forward(net: MonotoneNet, z):
    """Evaluate the network on one input (returns float) or a batch (returns array)."""
    batch, single = _as_batch(net, z)
    out, _ = _forward_cache(net, batch)
    return float(out[0]) if single else out


def strict_forward(u: StrictUtility, z):
    """``forward(base, z) + (epsilon / K) * sum(z)``."""
    batch, single = _as_batch(u.base, z)
    out, _ = _forward_cache(u.base, batch)
    out = out + (u.epsilon / u.k) * batch.sum(axis=1)
    return float(out[0]) if single else out


def backward(net: MonotoneNet, z, upstream) -> List[MonotoneLayer]:
    """Gradient of ``sum_b upstream[b] * net(z[b])`` w.r.t. every parameter.

    Returned as a list of ``MonotoneLayer`` holding the gradients in place of
    the parameters.
    """
    batch, _ = _as_batch(net, z)
    upstream = np.broadcast_to(np.asarray(upstream, dtype=float), (batch.shape[0],))
    _, cache = _forward_cache(net, batch)
    grads: List[MonotoneLayer] = [None] * len(net.layers)

    last = net.layers[-1]
    h_last = nondecreasing_activation(cache[-1][1]) if cache else batch
    delta = upstream[:, None]  # (n, 1)
    grads[-1] = MonotoneLayer(delta.T @ h_last, delta.sum(axis=0))
    back = delta @ last.weights  # gradient w.r.t. layer input

    for idx in range(len(cache) - 1, -1, -1):
        h_in, a = cache[idx]
        delta = (back.reshape(back.shape[0], 3, -1) * _activation_derivative(a).reshape(a.shape[0], 3, -1)).sum(axis=1)
        grads[idx] = MonotoneLayer(delta.T @ h_in, delta.sum(axis=0))
        back = delta @ net.layers[idx].weights
    return grads


def param_gradients(net: MonotoneNet, z: Sequence[float], upstream: float = 1.0) -> List[MonotoneLayer]:
    """Gradient of ``upstream * net(z)`` for a single input vector."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ShapeError("param_gradients takes a single input vector")
    return backward(net, z[None, :], [upstream])


def project_nonnegative(net: MonotoneNet) -> MonotoneNet:
    """Copy of ``net`` with every weight clipped at zero; biases untouched."""
    out = net.copy()
    for layer in out.layers:
        np.maximum(layer.weights, 0.0, out=layer.weights)
    return out


def project_nonnegative_(net: MonotoneNet) -> MonotoneNet:
    for layer in net.layers:
        np.maximum(layer.weights, 0.0, out=layer.weights)
    return net


def flatten_params(layers: Sequence[MonotoneLayer]) -> np.ndarray:
    return np.concatenate([np.concatenate([l.weights.ravel(), l.bias.ravel()]) for l in layers])


def unflatten_params(net: MonotoneNet, flat: np.ndarray) -> MonotoneNet:
    out = net.copy()
    pos = 0
    for layer in out.layers:
        n = layer.weights.size
        layer.weights = flat[pos:pos + n].reshape(layer.weights.shape).copy()
        pos += n
        m = layer.bias.size
        layer.bias = flat[pos:pos + m].copy()
        pos += m
    if pos != flat.size:
        raise ShapeError(f"expected {pos} parameters, got {flat.size}")
    return out


def net_from_dict(k: int, doc: dict) -> MonotoneNet:
    layers = [
        MonotoneLayer(np.asarray(layer["weights"], dtype=float), np.asarray(layer["bias"], dtype=float))
        for layer in doc["layers"]
    ]
    return MonotoneNet(k, layers)
