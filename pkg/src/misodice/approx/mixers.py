"""Mixers aggregating per-agent scalars into one team scalar.

LINEAR is affine in both its parameters and its inputs; no sign constraint
is placed on the weights. VDN is a plain sum. TWO_LAYER is a one-hidden-layer
softplus network, kept as the non-linear comparison point.
"""

from __future__ import annotations

import enum

import numpy as np

from .._rng import make_rng
from .nets import _sigmoid, _softplus


class MixerVariant(str, enum.Enum):
    LINEAR = "linear"
    VDN = "vdn"
    TWO_LAYER = "two-layer"


class LinearMixer:
    variant = MixerVariant.LINEAR

    def __init__(self, n_agents: int):
        self.n_agents = n_agents
        self.params = {"phi0": np.zeros(1), "phi": np.full(n_agents, 1.0 / n_agents)}

    def forward(self, x):
        x = _as_locals(x, self.n_agents)
        return x @ self.params["phi"] + self.params["phi0"][0], x

    def backward(self, x, g):
        grads = {"phi0": np.array([g.sum()]), "phi": x.T @ g}
        return grads, np.outer(g, self.params["phi"])


class VDNMixer:
    variant = MixerVariant.VDN

    def __init__(self, n_agents: int):
        self.n_agents = n_agents
        self.params = {}

    def forward(self, x):
        x = _as_locals(x, self.n_agents)
        return x.sum(axis=1), x

    def backward(self, x, g):
        return {}, np.repeat(g[:, None], self.n_agents, axis=1)


class TwoLayerMixer:
    variant = MixerVariant.TWO_LAYER

    def __init__(self, n_agents: int, hidden: int = 64, seed: int = 0):
        self.n_agents = n_agents
        rng = make_rng(seed, "two-layer-mixer")
        bound = 1.0 / np.sqrt(n_agents)
        self.params = {
            "W1": rng.uniform(-bound, bound, size=(n_agents, hidden)),
            "b1": rng.uniform(-bound, bound, size=hidden),
            # non-negative read-out keeps the map convex in its inputs at init
            "w2": np.abs(rng.uniform(-1.0, 1.0, size=hidden)) / np.sqrt(hidden),
            "b2": np.zeros(1),
        }

    def forward(self, x):
        x = _as_locals(x, self.n_agents)
        z = x @ self.params["W1"] + self.params["b1"]
        h = _softplus(z)
        return h @ self.params["w2"] + self.params["b2"][0], (x, z, h)

    def backward(self, cache, g):
        x, z, h = cache
        gh = np.outer(g, self.params["w2"])
        gz = gh * _sigmoid(z)
        grads = {"W1": x.T @ gz, "b1": gz.sum(axis=0), "w2": h.T @ g, "b2": np.array([g.sum()])}
        return grads, gz @ self.params["W1"].T


def _as_locals(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != n:
        raise ValueError(f"mixer expects {n} local values, got {x.shape[-1]}")
    return x


def make_mixer(variant, n_agents: int, hidden: int = 64, seed: int = 0):
    variant = MixerVariant(variant)
    if variant is MixerVariant.LINEAR:
        return LinearMixer(n_agents)
    if variant is MixerVariant.VDN:
        return VDNMixer(n_agents)
    return TwoLayerMixer(n_agents, hidden=hidden, seed=seed)


def mix(mixer, local_values):
    """Team scalar for one vector of local values, or a batch of them."""
    arr = np.asarray(local_values, dtype=float)
    out, _ = mixer.forward(arr)
    return float(out[0]) if arr.ndim == 1 else out
