"""Small feed-forward approximators with hand-written reverse mode.

Inputs are either dense float arrays or, more commonly here, integer index
columns standing for a concatenation of one-hot blocks. The index path is
mathematically the same network; the first layer is just a row gather.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._rng import make_rng


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, h: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
    "softplus": (_softplus, lambda z, h: _sigmoid(z)),
    "identity": (lambda z: z, lambda z, h: np.ones_like(z)),
}


@dataclass(frozen=True)
class ApproxSpec:
    """Shape of a feed-forward approximator.

    ``input_sizes`` lists the one-hot block sizes that make up the input
    (for a dense input, a single block of the input width).
    """

    input_sizes: tuple[int, ...]
    output_dim: int = 1
    hidden: tuple[int, ...] = (256,)
    activation: str = "relu"

    def __post_init__(self):
        dims = (*self.input_sizes, self.output_dim, *self.hidden)
        if not dims or any(int(d) <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive, got {self}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return int(sum(self.input_sizes))


@dataclass
class _Cache:
    first: tuple            # ("dense", x) or ("index", flat_rows)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


class MLP:
    """Fully connected network; ``params`` maps names to float64 arrays.

    Hidden layers use fan-in scaled uniform initialisation. The output layer
    starts at zero weights so the initial output is exactly ``output_bias``.
    """

    def __init__(self, spec: ApproxSpec, seed: int = 0, output_bias=0.0, name: str = "mlp"):
        self.spec = spec
        rng = make_rng(seed, "mlp-init", name)
        widths = [spec.input_dim, *spec.hidden, spec.output_dim]
        self.n_layers = len(widths) - 1
        self.params: dict[str, np.ndarray] = {}
        for k in range(self.n_layers):
            fan_in, fan_out = widths[k], widths[k + 1]
            if k < self.n_layers - 1:
                bound = 1.0 / np.sqrt(fan_in)
                self.params[f"W{k}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                self.params[f"b{k}"] = rng.uniform(-bound, bound, size=fan_out)
            else:
                self.params[f"W{k}"] = np.zeros((fan_in, fan_out))
                self.params[f"b{k}"] = np.broadcast_to(
                    np.asarray(output_bias, dtype=float), (fan_out,)).copy()
        self._offsets = np.concatenate([[0], np.cumsum(spec.input_sizes)[:-1]]).astype(np.int64)
        self._act, self._dact = _ACTIVATIONS[spec.activation]

    # -- forward -----------------------------------------------------------
    def _check_index(self, idx):
        idx = np.asarray(idx)
        if idx.ndim == 1:
            idx = idx[:, None]
        if idx.shape[1] != len(self.spec.input_sizes):
            raise ValueError(
                f"expected {len(self.spec.input_sizes)} index columns, got {idx.shape[1]}")
        sizes = np.asarray(self.spec.input_sizes)
        if idx.size and (idx.min() < 0 or np.any(idx >= sizes)):
            raise ValueError("index out of range for one-hot block")
        return idx.astype(np.int64)

    def forward_index(self, idx):
        idx = self._check_index(idx)
        rows = idx + self._offsets
        z = self.params["W0"][rows].sum(axis=1) + self.params["b0"]
        return self._propagate(z, _Cache(first=("index", rows)))

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of width {self.spec.input_dim}, got {x.shape}")
        z = x @ self.params["W0"] + self.params["b0"]
        return self._propagate(z, _Cache(first=("dense", x)))

    def _propagate(self, z, cache):
        h = None
        for k in range(self.n_layers):
            if k > 0:
                z = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            if k == self.n_layers - 1:
                return z, cache
            h = self._act(z)
            cache.pre.append(z)
            cache.post.append(h)

    def __call__(self, idx):
        return self.forward_index(idx)[0]

    # -- backward ----------------------------------------------------------
    def backward(self, cache: _Cache, grad_out):
        """Gradients of ``sum(grad_out * output)``.

        Returns ``(param_grads, input_grad)``; ``input_grad`` is None on the
        index path.
        """
        g = np.asarray(grad_out, dtype=float)
        grads = {}
        for k in range(self.n_layers - 1, -1, -1):
            grads[f"b{k}"] = g.sum(axis=0)
            if k > 0:
                h = cache.post[k - 1]
                grads[f"W{k}"] = h.T @ g
                g = (g @ self.params[f"W{k}"].T) * self._dact(cache.pre[k - 1], h)
        kind, data = cache.first
        if kind == "dense":
            grads["W0"] = data.T @ g
            return grads, g @ self.params["W0"].T
        gw = np.zeros_like(self.params["W0"])
        for col in range(data.shape[1]):
            np.add.at(gw, data[:, col], g)
        grads["W0"] = gw
        return grads, None
