"""Shared pieces of the training loops: per-agent networks, batching, metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .approx import MLP, ApproxSpec
from .errors import DivergenceError


@dataclass(frozen=True)
class TrainConfig:
    """Knobs shared by every gradient-trained stage.

    ``batch_size=0`` trains on the full (discount-weighted) dataset each step;
    otherwise batches are drawn with probability proportional to the
    per-transition weights.
    """

    steps: int = 1000
    batch_size: int = 512
    lr: float = 3e-4
    hidden: tuple = (256,)
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 0 or self.lr <= 0 or self.log_every < 1:
            raise ValueError(f"invalid training config {self}")


class LocalNets:
    """One approximator per agent, exposed to the optimiser as one flat dict."""

    def __init__(self, prefix: str, specs, seed: int, output_bias=0.0):
        self.prefix = prefix
        self.nets = [MLP(spec, seed=seed, output_bias=output_bias, name=f"{prefix}{i}")
                     for i, spec in enumerate(specs)]

    def __len__(self):
        return len(self.nets)

    def __getitem__(self, i) -> MLP:
        return self.nets[i]

    @property
    def params(self) -> dict:
        return {f"{self.prefix}{i}.{k}": v for i, net in enumerate(self.nets) for k, v in net.params.items()}

    def forward(self, cols):
        """``cols[i]`` are agent ``i``'s index columns; returns outputs and caches."""
        outs, caches = zip(*(net.forward_index(c) for net, c in zip(self.nets, cols)))
        return list(outs), list(caches)

    def backward(self, caches, grads_out) -> dict:
        out = {}
        for i, (net, cache, g) in enumerate(zip(self.nets, caches, grads_out)):
            for k, v in net.backward(cache, g)[0].items():
                out[f"{self.prefix}{i}.{k}"] = v
        return out


def assign_params(dest: dict, src: dict):
    """Copy ``src`` arrays into the (optimiser-shared) arrays of ``dest``."""
    if set(dest) != set(src):
        raise ValueError("checkpoint parameters do not match the model layout")
    for k, v in dest.items():
        v[...] = src[k]


def prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in params.items()}


def add_grads(total: dict, more: dict) -> dict:
    for k, v in more.items():
        total[k] = total[k] + v if k in total else v
    return total


def draw_batch(rng, weights: np.ndarray, batch_size: int):
    """Indices and per-sample weights (summing to one) for one step."""
    n = len(weights)
    if batch_size == 0:
        return np.arange(n), weights / weights.sum()
    idx = rng.choice(n, size=batch_size, p=weights / weights.sum())
    return idx, np.full(batch_size, 1.0 / batch_size)


def merge_duplicates(weights, *columns):
    """Representative indices of identical rows and their summed weights.

    A full-batch weighted objective over the merged rows equals the one over
    all rows, at a fraction of the cost on tabular data.
    """
    keys = np.concatenate([np.asarray(c).reshape(len(weights), -1) for c in columns], axis=1)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    return first, np.bincount(inverse.reshape(-1), weights=weights, minlength=len(first))


class BatchSource:
    """Per-step batches: the merged full batch when ``batch_size == 0``, else weighted draws."""

    def __init__(self, rng, weights, batch_size: int, *columns):
        self.rng, self.weights, self.batch_size = rng, np.asarray(weights, dtype=float), batch_size
        if batch_size == 0:
            idx, w = merge_duplicates(self.weights, *columns)
            self.full = (idx, w / w.sum())

    def draw(self):
        if self.batch_size == 0:
            return self.full
        return draw_batch(self.rng, self.weights, self.batch_size)


def check_finite(value: float, stage: str, step: int, detail: str = ""):
    if not math.isfinite(value):
        raise DivergenceError(stage, step, detail)


@dataclass
class MetricsLog:
    """Append-only rows ``method, stage, step, metric, value``."""

    method: str = "misodice"
    rows: list = field(default_factory=list)

    def add(self, stage: str, step: int, metric: str, value: float):
        self.rows.append((self.method, stage, int(step), metric, float(value)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "stage", "step", "metric", "value"])
        for m, s, t, k, v in self.rows:
            w.writerow([m, s, t, k, repr(v)])
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def one_hot_spec(sizes, output_dim: int, hidden) -> ApproxSpec:
    return ApproxSpec(tuple(int(s) for s in sizes), output_dim=output_dim, hidden=tuple(hidden))
