"""Value stage: advantages, closed-form weights and the convex value objective.

For a team value ``nu_tot(s) = M_phi[nu_1(o_1), ..., nu_n(o_n)]`` and a log
occupancy ratio ``r(s, a)``, the advantage is

    A(s, a, s') = r(s, a) + gamma * (1 - done) * nu_tot(s') - nu_tot(s)

and the inner maximiser of the Lagrangian over the correction weight is
``w = exp(A / (1 + alpha) - 1)``. Substituting it back leaves

    (1 - gamma) * E_P0[nu_tot(s0)] + (1 + alpha) * E_U[exp(A / (1 + alpha) - 1)]

which is minimised over the local values and the mixer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import make_rng
from .approx import Adam, MixerVariant, make_mixer
from .approx import checkpoint as ckpt
from .data import Dataset, Transitions
from .ratio import DiscModel
from .training import LocalNets, assign_params, MetricsLog, TrainConfig, BatchSource, check_finite, merge_duplicates, one_hot_spec, prefixed

DEFAULT_ALPHA = 0.05


class ValueModel:
    def __init__(self, obs_sizes, hidden=(256,), mixer=MixerVariant.LINEAR, alpha: float = DEFAULT_ALPHA,
                 gamma: float = 0.99, seed: int = 0, mixer_hidden: int = 64):
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        self.obs_sizes, self.hidden = tuple(obs_sizes), tuple(hidden)
        self.n_agents = len(self.obs_sizes)
        self.alpha, self.gamma, self.seed, self.mixer_hidden = float(alpha), float(gamma), seed, mixer_hidden
        self.locals = LocalNets("nu", [one_hot_spec([o], 1, self.hidden) for o in self.obs_sizes], seed)
        self.mixer = make_mixer(mixer, self.n_agents, hidden=mixer_hidden, seed=seed)

    @property
    def params(self) -> dict:
        return {**self.locals.params, **prefixed("phi.", self.mixer.params)}

    def _forward(self, obs):
        obs = np.asarray(obs)
        outs, caches = self.locals.forward([obs[:, i] for i in range(self.n_agents)])
        x = np.concatenate(outs, axis=1)
        tot, mcache = self.mixer.forward(x)
        return tot, (caches, mcache)

    def _backward(self, cache, g) -> dict:
        caches, mcache = cache
        mgrads, gx = self.mixer.backward(mcache, g)
        grads = self.locals.backward(caches, [gx[:, i:i + 1] for i in range(self.n_agents)])
        grads.update(prefixed("phi.", mgrads))
        return grads

    def local_values(self, obs) -> np.ndarray:
        obs = np.asarray(obs)
        return np.concatenate(self.locals.forward([obs[:, i] for i in range(self.n_agents)])[0], axis=1)

    def nu_tot(self, obs) -> np.ndarray:
        return self._forward(obs)[0]

    def meta(self) -> dict:
        return {"kind": "value", "obs_sizes": self.obs_sizes, "hidden": self.hidden,
                "mixer": self.mixer.variant.value, "alpha": self.alpha, "gamma": self.gamma,
                "seed": self.seed, "mixer_hidden": self.mixer_hidden}

    def save(self, path):
        ckpt.save(path, self.params, self.meta())

    @classmethod
    def load(cls, path) -> "ValueModel":
        params, meta = ckpt.load(path)
        model = cls(meta["obs_sizes"], meta["hidden"], meta["mixer"], meta["alpha"], meta["gamma"],
                    meta["seed"], meta["mixer_hidden"])
        assign_params(model.params, params)
        return model


def advantage(model: ValueModel, log_ratio, obs, next_obs, terminals) -> np.ndarray:
    cont = 1.0 - np.asarray(terminals, dtype=float)
    return np.asarray(log_ratio, dtype=float) + model.gamma * cont * model.nu_tot(next_obs) - model.nu_tot(obs)


def weight(A, alpha: float):
    """Closed-form correction weight ``exp(A / (1 + alpha) - 1)``."""
    return np.exp(np.asarray(A, dtype=float) / (1.0 + alpha) - 1.0)


@dataclass(frozen=True)
class ValueBatch:
    """Transitions with their log ratios; ``weights`` sum to one."""

    obs: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    log_ratio: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class WeightedBatch:
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    initial: np.ndarray       # step index 0 of its trajectory
    log_ratio: np.ndarray
    advantages: np.ndarray
    weights: np.ndarray       # closed-form w, one per transition
    sample_weights: np.ndarray  # discounted empirical distribution over transitions


def value_loss_and_grad(model: ValueModel, batch: ValueBatch, init_obs, init_weights=None):
    init_obs = np.asarray(init_obs)
    pw = (np.full(len(init_obs), 1.0 / len(init_obs)) if init_weights is None
          else np.asarray(init_weights, dtype=float))
    a1 = 1.0 + model.alpha
    cont = 1.0 - np.asarray(batch.terminals, dtype=float)
    v0, c0 = model._forward(init_obs)
    vs, cs = model._forward(batch.obs)
    vn, cn = model._forward(batch.next_obs)
    A = batch.log_ratio + model.gamma * cont * vn - vs
    w = weight(A, model.alpha)
    loss = (1.0 - model.gamma) * pw @ v0 + a1 * batch.weights @ w
    gA = batch.weights * w          # d loss / d A
    grads = model._backward(c0, (1.0 - model.gamma) * pw)
    for part in (model._backward(cs, -gA), model._backward(cn, model.gamma * cont * gA)):
        for k, v in part.items():
            grads[k] = grads[k] + v
    return float(loss), grads


def value_loss(model: ValueModel, batch: ValueBatch, init_obs, init_weights=None) -> float:
    return value_loss_and_grad(model, batch, init_obs, init_weights)[0]


def value_loss_lagrangian(model: ValueModel, batch: ValueBatch, init_obs, init_weights=None) -> float:
    """The unsimplified form ``(1-g) E nu0 + E_U[w * (A - (1 + alpha) log w)]`` at ``w = w*``."""
    init_obs = np.asarray(init_obs)
    pw = (np.full(len(init_obs), 1.0 / len(init_obs)) if init_weights is None
          else np.asarray(init_weights, dtype=float))
    A = advantage(model, batch.log_ratio, batch.obs, batch.next_obs, batch.terminals)
    w = weight(A, model.alpha)
    return float((1.0 - model.gamma) * pw @ model.nu_tot(init_obs)
                 + batch.weights @ (w * (A - (1.0 + model.alpha) * np.log(w))))


def value_batch(transitions: Transitions, disc: DiscModel, idx=None, weights=None) -> ValueBatch:
    idx = np.arange(len(transitions)) if idx is None else idx
    w = transitions.weights[idx] if weights is None else weights
    return ValueBatch(transitions.obs[idx], transitions.next_obs[idx], transitions.terminals[idx],
                      disc.log_ratio(transitions.obs[idx], transitions.actions[idx]), w / w.sum())


def train_values(D_E: Dataset, D_U: Dataset, disc: DiscModel, cfg: TrainConfig, gamma: float,
                 alpha: float = DEFAULT_ALPHA, mixer=MixerVariant.LINEAR,
                 metrics: MetricsLog | None = None, log_ratio=None) -> ValueModel:
    """Minimise the value objective on ``D_U``; ``P0`` is read off its first steps.

    ``log_ratio`` overrides the discriminator (one value per ``D_U``
    transition), which lets exact ratios be plugged in.
    """
    if D_E.dims != D_U.dims:
        raise ValueError("expert and union datasets must share dimensions")
    model = ValueModel(D_U.obs_sizes, cfg.hidden, mixer, alpha, gamma, cfg.seed)
    tU = D_U.transitions(gamma)
    lr_all = disc.log_ratio(tU.obs, tU.actions) if log_ratio is None else np.asarray(log_ratio, dtype=float)
    init = D_U.initial_obs()
    opt = Adam(model.params, lr=cfg.lr)
    rng = make_rng(cfg.seed, "value-batches")
    src = BatchSource(rng, tU.weights, cfg.batch_size, tU.obs, tU.actions, tU.next_obs, tU.terminals, lr_all)
    init_b, init_w = init, None
    if cfg.batch_size == 0:
        i0, init_w = merge_duplicates(np.ones(len(init)), init)
        init_b, init_w = init[i0], init_w / init_w.sum()
    for step in range(1, cfg.steps + 1):
        idx, bw = src.draw()
        batch = ValueBatch(tU.obs[idx], tU.next_obs[idx], tU.terminals[idx], lr_all[idx], bw)
        if 0 < cfg.batch_size < len(init):
            init_b = init[rng.choice(len(init), size=cfg.batch_size)]
        loss, grads = value_loss_and_grad(model, batch, init_b, init_w)
        check_finite(loss, "values", step)
        opt.step(grads)
        if metrics is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            A = advantage(model, batch.log_ratio, batch.obs, batch.next_obs, batch.terminals)
            metrics.add("values", step, "loss", loss)
            metrics.add("values", step, "mean_w", float(bw @ weight(A, alpha)))
            metrics.add("values", step, "mean_A", float(bw @ A))
    return model


def weighted_batch(model: ValueModel, disc: DiscModel | None, D_U: Dataset, log_ratio=None) -> WeightedBatch:
    """Every ``D_U`` transition with its advantage and closed-form weight."""
    t = D_U.transitions(model.gamma)
    lr = disc.log_ratio(t.obs, t.actions) if log_ratio is None else np.asarray(log_ratio, dtype=float)
    A = advantage(model, lr, t.obs, t.next_obs, t.terminals)
    return WeightedBatch(t.obs, t.actions, t.next_obs, t.terminals, t.timesteps == 0, lr, A,
                         weight(A, model.alpha), t.weights)


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_max(fn, lo: float, hi: float, tol: float = 1e-13, max_iter: int = 500) -> float:
    """Maximiser of a unimodal ``fn`` on ``[lo, hi]``."""
    a, b = lo, hi
    c, d = b - _INV_PHI * (b - a), a + _INV_PHI * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a < tol * max(1.0, abs(a) + abs(b)):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def inner_argmax(A: float, alpha: float, upper: float | None = None) -> float:
    """Numerical maximiser of ``w * (A - (1 + alpha) log w)`` over ``(0, upper]``.

    The search runs over ``log w`` (the map is monotone, so unimodality is
    kept) to resolve small maximisers to relative precision.
    """
    upper = 2.0 * math.exp(abs(A)) + 1.0 if upper is None else upper

    def g(u):
        w = math.exp(u)
        return w * (A - (1.0 + alpha) * u)

    return math.exp(golden_section_max(g, -60.0, math.log(upper)))


def inner_max_check(A: float, alpha: float, rtol: float = 1e-6) -> bool:
    numeric = inner_argmax(A, alpha)
    closed = math.exp(A / (1.0 + alpha) - 1.0)
    return abs(numeric - closed) <= rtol * closed
