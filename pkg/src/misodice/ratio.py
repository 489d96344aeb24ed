"""Occupancy-ratio estimation with mixed local discriminators.

Each agent has a local score ``c_i(o_i, a_i)``; a mixer combines them into a
team score that is clipped to ``[eps, 1 - eps]`` and trained as a classifier
between expert and union data. At the optimum
``c = rho_E / (rho_E + rho_U)``, so ``log(c / (1 - c))`` estimates the log
occupancy ratio.
"""

from __future__ import annotations

import logging

import numpy as np

from ._rng import make_rng
from .approx import Adam, MixerVariant, make_mixer
from .approx import checkpoint as ckpt
from .data import Dataset
from .training import LocalNets, assign_params, MetricsLog, TrainConfig, BatchSource, check_finite, one_hot_spec, prefixed

log = logging.getLogger(__name__)

EPS = 1e-5
LOG_RATIO_BOUND = 10.0


class DiscModel:
    """Local discriminators ``c_i`` plus the mixer ``eta``.

    With ``hidden=()`` each local is an exact table over ``(o_i, a_i)``
    cells; otherwise its input is one-hot ``o_i`` concatenated with one-hot
    ``a_i``.
    """

    def __init__(self, obs_sizes, action_sizes, hidden=(256,), mixer=MixerVariant.LINEAR,
                 eps: float = EPS, bound: float = LOG_RATIO_BOUND, seed: int = 0, mixer_hidden: int = 64):
        if not 0.0 < eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        self.obs_sizes, self.action_sizes = tuple(obs_sizes), tuple(action_sizes)
        self.n_agents = len(self.obs_sizes)
        self.hidden, self.eps, self.bound, self.seed = tuple(hidden), eps, bound, seed
        self.tabular = not self.hidden
        if self.tabular:
            specs = [one_hot_spec([o * a], 1, ()) for o, a in zip(self.obs_sizes, self.action_sizes)]
        else:
            specs = [one_hot_spec([o, a], 1, self.hidden) for o, a in zip(self.obs_sizes, self.action_sizes)]
        self.mixer = make_mixer(mixer, self.n_agents, hidden=mixer_hidden, seed=seed)
        # start every local at the value that mixes to exactly 1/2
        ones, _ = self.mixer.forward(np.ones((1, self.n_agents)))
        zero, _ = self.mixer.forward(np.zeros((1, self.n_agents)))
        slope = float(ones[0] - zero[0])
        if self.mixer.variant is MixerVariant.TWO_LAYER:
            # locals start near 0; shift the read-out so that point mixes to 1/2
            self.mixer.params["b2"] += 0.5 - float(zero[0])
            bias = 0.0
        else:
            bias = (0.5 - float(zero[0])) / slope
        self.locals = LocalNets("c", specs, seed, output_bias=bias)

    @property
    def params(self) -> dict:
        return {**self.locals.params, **prefixed("eta.", self.mixer.params)}

    def _cols(self, obs, actions):
        obs, actions = np.asarray(obs), np.asarray(actions)
        if self.tabular:
            return [(obs[:, i] * self.action_sizes[i] + actions[:, i])[:, None] for i in range(self.n_agents)]
        return [np.stack([obs[:, i], actions[:, i]], axis=1) for i in range(self.n_agents)]

    def local_outputs(self, obs, actions):
        outs, caches = self.locals.forward(self._cols(obs, actions))
        return np.concatenate(outs, axis=1), caches

    def mixed(self, obs, actions) -> np.ndarray:
        """Team score before clipping."""
        x, _ = self.local_outputs(obs, actions)
        return self.mixer.forward(x)[0]

    def c(self, obs, actions) -> np.ndarray:
        return np.clip(self.mixed(obs, actions), self.eps, 1.0 - self.eps)

    def log_ratio(self, obs, actions) -> np.ndarray:
        return log_ratio_of_c(self.c(obs, actions), self.eps, self.bound)

    def meta(self) -> dict:
        return {"kind": "disc", "obs_sizes": self.obs_sizes, "action_sizes": self.action_sizes,
                "hidden": self.hidden, "mixer": self.mixer.variant.value, "eps": self.eps,
                "bound": self.bound, "seed": self.seed}

    def save(self, path):
        ckpt.save(path, self.params, self.meta())

    @classmethod
    def load(cls, path) -> "DiscModel":
        params, meta = ckpt.load(path)
        model = cls(meta["obs_sizes"], meta["action_sizes"], meta["hidden"], meta["mixer"],
                    meta["eps"], meta["bound"], meta["seed"])
        assign_params(model.params, params)
        return model


def log_ratio_of_c(c, eps: float = EPS, bound: float = LOG_RATIO_BOUND):
    """``log(c / (1 - c))`` with ``c`` clipped to ``[eps, 1 - eps]`` and the result to ``[-bound, bound]``."""
    c = np.clip(np.asarray(c, dtype=float), eps, 1.0 - eps)
    return np.clip(np.log(c) - np.log1p(-c), -bound, bound)


def clipped_objective(m_E, m_U, w_E, w_U, eps: float = EPS):
    """Classification loss on mixed scores and its gradient in those scores.

    The gradient is passed through the clip inside ``(eps, 1 - eps)``; at a
    clipped score it is kept only when a descent step would move the score
    back inside.
    """
    c_E = np.clip(m_E, eps, 1.0 - eps)
    c_U = np.clip(m_U, eps, 1.0 - eps)
    loss = -(w_E @ np.log(c_E) + w_U @ np.log1p(-c_U))
    g_E = -w_E / c_E
    g_U = w_U / (1.0 - c_U)

    def gate(m, g):
        inside = (m > eps) & (m < 1.0 - eps)
        return np.where(inside | ((m >= 1.0 - eps) & (g > 0)) | ((m <= eps) & (g < 0)), g, 0.0)

    return float(loss), gate(m_E, g_E), gate(m_U, g_U)


def disc_loss_and_grad(model: DiscModel, batch_E, batch_U):
    """``batch_*`` are ``(obs, actions, weights)`` with weights summing to one."""
    oE, aE, wE = batch_E
    oU, aU, wU = batch_U
    nE = len(wE)
    if nE == 0 or len(wU) == 0:
        raise ValueError("both batches must be non-empty")
    x, caches = model.local_outputs(np.concatenate([oE, oU]), np.concatenate([aE, aU]))
    m, mcache = model.mixer.forward(x)
    loss, gE, gU = clipped_objective(m[:nE], m[nE:], np.asarray(wE), np.asarray(wU), model.eps)
    g = np.concatenate([gE, gU])
    mgrads, gx = model.mixer.backward(mcache, g)
    grads = model.locals.backward(caches, [gx[:, i:i + 1] for i in range(model.n_agents)])
    grads.update(prefixed("eta.", mgrads))
    return loss, grads


def disc_loss(model: DiscModel, batch_E, batch_U) -> float:
    return disc_loss_and_grad(model, batch_E, batch_U)[0]


def train_discriminator(D_E: Dataset, D_U: Dataset, cfg: TrainConfig, gamma: float,
                        mixer=MixerVariant.LINEAR, eps: float = EPS, bound: float = LOG_RATIO_BOUND,
                        metrics: MetricsLog | None = None) -> DiscModel:
    if D_E.dims != D_U.dims:
        raise ValueError("expert and union datasets must share dimensions")
    model = DiscModel(D_E.obs_sizes, D_E.action_sizes, cfg.hidden, mixer, eps, bound, cfg.seed)
    tE, tU = D_E.transitions(gamma), D_U.transitions(gamma)
    opt = Adam(model.params, lr=cfg.lr)
    rng = make_rng(cfg.seed, "disc-batches")
    src_E = BatchSource(rng, tE.weights, cfg.batch_size, tE.obs, tE.actions)
    src_U = BatchSource(rng, tU.weights, cfg.batch_size, tU.obs, tU.actions)
    for step in range(1, cfg.steps + 1):
        iE, wE = src_E.draw()
        iU, wU = src_U.draw()
        loss, grads = disc_loss_and_grad(model, (tE.obs[iE], tE.actions[iE], wE), (tU.obs[iU], tU.actions[iU], wU))
        check_finite(loss, "discriminator", step)
        opt.step(grads)
        if metrics is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            metrics.add("discriminator", step, "loss", loss)
    return model


def tabular_optimal_c(counts_E, counts_U) -> np.ndarray:
    """Closed-form optimum ``rho_E / (rho_E + rho_U)`` of normalised counts; NaN where both vanish."""
    cE, cU = np.asarray(counts_E, dtype=float), np.asarray(counts_U, dtype=float)
    if np.any(cE < 0) or np.any(cU < 0) or cE.sum() <= 0 or cU.sum() <= 0:
        raise ValueError("counts must be non-negative with positive totals")
    rE, rU = cE / cE.sum(), cU / cU.sum()
    den = rE + rU
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, rE / np.where(den > 0, den, 1.0), np.nan)


def optimal_c_at(table: np.ndarray, index) -> float:
    value = float(table[index])
    if np.isnan(value):
        raise ValueError(f"cell {index} is unseen in both datasets; the optimum is undefined there")
    return value
