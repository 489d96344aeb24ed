"""Preference-based expert identification.

A soft Q/V model is fitted to pairwise trajectory preferences with a
Bradley-Terry likelihood. A trajectory's score is

    sum_t gamma^t * (Q_tot(s_t, a_t) - gamma * (1 - done_t) * V_tot(s_{t+1}))

and ``V_tot`` is tied to the soft maximum of ``Q_tot`` by a squared penalty.
Per-step rewards are then read off as ``Q_tot - gamma * V_tot(next)``,
summed without discount into a return, and the top-k trajectories form the
expert split.

Both team functions use the linear mixer, which makes the soft maximum over
all joint actions factorise:
``logsumexp_a Q_tot(s, a) = phi_0 + sum_i logsumexp_{a_i} phi_i Q_i(o_i, a_i)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from ._rng import make_rng
from .approx import Adam, LinearMixer
from .approx import checkpoint as ckpt
from .data import Dataset
from .preference import Label
from .training import (LocalNets, MetricsLog, TrainConfig, assign_params, check_finite, one_hot_spec,
                       prefixed)

DEFAULT_LAMBDA_V = 0.1


class PrefQVModel:
    def __init__(self, obs_sizes, action_sizes, gamma: float, hidden=(256,), seed: int = 0):
        self.obs_sizes, self.action_sizes = tuple(obs_sizes), tuple(action_sizes)
        self.n_agents = len(self.obs_sizes)
        self.gamma, self.hidden, self.seed = float(gamma), tuple(hidden), seed
        self.q = LocalNets("q", [one_hot_spec([o], a, self.hidden)
                                 for o, a in zip(self.obs_sizes, self.action_sizes)], seed)
        self.v = LocalNets("v", [one_hot_spec([o], 1, self.hidden) for o in self.obs_sizes], seed)
        self.q_mixer = LinearMixer(self.n_agents)
        self.v_mixer = LinearMixer(self.n_agents)

    @property
    def params(self) -> dict:
        return {**self.q.params, **self.v.params, **prefixed("qmix.", self.q_mixer.params),
                **prefixed("vmix.", self.v_mixer.params)}

    def _cols(self, obs):
        obs = np.asarray(obs)
        return [obs[:, i] for i in range(self.n_agents)]

    def local_q(self, obs) -> list:
        """Per agent ``(B, A_i)`` local Q-values."""
        return self.q.forward(self._cols(obs))[0]

    def q_tot(self, obs, actions) -> np.ndarray:
        actions = np.asarray(actions)
        rows = np.arange(len(actions))
        x = np.stack([q[rows, actions[:, i]] for i, q in enumerate(self.local_q(obs))], axis=1)
        return self.q_mixer.forward(x)[0]

    def v_tot(self, obs) -> np.ndarray:
        x = np.concatenate(self.v.forward(self._cols(obs))[0], axis=1)
        return self.v_mixer.forward(x)[0]

    def soft_max_q(self, obs) -> np.ndarray:
        phi, phi0 = self.q_mixer.params["phi"], self.q_mixer.params["phi0"][0]
        return phi0 + sum(logsumexp(phi[i] * q, axis=1) for i, q in enumerate(self.local_q(obs)))

    def meta(self) -> dict:
        return {"kind": "phase1", "obs_sizes": self.obs_sizes, "action_sizes": self.action_sizes,
                "gamma": self.gamma, "hidden": self.hidden, "seed": self.seed}

    def save(self, path):
        ckpt.save(path, self.params, self.meta())

    @classmethod
    def load(cls, path) -> "PrefQVModel":
        params, meta = ckpt.load(path)
        model = cls(meta["obs_sizes"], meta["action_sizes"], meta["gamma"], meta["hidden"], meta["seed"])
        assign_params(model.params, params)
        return model


class _Steps:
    """All steps of a dataset, flattened, with per-trajectory segment offsets."""

    def __init__(self, dataset: Dataset, gamma: float):
        trs = dataset.trajectories
        self.index = {tr.traj_id: k for k, tr in enumerate(trs)}
        self.lengths = np.array([tr.length for tr in trs])
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        self.obs = np.concatenate([tr.obs[:-1] for tr in trs])
        self.next_obs = np.concatenate([tr.obs[1:] for tr in trs])
        self.actions = np.concatenate([tr.actions for tr in trs])
        self.cont = 1.0 - np.concatenate([tr.terminals for tr in trs]).astype(float)
        self.disc = np.concatenate([gamma ** np.arange(tr.length, dtype=float) for tr in trs])

    def rows(self, traj_idx):
        return np.concatenate([np.arange(self.offsets[k], self.offsets[k + 1]) for k in traj_idx])


def _pair_arrays(prefs, steps: _Steps):
    win, lose = [], []
    for p in prefs:
        a, b = steps.index[p.id_a], steps.index[p.id_b]
        win.append(a if p.label is Label.FIRST else b)
        lose.append(b if p.label is Label.FIRST else a)
    return np.array(win), np.array(lose)


def pref_loss_and_grad(model: PrefQVModel, steps: _Steps, win, lose, lambda_v: float = DEFAULT_LAMBDA_V):
    """Bradley-Terry negative log-likelihood plus the soft-consistency penalty."""
    g = model.gamma
    trajs = np.unique(np.concatenate([win, lose]))
    rows = steps.rows(trajs)
    seg = np.repeat(np.arange(len(trajs)), steps.lengths[trajs])
    pos = {t: k for k, t in enumerate(trajs)}
    obs, nxt, act = steps.obs[rows], steps.next_obs[rows], steps.actions[rows]
    cont, disc = steps.cont[rows], steps.disc[rows]
    B, n = len(rows), model.n_agents
    r = np.arange(B)

    phi_q, phi0_q = model.q_mixer.params["phi"], model.q_mixer.params["phi0"][0]
    q_all, q_caches = model.q.forward(model._cols(obs))
    q_taken = np.stack([q[r, act[:, i]] for i, q in enumerate(q_all)], axis=1)
    q_tot = q_taken @ phi_q + phi0_q
    v_loc_s, v_cache_s = model.v.forward(model._cols(obs))
    v_loc_n, v_cache_n = model.v.forward(model._cols(nxt))
    xs, xn = np.concatenate(v_loc_s, axis=1), np.concatenate(v_loc_n, axis=1)
    v_s, v_n = model.v_mixer.forward(xs)[0], model.v_mixer.forward(xn)[0]

    step_score = disc * (q_tot - g * cont * v_n)
    score = np.bincount(seg, weights=step_score, minlength=len(trajs))
    iw = np.array([pos[t] for t in win])
    il = np.array([pos[t] for t in lose])
    delta = score[iw] - score[il]
    P = len(win)
    bt = -np.mean(log_expit(delta))
    d_delta = -expit(-delta) / P
    d_score = np.bincount(iw, weights=d_delta, minlength=len(trajs)) - np.bincount(il, weights=d_delta, minlength=len(trajs))
    d_step = d_score[seg]
    d_qtot = d_step * disc
    d_vn = -d_step * disc * g * cont

    smx_parts = [softmax(phi_q[i] * q, axis=1) for i, q in enumerate(q_all)]
    smx = phi0_q + sum(logsumexp(phi_q[i] * q, axis=1) for i, q in enumerate(q_all))
    err = v_s - smx
    cons = lambda_v * np.mean(err ** 2)
    e = 2.0 * lambda_v * err / B
    d_vs = e
    d_smx = -e

    grads = {"qmix.phi0": np.array([d_qtot.sum() + d_smx.sum()]),
             "qmix.phi": q_taken.T @ d_qtot + np.array([(d_smx * (smx_parts[i] * q).sum(axis=1)).sum()
                                                         for i, q in enumerate(q_all)])}
    gq = []
    for i, q in enumerate(q_all):
        gi = (d_smx * phi_q[i])[:, None] * smx_parts[i]
        gi[r, act[:, i]] += d_qtot * phi_q[i]
        gq.append(gi)
    grads.update(model.q.backward(q_caches, gq))
    vm_s, gx_s = model.v_mixer.backward(xs, d_vs)
    vm_n, gx_n = model.v_mixer.backward(xn, d_vn)
    gs = model.v.backward(v_cache_s, [gx_s[:, i:i + 1] for i in range(n)])
    gn = model.v.backward(v_cache_n, [gx_n[:, i:i + 1] for i in range(n)])
    for k in gs:
        grads[k] = gs[k] + gn[k]
    grads["vmix.phi0"] = vm_s["phi0"] + vm_n["phi0"]
    grads["vmix.phi"] = vm_s["phi"] + vm_n["phi"]
    return float(bt + cons), grads


def train_pref_model(prefs, dataset: Dataset, cfg: TrainConfig, gamma: float,
                     lambda_v: float = DEFAULT_LAMBDA_V, metrics: MetricsLog | None = None) -> PrefQVModel:
    """Fit the soft Q/V model; ``cfg.batch_size`` counts preference pairs (0: all)."""
    prefs = list(prefs)
    if not prefs:
        raise ValueError("the preference set is empty; nothing to fit")
    for p in prefs:
        if p.id_a not in dataset or p.id_b not in dataset:
            raise KeyError(f"pair ({p.id_a}, {p.id_b}) refers to trajectories missing from the dataset")
    steps = _Steps(dataset, gamma)
    win, lose = _pair_arrays(prefs, steps)
    model = PrefQVModel(dataset.obs_sizes, dataset.action_sizes, gamma, cfg.hidden, cfg.seed)
    opt = Adam(model.params, lr=cfg.lr)
    rng = make_rng(cfg.seed, "phase1-batches")
    for step in range(1, cfg.steps + 1):
        if cfg.batch_size and cfg.batch_size < len(win):
            idx = rng.choice(len(win), size=cfg.batch_size, replace=False)
        else:
            idx = np.arange(len(win))
        loss, grads = pref_loss_and_grad(model, steps, win[idx], lose[idx], lambda_v)
        check_finite(loss, "phase1", step)
        opt.step(grads)
        if metrics is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            metrics.add("phase1", step, "loss", loss)
    return model


def trajectory_scores(model: PrefQVModel, dataset: Dataset) -> dict:
    """Discounted training scores per trajectory id."""
    steps = _Steps(dataset, model.gamma)
    s = steps.disc * (model.q_tot(steps.obs, steps.actions)
                      - model.gamma * steps.cont * model.v_tot(steps.next_obs))
    seg = np.repeat(np.arange(len(dataset)), steps.lengths)
    tot = np.bincount(seg, weights=s, minlength=len(dataset))
    return {tr.traj_id: float(tot[k]) for k, tr in enumerate(dataset)}


def preference_accuracy(model: PrefQVModel, prefs, dataset: Dataset) -> float:
    sc = trajectory_scores(model, dataset)
    hits = [sc[p.preferred] > sc[p.id_b if p.preferred == p.id_a else p.id_a] for p in prefs]
    return float(np.mean(hits))


@dataclass(frozen=True)
class RecoveredRewards:
    ids: tuple
    rewards: tuple          # per trajectory, per-step arrays
    returns: np.ndarray     # undiscounted totals G

    def by_id(self, traj_id) -> np.ndarray:
        return self.rewards[self.ids.index(traj_id)]


def recover_rewards(model: PrefQVModel, dataset: Dataset) -> RecoveredRewards:
    """``R = Q_tot(s, a) - gamma * V_tot(s')``, with ``V_tot = 0`` after a terminal step."""
    steps = _Steps(dataset, model.gamma)
    R = model.q_tot(steps.obs, steps.actions) - model.gamma * steps.cont * model.v_tot(steps.next_obs)
    per = tuple(R[steps.offsets[k]:steps.offsets[k + 1]].copy() for k in range(len(dataset)))
    return RecoveredRewards(tuple(dataset.ids), per, np.array([r.sum() for r in per]))


@dataclass(frozen=True)
class SplitResult:
    expert_ids: tuple
    mix_ids: tuple
    scores: dict

    def __post_init__(self):
        if set(self.expert_ids) & set(self.mix_ids):
            raise ValueError("expert and mixed splits overlap")

    def to_text(self) -> str:
        body = {"expert_ids": list(self.expert_ids), "mix_ids": list(self.mix_ids),
                "scores": {str(k): repr(float(v)) for k, v in sorted(self.scores.items())}}
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitResult":
        body = json.loads(text)
        return cls(tuple(body["expert_ids"]), tuple(body["mix_ids"]),
                   {int(k): float(v) for k, v in body["scores"].items()})


def rank_and_split(rewards: RecoveredRewards, k: int) -> SplitResult:
    """Top ``k`` by return; equal returns rank the lower id first."""
    n = len(rewards.ids)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    ids = np.asarray(rewards.ids)
    order = np.lexsort((ids, -rewards.returns))
    ranked = [int(i) for i in ids[order]]
    return SplitResult(tuple(ranked[:k]), tuple(ranked[k:]),
                       {int(i): float(g) for i, g in zip(ids, rewards.returns)})
