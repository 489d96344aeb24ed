"""Policy extraction by weighted behaviour cloning, plus tabular certificates.

Every agent fits ``pi_i(a_i | o_i)`` to the union data with the shared team
weight ``w(s, a)``. The tabular helpers give the exact maximisers of the
weighted log-likelihood so trained policies and the closed-form softmax can
be checked against them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._rng import make_rng
from .approx import Adam
from .approx import checkpoint as ckpt
from .training import LocalNets, assign_params, MetricsLog, TrainConfig, check_finite, draw_batch, merge_duplicates, one_hot_spec


class LocalPolicySet:
    """Per-agent categorical policies; unavailable actions get probability 0."""

    def __init__(self, obs_sizes, action_sizes, hidden=(256,), masks=None, seed: int = 0):
        self.obs_sizes, self.action_sizes = tuple(obs_sizes), tuple(action_sizes)
        self.n_agents = len(self.obs_sizes)
        self.hidden, self.seed = tuple(hidden), seed
        if masks is None:
            masks = [np.ones((o, a), dtype=bool) for o, a in zip(self.obs_sizes, self.action_sizes)]
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        for m, o, a in zip(self.masks, self.obs_sizes, self.action_sizes):
            if m.shape != (o, a) or not m.any(axis=1).all():
                raise ValueError("each mask must be (O_i, A_i) with an available action per row")
        self.nets = LocalNets("pi", [one_hot_spec([o], a, self.hidden)
                                     for o, a in zip(self.obs_sizes, self.action_sizes)], seed)

    @property
    def params(self) -> dict:
        return self.nets.params

    def _logits(self, obs):
        obs = np.asarray(obs)
        outs, caches = self.nets.forward([obs[:, i] for i in range(self.n_agents)])
        outs = [np.where(self.masks[i][obs[:, i]], z, -np.inf) for i, z in enumerate(outs)]
        return outs, caches

    def log_probs_all(self, agent: int, local_obs) -> np.ndarray:
        """``(B, A_i)`` log-probabilities for observations of one agent."""
        net = self.nets[agent]
        o = np.asarray(local_obs)
        z = np.where(self.masks[agent][o], net(o), -np.inf)
        return z - logsumexp(z, axis=1, keepdims=True)

    def probs(self, agent: int, local_obs) -> np.ndarray:
        return np.exp(self.log_probs_all(agent, local_obs))

    def table(self, agent: int) -> np.ndarray:
        return self.probs(agent, np.arange(self.obs_sizes[agent]))

    def tables(self) -> list:
        return [self.table(i) for i in range(self.n_agents)]

    def meta(self) -> dict:
        return {"kind": "policy", "obs_sizes": self.obs_sizes, "action_sizes": self.action_sizes,
                "hidden": self.hidden, "seed": self.seed}

    def save(self, path):
        params = dict(self.params)
        params.update({f"mask{i}": m.astype(float) for i, m in enumerate(self.masks)})
        ckpt.save(path, params, self.meta())

    @classmethod
    def load(cls, path) -> "LocalPolicySet":
        params, meta = ckpt.load(path)
        n = len(meta["obs_sizes"])
        masks = [params.pop(f"mask{i}") > 0.5 for i in range(n)]
        pol = cls(meta["obs_sizes"], meta["action_sizes"], meta["hidden"], masks, meta["seed"])
        assign_params(pol.params, params)
        return pol


@dataclass
class TabularPolicySet:
    """Fixed local tables ``(O_i, A_i)``, e.g. a closed-form or greedy policy."""

    local_tables: list

    @property
    def n_agents(self) -> int:
        return len(self.local_tables)

    def table(self, agent: int) -> np.ndarray:
        return self.local_tables[agent]

    def tables(self) -> list:
        return list(self.local_tables)

    def save(self, path):
        ckpt.save(path, {f"table{i}": np.asarray(t, dtype=float) for i, t in enumerate(self.local_tables)},
                  {"kind": "tabular-policy", "n_agents": self.n_agents})

    @classmethod
    def load(cls, path) -> "TabularPolicySet":
        params, meta = ckpt.load(path)
        return cls([params[f"table{i}"] for i in range(meta["n_agents"])])


def load_policies(path):
    """Either policy checkpoint kind, by its recorded kind."""
    _, meta = ckpt.load(path)
    kinds = {"policy": LocalPolicySet, "tabular-policy": TabularPolicySet}
    if meta.get("kind") not in kinds:
        raise ckpt.CheckpointError(f"{path} is a {meta.get('kind')!r} checkpoint, not a policy")
    return kinds[meta["kind"]].load(path)


def joint_table(policies, mdp) -> np.ndarray:
    """Product policy ``prod_i pi_i(a_i | Z_i(s))`` on the joint space ``(S, A)``."""
    acts = mdp.joint_action_tuple(np.arange(mdp.n_joint_actions))
    out = np.ones((mdp.n_states, mdp.n_joint_actions))
    for i, tab in enumerate(policies.tables()):
        out *= tab[mdp.obs_map[i]][:, acts[:, i]]
    return out


def wbc_loss_and_grad(policies: LocalPolicySet, obs, actions, w, sample_weights=None):
    """``-sum_k p_k w_k sum_i log pi_i(a_ik | o_ik)``; ``p`` defaults to the uniform mean."""
    obs, actions, w = np.asarray(obs), np.asarray(actions), np.asarray(w, dtype=float)
    B = len(w)
    p = np.full(B, 1.0 / B) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    coef = p * w
    outs, caches = policies._logits(obs)
    loss = 0.0
    grads_out = []
    rows = np.arange(B)
    for i, z in enumerate(outs):
        if not policies.masks[i][obs[:, i], actions[:, i]].all():
            raise ValueError(f"agent {i}: a taken action is unavailable under the mask (data/model mismatch)")
        lp = z - logsumexp(z, axis=1, keepdims=True)
        loss -= coef @ lp[rows, actions[:, i]]
        prob = np.exp(lp)
        g = coef[:, None] * prob
        g[rows, actions[:, i]] -= coef
        grads_out.append(g)
    return float(loss), policies.nets.backward(caches, grads_out)


def wbc_loss(policies: LocalPolicySet, obs, actions, w, sample_weights=None) -> float:
    return wbc_loss_and_grad(policies, obs, actions, w, sample_weights)[0]


def extract_policies(batch, obs_sizes, action_sizes, cfg: TrainConfig, masks=None,
                     metrics: MetricsLog | None = None, stage: str = "policy") -> LocalPolicySet:
    """Fit local policies to ``batch`` (a :class:`WeightedBatch`) by weighted BC."""
    pol = LocalPolicySet(obs_sizes, action_sizes, cfg.hidden, masks, cfg.seed)
    opt = Adam(pol.params, lr=cfg.lr)
    rng = make_rng(cfg.seed, "policy-batches")
    if cfg.batch_size == 0:
        # full batch: fold sample weight and correction weight into one coefficient per distinct pair
        idx, coef = merge_duplicates(batch.sample_weights * batch.weights, batch.obs, batch.actions)
        full = (batch.obs[idx], batch.actions[idx], coef, np.ones(len(idx)))
    for step in range(1, cfg.steps + 1):
        if cfg.batch_size == 0:
            loss, grads = wbc_loss_and_grad(pol, *full)
        else:
            idx, bw = draw_batch(rng, batch.sample_weights, cfg.batch_size)
            loss, grads = wbc_loss_and_grad(pol, batch.obs[idx], batch.actions[idx], batch.weights[idx], bw)
        check_finite(loss, stage, step)
        opt.step(grads)
        if metrics is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            metrics.add(stage, step, "loss", loss)
    return pol


# -- exact tabular maximisers -----------------------------------------------------------

def _normalise_rows(counts):
    tot = counts.sum(axis=1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / counts.shape[1])
    return np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), uniform)


def tabular_wbc_global(obs, actions, weights, obs_sizes, action_sizes) -> np.ndarray:
    """Unrestricted joint maximiser ``pi(a | s) ∝ sum of w`` keyed by flattened joint observation."""
    obs, actions = np.asarray(obs), np.asarray(actions)
    n = len(obs_sizes)
    s = np.ravel_multi_index(tuple(obs[:, i] for i in range(n)), obs_sizes)
    a = np.ravel_multi_index(tuple(actions[:, i] for i in range(n)), action_sizes)
    counts = np.zeros((int(np.prod(obs_sizes)), int(np.prod(action_sizes))))
    np.add.at(counts, (s, a), np.asarray(weights, dtype=float))
    return _normalise_rows(counts)


def tabular_wbc_local(obs, actions, weights, obs_sizes, action_sizes, agent: int) -> np.ndarray:
    """Exact local maximiser ``pi_i(a_i | o_i) ∝ sum of w over matching samples``."""
    obs, actions = np.asarray(obs), np.asarray(actions)
    counts = np.zeros((obs_sizes[agent], action_sizes[agent]))
    np.add.at(counts, (obs[:, agent], actions[:, agent]), np.asarray(weights, dtype=float))
    return _normalise_rows(counts)


def factorized_wbc_optimum(obs, actions, weights, obs_sizes, action_sizes,
                           tol: float = 1e-14, max_iter: int = 100_000, step: float = 0.5) -> list:
    """Maximise the global weighted log-likelihood over product policies.

    Runs exponentiated-gradient ascent on the product of simplices using the
    gradient of ``sum_k w_k log prod_i pi_i(a_ik | o_ik)``; it never uses the
    closed-form marginal counts.
    """
    obs, actions = np.asarray(obs), np.asarray(actions)
    w = np.asarray(weights, dtype=float)
    n = len(obs_sizes)
    logs = [np.full((o, a), -np.log(a)) for o, a in zip(obs_sizes, action_sizes)]
    for _ in range(max_iter):
        tabs = [np.exp(lg) for lg in logs]
        joint = np.ones(len(w))
        for i in range(n):
            joint *= tabs[i][obs[:, i], actions[:, i]]
        moved = 0.0
        for i in range(n):
            grad = np.zeros_like(tabs[i])
            np.add.at(grad, (obs[:, i], actions[:, i]), w * (joint / tabs[i][obs[:, i], actions[:, i]]) / joint)
            # per-observation step 1 / (row mass), exponent capped for stability
            mass = np.zeros(obs_sizes[i])
            np.add.at(mass, obs[:, i], w)
            expo = np.minimum(grad / np.where(mass > 0, mass, 1.0)[:, None], 10.0)
            lg = logs[i] + step * expo
            lg -= logsumexp(lg, axis=1, keepdims=True)
            moved = max(moved, float(np.abs(np.exp(lg) - tabs[i]).max()))
            logs[i] = lg
        if moved < tol:
            break
    tabs = [np.exp(lg) for lg in logs]
    seen = [np.zeros(o, dtype=bool) for o in obs_sizes]
    for i in range(n):
        seen[i][obs[:, i][w > 0]] = True
        tabs[i][~seen[i]] = 1.0 / action_sizes[i]
    return tabs


@dataclass(frozen=True)
class ConsistencyReport:
    max_deviation: float
    local_tables: list
    factorized_tables: list

    @property
    def ok(self) -> bool:
        return self.max_deviation < 1e-6


def _product_on_grid(tabs, obs_sizes, action_sizes):
    n = len(tabs)
    grid_o = np.array(np.unravel_index(np.arange(int(np.prod(obs_sizes))), obs_sizes)).T
    grid_a = np.array(np.unravel_index(np.arange(int(np.prod(action_sizes))), action_sizes)).T
    out = np.ones((len(grid_o), len(grid_a)))
    for i in range(n):
        out *= tabs[i][grid_o[:, i]][:, grid_a[:, i]]
    return out


def consistency_check(obs, actions, weights, obs_sizes, action_sizes) -> ConsistencyReport:
    """Compare the product of per-agent optima with the factorised global optimum on every joint cell."""
    n = len(obs_sizes)
    local = [tabular_wbc_local(obs, actions, weights, obs_sizes, action_sizes, i) for i in range(n)]
    glob = factorized_wbc_optimum(obs, actions, weights, obs_sizes, action_sizes)
    dev = np.abs(_product_on_grid(local, obs_sizes, action_sizes)
                 - _product_on_grid(glob, obs_sizes, action_sizes)).max()
    return ConsistencyReport(float(dev), local, glob)


@dataclass(frozen=True)
class ClosedFormInputs:
    q: list          # per agent (O_i, A_i) local Q-values
    mu: list         # per agent (O_i, A_i) behaviour policies
    phi: np.ndarray  # mixer weights phi_1..phi_n
    alpha: float

    def __post_init__(self):
        for m in self.mu:
            if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, atol=1e-12):
                raise ValueError("behaviour policy rows must sum to one")
        if not all(np.all(np.isfinite(q)) for q in self.q):
            raise ValueError("local Q-values must be finite")


def closed_form_local(inputs: ClosedFormInputs, agent: int, o: int) -> np.ndarray:
    """``softmax(phi_i * q_i(o, .) / (1 + alpha) + log mu_i(. | o))``; ``phi_i = 0`` gives ``mu_i`` exactly."""
    if inputs.phi[agent] == 0.0:
        return np.array(inputs.mu[agent][o], dtype=float)
    with np.errstate(divide="ignore"):
        z = inputs.phi[agent] * inputs.q[agent][o] / (1.0 + inputs.alpha) + np.log(inputs.mu[agent][o])
    return np.exp(z - logsumexp(z))
