"""Comparison methods: BC(beta), per-agent DICE (INDD), the VDN-mixed variant
and greedy extraction from the preference model."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ._rng import make_rng
from .approx import Adam, MixerVariant
from .data import Dataset
from .dice import DEFAULT_ALPHA
from .errors import DivergenceError
from .phase1 import PrefQVModel
from .pipeline import MisoResult, StageConfigs, train_misodice
from .policy import LocalPolicySet, TabularPolicySet, wbc_loss_and_grad
from .training import MetricsLog, TrainConfig, BatchSource, check_finite


class Method(str, enum.Enum):
    MISODICE = "misodice"
    BC = "bc"
    INDD = "indd"
    VDN = "vdn"
    PHASE1_GREEDY = "phase1-greedy"


@dataclass(frozen=True)
class BaselineConfig:
    method: Method
    beta: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if (self.beta is not None) != (self.method is Method.BC):
            raise ValueError("beta is required for BC and meaningless for other methods")
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


def _uniform_steps(ds: Dataset):
    t = ds.transitions(1.0)
    return t.obs, t.actions, np.full(len(t), 1.0 / len(t))


def bc_loss_and_grad(policies: LocalPolicySet, batch_E, batch_U, beta: float):
    """``beta * NLL(D^E) + (1 - beta) * NLL(D^U)``; a zero coefficient skips its batch."""
    loss, grads = 0.0, {k: np.zeros_like(v) for k, v in policies.params.items()}
    for coef, batch in ((beta, batch_E), (1.0 - beta, batch_U)):
        if coef == 0.0:
            continue
        obs, act, p = batch
        l, g = wbc_loss_and_grad(policies, obs, act, np.ones(len(p)), p)
        loss += coef * l
        for k, v in g.items():
            grads[k] += coef * v
    return loss, grads


def train_bc(D_E: Dataset, D_U: Dataset, beta: float, cfg: TrainConfig, masks=None,
             metrics: MetricsLog | None = None) -> LocalPolicySet:
    """Behaviour cloning on a beta-mixture of the expert and union data (uniform over steps)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    pol = LocalPolicySet(D_U.obs_sizes, D_U.action_sizes, cfg.hidden, masks, cfg.seed)
    oE, aE, pE = _uniform_steps(D_E) if beta > 0 else (None, None, None)
    oU, aU, pU = _uniform_steps(D_U) if beta < 1 else (None, None, None)
    opt = Adam(pol.params, lr=cfg.lr)
    rng = make_rng(cfg.seed, "bc-batches")
    src_E = None if pE is None else BatchSource(rng, pE, cfg.batch_size, oE, aE)
    src_U = None if pU is None else BatchSource(rng, pU, cfg.batch_size, oU, aU)
    for step in range(1, cfg.steps + 1):
        bE = bU = None
        if src_E is not None:
            i, w = src_E.draw()
            bE = (oE[i], aE[i], w)
        if src_U is not None:
            i, w = src_U.draw()
            bU = (oU[i], aU[i], w)
        loss, grads = bc_loss_and_grad(pol, bE, bU, beta)
        check_finite(loss, "bc", step)
        opt.step(grads)
        if metrics is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            metrics.add("bc", step, "loss", loss)
    return pol


def combine_local_policies(parts, obs_sizes, action_sizes, hidden, masks=None, seed: int = 0) -> LocalPolicySet:
    """Stack single-agent policy sets into one set, agent ``i`` taken from ``parts[i]``."""
    out = LocalPolicySet(obs_sizes, action_sizes, hidden, masks, seed)
    for i, part in enumerate(parts):
        for k, v in part.params.items():
            out.params[f"pi{i}.{k.split('.', 1)[1]}"][...] = v
    return out


def train_indd(D_E: Dataset, D_U: Dataset, stages: StageConfigs, gamma: float,
               alpha: float = DEFAULT_ALPHA, masks=None, metrics: MetricsLog | None = None) -> LocalPolicySet:
    """The full three-stage pipeline run separately on each agent's marginal data."""
    parts = []
    for i in range(D_U.n_agents):
        sub = None if metrics is None else MetricsLog(metrics.method)
        try:
            res = train_misodice(D_E.agent_view(i), D_U.agent_view(i), stages, gamma, alpha,
                                 MixerVariant.LINEAR, None if masks is None else [masks[i]], sub)
        except DivergenceError as err:
            raise DivergenceError(f"agent {i}/{err.stage}", err.step, err.detail) from err
        if sub is not None:
            metrics.rows.extend((m, f"agent{i}/{s}", t, k, v) for m, s, t, k, v in sub.rows)
        parts.append(res.policies)
    return combine_local_policies(parts, D_U.obs_sizes, D_U.action_sizes, stages.policy.hidden,
                                  masks, stages.policy.seed)


def train_vdn_variant(D_E: Dataset, D_U: Dataset, stages: StageConfigs, gamma: float,
                      alpha: float = DEFAULT_ALPHA, masks=None, metrics: MetricsLog | None = None) -> MisoResult:
    return train_misodice(D_E, D_U, stages, gamma, alpha, MixerVariant.VDN, masks, metrics)


def phase1_greedy(model: PrefQVModel, masks=None) -> TabularPolicySet:
    """Deterministic local policies maximising each agent's mixed contribution ``phi_i * Q_i``.

    Unavailable actions are never chosen; ties go to the lowest action index.
    """
    phi = model.q_mixer.params["phi"]
    tables = []
    for i, (o_n, a_n) in enumerate(zip(model.obs_sizes, model.action_sizes)):
        q = phi[i] * model.q[i](np.arange(o_n))
        if masks is not None:
            q = np.where(masks[i], q, -np.inf)
        tab = np.zeros((o_n, a_n))
        tab[np.arange(o_n), np.argmax(q, axis=1)] = 1.0
        tables.append(tab)
    return TabularPolicySet(tables)
