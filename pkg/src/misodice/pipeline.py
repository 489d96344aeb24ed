"""The three learning stages in order, plus evaluation of the resulting policies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approx import MixerVariant
from .data import Dataset
from .dice import DEFAULT_ALPHA, ValueModel, WeightedBatch, train_values, weighted_batch
from .env import TabularTeamMDP, monte_carlo_returns
from .policy import LocalPolicySet, extract_policies, joint_table
from .ratio import DiscModel, train_discriminator
from .training import MetricsLog, TrainConfig


@dataclass(frozen=True)
class StageConfigs:
    disc: TrainConfig = field(default_factory=TrainConfig)
    value: TrainConfig = field(default_factory=TrainConfig)
    policy: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class MisoResult:
    disc: DiscModel
    values: ValueModel
    batch: WeightedBatch
    policies: LocalPolicySet


def train_misodice(D_E: Dataset, D_U: Dataset, stages: StageConfigs, gamma: float,
                   alpha: float = DEFAULT_ALPHA, mixer=MixerVariant.LINEAR, masks=None,
                   metrics: MetricsLog | None = None) -> MisoResult:
    """Discriminator, then values, then weighted BC; ``mixer`` is used by both mixed stages."""
    mixer = MixerVariant(mixer)
    disc = train_discriminator(D_E, D_U, stages.disc, gamma, mixer=mixer, metrics=metrics)
    values = train_values(D_E, D_U, disc, stages.value, gamma, alpha, mixer=mixer, metrics=metrics)
    batch = weighted_batch(values, disc, D_U)
    policies = extract_policies(batch, D_U.obs_sizes, D_U.action_sizes, stages.policy, masks, metrics)
    return MisoResult(disc, values, batch, policies)


@dataclass(frozen=True)
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray   # (seeds, episodes)

    @property
    def seed_means(self) -> np.ndarray:
        return self.returns.mean(axis=1)


def evaluate(policies, mdp: TabularTeamMDP, horizon: int, episodes: int = 32, seeds: int = 4,
             seed: int = 0) -> EvalResult:
    """Undiscounted return of the product of local policies over ``seeds`` x ``episodes`` rollouts."""
    r = monte_carlo_returns(mdp, joint_table(policies, mdp), horizon, episodes, seeds, seed)
    return EvalResult(float(r.mean()), float(r.std()), r)
