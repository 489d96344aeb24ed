"""Small hand-built instances with known answers, shared by `verify` and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import make_rng
from .data import Dataset, Trajectory, union
from .env import TabularTeamMDP, build_benchmark, degrade, solve_expert
from .oracle import exact_occupancy

MATRIX_CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))
EXPERT_COUNTS = (1, 1, 1, 3)
MIX_COUNTS = (5, 1, 7, 5)


def single_step_dataset(cells, counts, first_id: int = 0) -> Dataset:
    """Length-1 trajectories on a one-state, 2-agent game; ``counts[k]`` copies of ``cells[k]``."""
    n = len(cells[0])
    trajs, k = [], first_id
    for cell, c in zip(cells, counts):
        for _ in range(int(c)):
            trajs.append(Trajectory(np.zeros((2, n), dtype=int), np.array([cell]), traj_id=k))
            k += 1
    return Dataset(n, (1,) * n, (2,) * n, trajs, provenance="single-step fixture")


@dataclass(frozen=True)
class MatrixFixture:
    mdp: TabularTeamMDP
    expert: Dataset
    mix: Dataset
    union: Dataset
    counts_E: np.ndarray
    counts_U: np.ndarray


def matrix_fixture(scale: int = 10, gamma: float = 0.99) -> MatrixFixture:
    """The one-state 2x2 game with expert counts (1,1,1,3) and mixed counts (5,1,7,5), times ``scale``."""
    E = single_step_dataset(MATRIX_CELLS, [c * scale for c in EXPERT_COUNTS])
    M = single_step_dataset(MATRIX_CELLS, [c * scale for c in MIX_COUNTS], first_id=len(E))
    mdp = build_benchmark({"family": "matrix-repeat", "n_agents": 2, "n_actions": 2, "discount": gamma})
    cE = np.array(EXPERT_COUNTS, dtype=float)
    return MatrixFixture(mdp, E, M, union(E, M), cE, cE + np.array(MIX_COUNTS, dtype=float))


@dataclass(frozen=True)
class OccupancyPair:
    name: str
    mdp: TabularTeamMDP
    rho_E: np.ndarray
    rho_U: np.ndarray


def oracle_fixtures(seed: int = 1) -> list:
    """Expert-ish and union-ish occupancies on every benchmark family.

    ``rho_E`` is a lightly degraded optimal policy's occupancy and ``rho_U``
    mixes it half and half with a random policy's, so the union covers the
    expert support.
    """
    out = []
    configs = [("team-chain", {"family": "team-chain", "length": 4, "discount": 0.9}),
               ("matrix-repeat", {"family": "matrix-repeat", "discount": 0.5}),
               ("team-grid-2x2", {"family": "team-grid", "width": 2, "height": 2, "discount": 0.95}),
               ("team-grid-3x3", {"family": "team-grid", "width": 3, "height": 3, "discount": 0.99})]
    for name, cfg in configs:
        mdp = build_benchmark(cfg)
        rng = make_rng(seed, "oracle-fixture", name)
        pe = degrade(solve_expert(mdp), 0.3).table
        pu = rng.dirichlet(np.ones(mdp.n_joint_actions), size=mdp.n_states)
        rho_E = exact_occupancy(mdp, pe).rho
        rho_U = 0.5 * exact_occupancy(mdp, pu).rho + 0.5 * rho_E
        out.append(OccupancyPair(name, mdp, rho_E, rho_U))
    return out


def wbc_fixtures(seed: int = 0, n_random: int = 3) -> list:
    """2-agent, 2-action weighted samples ``(obs, actions, weights, obs_sizes, action_sizes)``.

    One single-state instance with every joint action present, one with equal
    weights, and ``n_random`` instances with two local observations per agent.
    """
    out = []
    acts = np.array(MATRIX_CELLS)
    rng = make_rng(seed, "wbc-fixtures")
    out.append((np.zeros((4, 2), dtype=int), acts, rng.uniform(0.1, 2.0, size=4), (1, 1), (2, 2)))
    out.append((np.zeros((4, 2), dtype=int), acts, np.ones(4), (1, 1), (2, 2)))
    for _ in range(n_random):
        m = 40
        obs = rng.integers(0, 2, size=(m, 2))
        act = rng.integers(0, 2, size=(m, 2))
        out.append((obs, act, rng.exponential(size=m), (2, 2), (2, 2)))
    return out


@dataclass(frozen=True)
class DecomposedInstance:
    """One-step game whose reward is ``phi_0 + sum_i phi_i r_i(o_i, a_i)`` under a product behaviour policy."""

    obs_sizes: tuple
    action_sizes: tuple
    r: list          # per agent (O_i, A_i)
    mu: list         # per agent (O_i, A_i), rows sum to one
    phi: np.ndarray
    phi0: float
    alpha: float

    def joint_samples(self):
        """Every joint (obs, action) cell with its behaviour probability mass (uniform over joint obs)."""
        grid_o = np.array(np.unravel_index(np.arange(int(np.prod(self.obs_sizes))), self.obs_sizes)).T
        grid_a = np.array(np.unravel_index(np.arange(int(np.prod(self.action_sizes))), self.action_sizes)).T
        obs = np.repeat(grid_o, len(grid_a), axis=0)
        act = np.tile(grid_a, (len(grid_o), 1))
        mass = np.full(len(obs), 1.0 / len(grid_o))
        for i in range(len(self.obs_sizes)):
            mass *= self.mu[i][obs[:, i], act[:, i]]
        return obs, act, mass

    def team_reward(self, obs, act) -> np.ndarray:
        return self.phi0 + sum(self.phi[i] * self.r[i][obs[:, i], act[:, i]] for i in range(len(self.r)))


def decomposed_instance(seed: int = 0, alpha: float = 0.05) -> DecomposedInstance:
    rng = make_rng(seed, "decomposed-instance")
    obs_sizes, action_sizes = (2, 3), (3, 2)
    r = [rng.normal(size=(o, a)) for o, a in zip(obs_sizes, action_sizes)]
    mu = [rng.dirichlet(np.ones(a), size=o) for o, a in zip(obs_sizes, action_sizes)]
    return DecomposedInstance(obs_sizes, action_sizes, r, mu, rng.uniform(0.5, 2.0, size=2),
                              float(rng.normal()), alpha)


@dataclass(frozen=True)
class ValueFixture:
    """Random transitions over a small joint observation grid, for probing the value loss."""

    obs_sizes: tuple
    obs: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    log_ratio: np.ndarray
    weights: np.ndarray
    init_obs: np.ndarray
    gamma: float


def value_fixture(seed: int = 0, n: int = 24, gamma: float = 0.9) -> ValueFixture:
    rng = make_rng(seed, "value-fixture")
    sizes = (2, 3)
    draw = lambda m: np.stack([rng.integers(0, k, size=m) for k in sizes], axis=1)
    w = rng.uniform(0.2, 1.0, size=n)
    return ValueFixture(sizes, draw(n), draw(n), rng.random(n) < 0.15, rng.normal(size=n), w / w.sum(),
                        draw(5), gamma)
