"""Desk-scale cooperative team MDPs, behaviour policies and rollouts.

Three families are shipped:

``matrix-repeat``
    one state, a repeated team matrix game;
``team-chain``
    agents share a position on a line and only move when they agree
    (all right: +1, all left: -1, otherwise stay); the team is paid for
    pushing right together at the right end;
``team-grid``
    each agent walks its own small grid (stay/up/down/left/right, optional
    slip) and the team is paid only while every agent stands on the shared
    goal cell.

Global state, transitions and the team reward stay with the environment.
Agent ``i`` only sees ``obs_map[i][s]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._rng import make_rng
from .data import Dataset, Trajectory


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TabularTeamMDP:
    n_agents: int
    local_actions: tuple
    obs_map: np.ndarray          # (n_agents, S) observation index of each state
    obs_sizes: tuple
    transition: np.ndarray       # (S, A, S)
    init_dist: np.ndarray        # (S,)
    discount: float
    team_reward: np.ndarray      # (S, A); hidden from learners
    action_masks: tuple | None = None   # per agent (O_i, A_i) availability
    name: str = "custom"

    def __post_init__(self):
        self.validate()

    def validate(self):
        S, A = self.n_states, self.n_joint_actions
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.team_reward.shape != (S, A):
            raise ValueError("team_reward must be (S, A)")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(-1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("transition rows must be distributions")
        if np.any(self.init_dist < 0) or abs(self.init_dist.sum() - 1.0) > 1e-12:
            raise ValueError("init_dist must be a distribution")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.obs_map.shape != (self.n_agents, S):
            raise ValueError("obs_map must give every agent an observation for every state")
        if np.any(self.obs_map < 0) or np.any(self.obs_map >= np.asarray(self.obs_sizes)[:, None]):
            raise ValueError("obs_map values outside observation spaces")
        if self.action_masks is not None:
            for i, m in enumerate(self.action_masks):
                if m.shape != (self.obs_sizes[i], self.local_actions[i]) or not m.any(axis=1).all():
                    raise ValueError(f"agent {i}: mask must be (O_i, A_i) with an available action per row")

    @property
    def n_states(self) -> int:
        return self.init_dist.shape[0]

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.local_actions))

    def joint_action_index(self, actions) -> np.ndarray:
        a = np.asarray(actions)
        return np.ravel_multi_index(tuple(a[..., i] for i in range(self.n_agents)), self.local_actions)

    def joint_action_tuple(self, index) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(index), self.local_actions), axis=-1)

    def observe(self, states) -> np.ndarray:
        """Joint observation rows for an array of state indices."""
        return self.obs_map[:, np.asarray(states)].T

    def local_mask(self, agent: int) -> np.ndarray:
        if self.action_masks is None:
            return np.ones((self.obs_sizes[agent], self.local_actions[agent]), dtype=bool)
        return self.action_masks[agent]

    def joint_mask(self) -> np.ndarray:
        """(S, A) availability of each joint action."""
        acts = self.joint_action_tuple(np.arange(self.n_joint_actions))
        m = np.ones((self.n_states, self.n_joint_actions), dtype=bool)
        for i in range(self.n_agents):
            m &= self.local_mask(i)[self.obs_map[i]][:, acts[:, i]]
        return m

    def state_of_obs(self, joint_obs) -> np.ndarray:
        """Map joint observations back to states (every shipped family is injective)."""
        flat = np.ravel_multi_index(tuple(self.obs_map), self.obs_sizes)
        lookup = np.full(int(np.prod(self.obs_sizes)), -1, dtype=np.int64)
        lookup[flat] = np.arange(self.n_states)
        if len(np.unique(flat)) != self.n_states:
            raise ValueError("joint observation does not identify the state")
        jo = np.asarray(joint_obs)
        idx = np.ravel_multi_index(tuple(jo[..., i] for i in range(self.n_agents)), self.obs_sizes)
        out = lookup[idx]
        if np.any(out < 0):
            raise ValueError("joint observation not produced by any state")
        return out


@dataclass(frozen=True, eq=False)
class JointPolicy:
    table: np.ndarray     # (S, A)
    factorized: bool = False

    def __post_init__(self):
        t = self.table
        if t.ndim != 2 or np.any(t < 0) or not np.allclose(t.sum(1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("policy rows must be probability distributions")


# -- families -----------------------------------------------------------------

def _range(cfg, key, default, lo, hi):
    v = cfg.get(key, default)
    if not lo <= v <= hi:
        raise ValueError(f"{key}={v} outside supported range [{lo}, {hi}]")
    return v


_FAMILY_KEYS = {"matrix-repeat": {"n_agents", "n_actions", "payoff"},
                "team-chain": {"n_agents", "length"},
                "team-grid": {"n_agents", "width", "height", "slip"}}


def build_benchmark(config: dict) -> TabularTeamMDP:
    """Build one of the shipped families from ``{"family": ..., params}``."""
    cfg = dict(config)
    family = cfg.pop("family", None)
    builders = {"matrix-repeat": _matrix_repeat, "team-chain": _team_chain, "team-grid": _team_grid}
    if family not in builders:
        raise ValueError(f"unknown environment family {family!r}; choose from {sorted(builders)}")
    unknown = set(cfg) - _FAMILY_KEYS[family] - {"discount"}
    if unknown:
        raise ValueError(f"unknown {family} parameter(s): {sorted(unknown)}")
    discount = float(_range(cfg, "discount", 0.99, 0.0, 0.999999))
    return builders[family](cfg, discount)


def _matrix_repeat(cfg, discount):
    n = int(_range(cfg, "n_agents", 2, 1, 3))
    k = int(_range(cfg, "n_actions", 2, 2, 5))
    A = k ** n
    payoff = cfg.get("payoff")
    if payoff is None:
        payoff = np.zeros(A)
        payoff[0] = 1.0
    payoff = np.asarray(payoff, dtype=float).reshape(-1)
    if payoff.shape != (A,):
        raise ValueError(f"payoff must list {A} joint-action values")
    return TabularTeamMDP(
        n_agents=n, local_actions=(k,) * n, obs_map=np.zeros((n, 1), dtype=np.int64),
        obs_sizes=(1,) * n, transition=np.ones((1, A, 1)), init_dist=np.ones(1),
        discount=discount, team_reward=payoff[None, :].copy(), name=f"matrix-repeat(n={n},k={k})")


def _team_chain(cfg, discount):
    n = int(_range(cfg, "n_agents", 2, 1, 3))
    L = int(_range(cfg, "length", 3, 3, 6))
    A = 2 ** n
    acts = np.array(list(itertools.product(range(2), repeat=n)))  # 0 = left, 1 = right
    T = np.zeros((L, A, L))
    R = np.zeros((L, A))
    for s in range(L):
        for j, a in enumerate(acts):
            if a.all():
                nxt = min(s + 1, L - 1)
                R[s, j] = 1.0 if s == L - 1 else 0.0
            elif not a.any():
                nxt = max(s - 1, 0)
            else:
                nxt = s
            T[s, j, nxt] = 1.0
    P0 = np.zeros(L)
    P0[0] = 1.0
    return TabularTeamMDP(
        n_agents=n, local_actions=(2,) * n, obs_map=np.tile(np.arange(L), (n, 1)),
        obs_sizes=(L,) * n, transition=T, init_dist=P0, discount=discount, team_reward=R,
        name=f"team-chain(n={n},length={L})")


_MOVES = np.array([(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)])  # stay, up, down, left, right (dx, dy)
_MAX_DENSE = 20_000_000


def _team_grid(cfg, discount):
    n = int(_range(cfg, "n_agents", 2, 2, 3))
    W = int(_range(cfg, "width", 3, 2, 4))
    H = int(_range(cfg, "height", 3, 2, 4))
    slip = float(_range(cfg, "slip", 0.0, 0.0, 0.5))
    C = W * H
    S, A = C ** n, 5 ** n
    if S * A * S > _MAX_DENSE:
        raise ValueError(f"team-grid {W}x{H} with {n} agents exceeds the dense size limit")
    goal = C - 1
    # per-agent cell transition kernel (C, 5, C)
    local = np.zeros((C, 5, C))
    for c in range(C):
        x, y = c % W, c // W
        for m, (dx, dy) in enumerate(_MOVES):
            nx, ny = min(max(x + dx, 0), W - 1), min(max(y + dy, 0), H - 1)
            local[c, m, ny * W + nx] += 1.0 - slip
            for m2, (dx2, dy2) in enumerate(_MOVES):
                nx2, ny2 = min(max(x + dx2, 0), W - 1), min(max(y + dy2, 0), H - 1)
                local[c, m, ny2 * W + nx2] += slip / 5.0
    cells = np.array(list(itertools.product(range(C), repeat=n)))        # state -> per-agent cells
    moves = np.array(list(itertools.product(range(5), repeat=n)))        # joint action -> moves
    T = np.ones((S, A, S))
    for i in range(n):
        T *= local[cells[:, i]][:, moves[:, i]][:, :, cells[:, i]]
    at_goal = (cells == goal).all(axis=1).astype(float)
    R = T @ at_goal
    start = np.array([c for c in range(C) if c % W == 0 and c != goal])
    P0 = np.isin(cells, start).all(axis=1).astype(float)
    P0 /= P0.sum()
    return TabularTeamMDP(
        n_agents=n, local_actions=(5,) * n, obs_map=cells.T.copy(), obs_sizes=(C,) * n,
        transition=T, init_dist=P0, discount=discount, team_reward=R,
        name=f"team-grid(n={n},{W}x{H},slip={slip})")


# -- behaviour policies -------------------------------------------------------

def q_values(mdp: TabularTeamMDP, tol=1e-10, max_iter=200_000) -> np.ndarray:
    """Optimal discounted Q table by value iteration."""
    V = np.zeros(mdp.n_states)
    mask = mdp.joint_mask()
    for _ in range(max_iter):
        Q = mdp.team_reward + mdp.discount * mdp.transition @ V
        V_new = np.where(mask, Q, -np.inf).max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            return mdp.team_reward + mdp.discount * mdp.transition @ V_new
        V = V_new
    raise ConvergenceError(f"value iteration did not converge within {max_iter} sweeps (gamma={mdp.discount})")


def greedy_rows(Q: np.ndarray, mask=None, rel_tol=1e-9) -> np.ndarray:
    """Index of the best entry per row; near-ties go to the lowest index.

    Ties are judged relative to each row's spread, so positive affine
    rescaling of ``Q`` never changes the choice.
    """
    Q = np.where(mask, Q, -np.inf) if mask is not None else Q
    best = Q.max(axis=1, keepdims=True)
    finite = np.where(np.isfinite(Q), Q, best)
    spread = best - finite.min(axis=1, keepdims=True)
    return np.argmax(Q >= best - rel_tol * spread, axis=1)


def solve_expert(mdp: TabularTeamMDP, tol: float = 1e-10) -> JointPolicy:
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q = q_values(mdp, tol)
    a = greedy_rows(Q, mdp.joint_mask())
    table = np.zeros_like(Q)
    table[np.arange(mdp.n_states), a] = 1.0
    return JointPolicy(table, factorized=is_factorized(mdp, table))


def degrade(policy: JointPolicy, eps: float, mdp: TabularTeamMDP | None = None) -> JointPolicy:
    """Mix with the uniform policy over (available) joint actions."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if mdp is not None and mdp.action_masks is not None:
        m = mdp.joint_mask().astype(float)
        uni = m / m.sum(1, keepdims=True)
    else:
        uni = np.full_like(policy.table, 1.0 / policy.table.shape[1])
    table = (1.0 - eps) * policy.table + eps * uni
    table /= table.sum(1, keepdims=True)
    return JointPolicy(table, factorized=policy.factorized and eps in (0.0, 1.0))


def is_factorized(mdp: TabularTeamMDP, table: np.ndarray, atol=1e-12) -> bool:
    """Whether ``table(a|s)`` equals a product of local ``pi_i(a_i | Z_i(s))``."""
    shape = (mdp.n_states, *mdp.local_actions)
    t = table.reshape(shape)
    prod = np.ones(shape)
    for i in range(mdp.n_agents):
        axes = tuple(1 + j for j in range(mdp.n_agents) if j != i)
        marg = t.sum(axis=axes)                       # (S, A_i)
        for o in range(mdp.obs_sizes[i]):
            rows = marg[mdp.obs_map[i] == o]
            if len(rows) and not np.allclose(rows, rows[0], atol=atol):
                return False
        bshape = [mdp.n_states] + [1] * mdp.n_agents
        bshape[1 + i] = mdp.local_actions[i]
        prod = prod * marg.reshape(bshape)
    return bool(np.allclose(prod, t, atol=atol))


# -- sampling -----------------------------------------------------------------

def _sample_rows(rng, probs_rows):
    u = rng.random(probs_rows.shape[0])
    c = np.cumsum(probs_rows, axis=1)
    return np.minimum((u[:, None] >= c).sum(axis=1), probs_rows.shape[1] - 1)


def rollout(mdp: TabularTeamMDP, policy: JointPolicy | np.ndarray, horizon: int, seed: int,
            traj_id: int = 0, terminal_at_horizon: bool = False, source: str | None = None) -> Trajectory:
    """Sample one fixed-horizon episode.

    By default the horizon is a time limit, not a termination: the final
    next observation is stored and no step is flagged terminal.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    table = policy.table if isinstance(policy, JointPolicy) else np.asarray(policy)
    rng = make_rng(seed, "rollout")
    s = int(_sample_rows(rng, mdp.init_dist[None, :])[0])
    states, actions, rewards = [s], [], []
    for _ in range(horizon):
        a = int(_sample_rows(rng, table[s][None, :])[0])
        rewards.append(mdp.team_reward[s, a])
        s = int(_sample_rows(rng, mdp.transition[s, a][None, :])[0])
        actions.append(a)
        states.append(s)
    terms = np.zeros(horizon, dtype=bool)
    terms[-1] = terminal_at_horizon
    return Trajectory(mdp.observe(states), mdp.joint_action_tuple(actions), terms, traj_id,
                      sealed_rewards=rewards, sealed_source=source)


def collect(mdp: TabularTeamMDP, policy: JointPolicy, n_episodes: int, horizon: int, seed: int,
            source: str | None = None, terminal_at_horizon: bool = False) -> Dataset:
    """``n_episodes`` rollouts, episode ``k`` seeded from ``(seed, k)``."""
    trajs = [rollout(mdp, policy, horizon, make_rng(seed, source or "", k).integers(2**63),
                     traj_id=k, terminal_at_horizon=terminal_at_horizon, source=source)
             for k in range(n_episodes)]
    return Dataset(mdp.n_agents, mdp.obs_sizes, mdp.local_actions, trajs,
                   provenance=f"{mdp.name}|{source}|seed={seed}")


def sample_discounted_visits(mdp: TabularTeamMDP, policy: JointPolicy, n_steps: int, seed: int) -> np.ndarray:
    """Visit counts (S, A) from episodes cut with probability ``1 - gamma`` per step.

    Every visited pair counts once, so normalised counts estimate the
    discounted occupancy.
    """
    rng = make_rng(seed, "geometric-visits")
    counts = np.zeros((mdp.n_states, mdp.n_joint_actions))
    s = int(_sample_rows(rng, mdp.init_dist[None, :])[0])
    for _ in range(n_steps):
        a = int(_sample_rows(rng, policy.table[s][None, :])[0])
        counts[s, a] += 1
        if rng.random() < 1.0 - mdp.discount:
            s = int(_sample_rows(rng, mdp.init_dist[None, :])[0])
        else:
            s = int(_sample_rows(rng, mdp.transition[s, a][None, :])[0])
    return counts


def expected_return(mdp: TabularTeamMDP, table: np.ndarray, horizon: int) -> float:
    """Exact undiscounted ``horizon``-step return from the initial distribution."""
    V = np.zeros(mdp.n_states)
    for _ in range(horizon):
        V = (table * (mdp.team_reward + mdp.transition @ V)).sum(axis=1)
    return float(mdp.init_dist @ V)


def monte_carlo_returns(mdp: TabularTeamMDP, table: np.ndarray, horizon: int,
                        episodes: int = 32, seeds: int = 4, seed: int = 0) -> np.ndarray:
    """Undiscounted returns, shape (seeds, episodes); episodes are run in lock-step."""
    out = np.zeros((seeds, episodes))
    for k in range(seeds):
        rng = make_rng(seed, "evaluate", k)
        s = _sample_rows(rng, np.tile(mdp.init_dist, (episodes, 1)))
        for _ in range(horizon):
            a = _sample_rows(rng, table[s])
            out[k] += mdp.team_reward[s, a]
            s = _sample_rows(rng, mdp.transition[s, a])
    return out
