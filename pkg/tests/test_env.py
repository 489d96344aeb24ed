import numpy as np
import pytest

from misodice import env


@pytest.fixture(scope="module")
def grid():
    return env.build_benchmark({"family": "team-grid"})


def test_team_grid_dimensions(grid):
    assert grid.n_agents == 2
    assert grid.n_states == 81 and grid.n_joint_actions == 25
    assert grid.obs_sizes == (9, 9)
    np.testing.assert_allclose(grid.transition.sum(-1), 1.0)


@pytest.mark.parametrize("cfg", [
    {"family": "matrix-repeat"}, {"family": "matrix-repeat", "n_agents": 3, "n_actions": 3},
    {"family": "team-chain", "length": 5}, {"family": "team-grid", "width": 2, "height": 2, "slip": 0.2},
])
def test_families_build_valid_mdps(cfg):
    mdp = env.build_benchmark(cfg)
    mdp.validate()
    assert mdp.state_of_obs(mdp.observe(np.arange(mdp.n_states))).tolist() == list(range(mdp.n_states))


@pytest.mark.parametrize("cfg, match", [
    ({"family": "nope"}, "unknown environment family"),
    ({"family": "team-grid", "widht": 3}, "unknown team-grid parameter"),
    ({"family": "team-grid", "width": 9}, "outside supported range"),
    ({"family": "team-chain", "discount": 1.0}, "outside supported range"),
    ({"family": "matrix-repeat", "payoff": [1, 2, 3]}, "payoff"),
])
def test_bad_configs_rejected(cfg, match):
    with pytest.raises(ValueError, match=match):
        env.build_benchmark(cfg)


def test_expert_reaches_goal_and_beats_degraded(grid):
    ex = env.solve_expert(grid)
    poor = env.degrade(ex, 0.8, grid)
    r_ex = env.expected_return(grid, ex.table, 10)
    r_poor = env.expected_return(grid, poor.table, 10)
    assert r_ex > 5.0 and r_poor < 1.0
    assert ex.factorized == env.is_factorized(grid, ex.table)


def test_degrade_endpoints(grid):
    ex = env.solve_expert(grid)
    np.testing.assert_array_equal(env.degrade(ex, 0.0).table, ex.table)
    np.testing.assert_allclose(env.degrade(ex, 1.0).table, 1.0 / grid.n_joint_actions)
    with pytest.raises(ValueError):
        env.degrade(ex, 1.5)


def test_greedy_rows_ties_go_to_lowest_index():
    Q = np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])
    assert env.greedy_rows(Q).tolist() == [1, 0]
    mask = np.array([[True, False, True], [False, True, True]])
    assert env.greedy_rows(Q, mask).tolist() == [2, 1]


def test_greedy_invariant_to_affine_rescaling():
    rng = np.random.default_rng(3)
    Q = rng.integers(0, 3, size=(20, 4)).astype(float)
    assert env.greedy_rows(Q).tolist() == env.greedy_rows(7.5 * Q - 2.0).tolist()


def test_is_factorized_detects_correlated_policy():
    mdp = env.build_benchmark({"family": "matrix-repeat"})
    assert env.is_factorized(mdp, np.full((1, 4), 0.25))
    assert not env.is_factorized(mdp, np.array([[0.5, 0.0, 0.0, 0.5]]))


def test_rollout_is_seeded_and_time_limited(grid):
    ex = env.solve_expert(grid)
    a = env.rollout(grid, ex, 10, seed=4)
    b = env.rollout(grid, ex, 10, seed=4)
    assert a == b
    assert not a.terminals.any()
    assert a.obs.shape == (11, 2)


def test_monte_carlo_matches_exact_return(grid):
    poor = env.degrade(env.solve_expert(grid), 0.5, grid)
    mc = env.monte_carlo_returns(grid, poor.table, 10, episodes=2000, seeds=1, seed=1)
    exact = env.expected_return(grid, poor.table, 10)
    assert abs(mc.mean() - exact) < 4 * mc.std() / np.sqrt(mc.size)


def test_discounted_visits_estimate_occupancy():
    from misodice.oracle import exact_occupancy
    mdp = env.build_benchmark({"family": "team-chain", "discount": 0.8})
    pol = env.degrade(env.solve_expert(mdp), 0.5)
    counts = env.sample_discounted_visits(mdp, pol, 100_000, seed=2)
    tv = 0.5 * np.abs(counts / counts.sum() - exact_occupancy(mdp, pol).rho).sum()
    assert tv < 0.02


def test_value_iteration_raises_when_not_converged(grid):
    with pytest.raises(env.ConvergenceError):
        env.q_values(grid, max_iter=2)
