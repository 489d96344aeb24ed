import numpy as np
import pytest

from misodice import baselines, env
from misodice.baselines import BaselineConfig, Method
from misodice.data import build_unlabeled, sealed_source
from misodice.errors import DivergenceError
from misodice.phase1 import PrefQVModel
from misodice.pipeline import StageConfigs, train_misodice
from misodice.policy import LocalPolicySet
from misodice.training import MetricsLog, TrainConfig


@pytest.fixture(scope="module")
def grid_data():
    mdp = env.build_benchmark({"family": "team-grid"})
    ex = env.solve_expert(mdp)
    E = env.collect(mdp, ex, 10, 6, 0, "expert")
    P = env.collect(mdp, env.degrade(ex, 0.8, mdp), 30, 6, 0, "poor")
    U = build_unlabeled(E, P, 0)
    return mdp, E, U


def _batch(ds):
    return baselines._uniform_steps(ds)


def test_bc_loss_is_linear_in_beta(grid_data):
    _, E, U = grid_data
    pol = LocalPolicySet(U.obs_sizes, U.action_sizes, (), seed=0)
    rng = np.random.default_rng(0)
    for v in pol.params.values():
        v += rng.normal(size=v.shape)
    bE, bU = _batch(E), _batch(U)
    l0, g0 = baselines.bc_loss_and_grad(pol, bE, bU, 0.0)
    l1, g1 = baselines.bc_loss_and_grad(pol, bE, bU, 1.0)
    for beta in (0.25, 0.6):
        lb, gb = baselines.bc_loss_and_grad(pol, bE, bU, beta)
        assert abs(lb - (beta * l1 + (1 - beta) * l0)) < 1e-12
        for k in gb:
            np.testing.assert_allclose(gb[k], beta * g1[k] + (1 - beta) * g0[k], atol=1e-12)


def test_bc_extremes_skip_the_unused_source(grid_data):
    _, E, U = grid_data
    pol = LocalPolicySet(U.obs_sizes, U.action_sizes, (), seed=0)
    l1, _ = baselines.bc_loss_and_grad(pol, _batch(E), None, 1.0)
    l0, _ = baselines.bc_loss_and_grad(pol, None, _batch(U), 0.0)
    assert np.isfinite(l0) and np.isfinite(l1)


def test_bc_beta_one_imitates_expert(grid_data):
    mdp, E, U = grid_data
    cfg = TrainConfig(steps=300, batch_size=0, lr=0.1, hidden=())
    pol = baselines.train_bc(E, U, 1.0, cfg)
    from misodice.policy import joint_table
    assert env.expected_return(mdp, joint_table(pol, mdp), 10) > 3.0
    with pytest.raises(ValueError):
        baselines.train_bc(E, U, 1.5, cfg)


def test_baseline_config_validation():
    BaselineConfig("bc", beta=0.5)
    BaselineConfig(Method.INDD)
    with pytest.raises(ValueError):
        BaselineConfig("bc")
    with pytest.raises(ValueError):
        BaselineConfig("indd", beta=0.5)
    with pytest.raises(ValueError):
        BaselineConfig("bc", beta=-0.1)


def test_indd_with_one_agent_equals_misodice():
    mdp = env.build_benchmark({"family": "team-chain", "n_agents": 1, "length": 4, "discount": 0.9})
    ex = env.solve_expert(mdp)
    E = env.collect(mdp, ex, 8, 6, 1, "expert")
    P = env.collect(mdp, env.degrade(ex, 0.9), 20, 6, 1, "poor")
    U = build_unlabeled(E, P, 1)
    D_E = U.subset([tr.traj_id for tr in U if sealed_source(tr) == "expert"])
    cfg = TrainConfig(steps=200, batch_size=0, lr=0.05, hidden=())
    st = StageConfigs(cfg, cfg, cfg)
    a = baselines.train_indd(D_E, U, st, 0.9)
    b = train_misodice(D_E, U, st, 0.9).policies
    np.testing.assert_array_equal(np.argmax(a.table(0), axis=1), np.argmax(b.table(0), axis=1))
    np.testing.assert_allclose(a.table(0), b.table(0), atol=1e-12)


def test_indd_metrics_are_tagged_per_agent(grid_data):
    _, E, U = grid_data
    cfg = TrainConfig(steps=2, batch_size=0, lr=0.01, hidden=(), log_every=1)
    m = MetricsLog("indd")
    baselines.train_indd(E, U, StageConfigs(cfg, cfg, cfg), 0.99, metrics=m)
    stages = {r[1] for r in m.rows}
    assert {"agent0/discriminator", "agent1/values", "agent1/policy"} <= stages


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the run is forced to overflow
def test_indd_divergence_names_the_agent(grid_data):
    _, E, U = grid_data
    cfg = TrainConfig(steps=3, batch_size=0, lr=1e300, hidden=())
    with pytest.raises(DivergenceError, match="agent 0/"):
        baselines.train_indd(E, U, StageConfigs(cfg, cfg, cfg), 0.99, alpha=0.0)


def test_phase1_greedy_respects_masks_and_ties():
    model = PrefQVModel((2,), (3,), 0.9, hidden=(), seed=0)
    model.q.nets[0].params["b0"][...] = [1.0, 5.0, 5.0]
    pol = baselines.phase1_greedy(model)
    np.testing.assert_array_equal(pol.table(0), [[0, 1, 0], [0, 1, 0]])
    masks = [np.array([[True, False, True], [True, True, True]])]
    pol = baselines.phase1_greedy(model, masks)
    np.testing.assert_array_equal(pol.table(0), [[0, 0, 1], [0, 1, 0]])


def test_phase1_greedy_follows_mixer_sign():
    model = PrefQVModel((1,), (2,), 0.9, hidden=(), seed=0)
    model.q.nets[0].params["b0"][...] = [1.0, 2.0]
    model.q_mixer.params["phi"][...] = -1.0
    np.testing.assert_array_equal(baselines.phase1_greedy(model).table(0), [[1, 0]])
