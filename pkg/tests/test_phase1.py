import numpy as np
import pytest

from misodice import phase1
from misodice.approx import gradient_check
from misodice.data import Dataset, Trajectory
from misodice.preference import Label, PreferencePair, RuleProvider, sample_pairs
from misodice.training import TrainConfig


def _latent_dataset(n=60, T=4, seed=0):
    """One agent, 3 observations, 2 actions; action 1 earns 1, so a trajectory's return counts its 1s."""
    rng = np.random.default_rng(seed)
    trajs = []
    for k in range(n):
        act = (rng.random((T, 1)) < rng.random()).astype(int)
        obs = rng.integers(0, 3, size=(T + 1, 1))
        trajs.append(Trajectory(obs, act, traj_id=k, sealed_rewards=act[:, 0].astype(float)))
    return Dataset(1, (3,), (2,), trajs)


@pytest.fixture(scope="module")
def fitted():
    ds = _latent_dataset()
    prefs = [p for p in RuleProvider().label(sample_pairs(ds, 600, 0), ds)]
    cfg = TrainConfig(steps=400, batch_size=0, lr=0.05, hidden=(), seed=0)
    return ds, prefs, phase1.train_pref_model(prefs, ds, cfg, gamma=0.99)


def test_separable_preferences_are_learned(fitted):
    ds, prefs, model = fitted
    strict = [p for p in prefs if ds.by_id(p.id_a).actions.sum() != ds.by_id(p.id_b).actions.sum()]
    assert phase1.preference_accuracy(model, strict, ds) >= 0.99


def test_recovered_return_orders_latent_return(fitted):
    ds, _, model = fitted
    rec = phase1.recover_rewards(model, ds)
    latent = np.array([tr.actions.sum() for tr in ds])
    hi, lo = rec.returns[latent == latent.max()], rec.returns[latent == latent.min()]
    assert hi.min() > lo.max()


def test_reward_recovery_definition(fitted):
    ds, _, model = fitted
    rec = phase1.recover_rewards(model, ds)
    tr = ds[3]
    expect = model.q_tot(tr.obs[:-1], tr.actions) - model.gamma * model.v_tot(tr.obs[1:])
    np.testing.assert_allclose(rec.by_id(3), expect)
    np.testing.assert_allclose(rec.returns[3], expect.sum())


def test_terminal_step_drops_bootstrap():
    ds = Dataset(1, (2,), (2,), [Trajectory([[0], [1]], [[1]], [True], traj_id=0)])
    model = phase1.PrefQVModel((2,), (2,), 0.9, hidden=(), seed=0)
    model.v.nets[0].params["b0"][...] = 5.0
    np.testing.assert_allclose(phase1.recover_rewards(model, ds).by_id(0), model.q_tot([[0]], [[1]]))


def test_soft_max_factorises_over_joint_actions():
    model = phase1.PrefQVModel((2, 3), (3, 2), 0.9, hidden=(), seed=1)
    rng = np.random.default_rng(0)
    for k, v in model.params.items():
        v[...] = rng.normal(size=v.shape)
    obs = np.array([[1, 2]])
    joint = [model.q_tot(obs, [[a, b]])[0] for a in range(3) for b in range(2)]
    np.testing.assert_allclose(model.soft_max_q(obs)[0], np.log(np.exp(joint).sum()), rtol=1e-12)


def test_loss_gradient_matches_finite_differences():
    ds = _latent_dataset(10, 3, seed=2)
    model = phase1.PrefQVModel(ds.obs_sizes, ds.action_sizes, 0.9, hidden=(4,), seed=0)
    rng = np.random.default_rng(1)
    for v in model.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    prefs = RuleProvider().label(sample_pairs(ds, 12, 1), ds)
    steps = phase1._Steps(ds, 0.9)
    win, lose = phase1._pair_arrays(prefs, steps)
    err = gradient_check(lambda: phase1.pref_loss_and_grad(model, steps, win, lose, 0.3), model.params)
    assert err < 1e-5


def test_empty_preferences_rejected():
    with pytest.raises(ValueError, match="empty"):
        phase1.train_pref_model([], _latent_dataset(4), TrainConfig(steps=1, hidden=()), 0.9)


def test_unknown_ids_rejected():
    with pytest.raises(KeyError):
        phase1.train_pref_model([PreferencePair(0, 99, Label.FIRST, "x")], _latent_dataset(4),
                                TrainConfig(steps=1, hidden=()), 0.9)


def test_rank_and_split_ties_go_to_lower_id():
    rec = phase1.RecoveredRewards((5, 2, 9, 1), tuple(np.zeros((4, 1))), np.array([1.0, 3.0, 1.0, 0.0]))
    split = phase1.rank_and_split(rec, 2)
    assert split.expert_ids == (2, 5) and split.mix_ids == (9, 1)
    with pytest.raises(ValueError):
        phase1.rank_and_split(rec, 5)


def test_split_text_roundtrip_and_overlap_check():
    s = phase1.SplitResult((1, 2), (3,), {1: 0.5, 2: 0.25, 3: -1e-300})
    assert phase1.SplitResult.from_text(s.to_text()) == s
    assert s.to_text() == phase1.SplitResult.from_text(s.to_text()).to_text()
    with pytest.raises(ValueError):
        phase1.SplitResult((1,), (1,), {})


def test_model_checkpoint_roundtrip(tmp_path, fitted):
    ds, _, model = fitted
    model.save(tmp_path / "m")
    back = phase1.PrefQVModel.load(tmp_path / "m")
    np.testing.assert_array_equal(phase1.recover_rewards(back, ds).returns, phase1.recover_rewards(model, ds).returns)
