"""Randomised properties of the closed forms and data handling."""

import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from misodice import data, dice, policy, ratio
from misodice.data import Dataset, Trajectory
from misodice.phase1 import RecoveredRewards, rank_and_split

finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(A=finite, alpha=st.floats(0, 10))
def test_closed_form_weight_is_inner_maximiser(A, alpha):
    w = dice.weight(A, alpha)
    f = lambda x: x * (A - (1 + alpha) * math.log(x))
    for x in (w * 0.9, w * 1.1):
        assert f(x) <= f(w) + 1e-12 * max(1.0, abs(f(w)))
    assert dice.inner_max_check(A, alpha)


@settings(max_examples=60, deadline=None)
@given(c=st.floats(1e-4, 1 - 1e-4))
def test_log_ratio_is_antisymmetric_monotone_and_bounded(c):
    r = ratio.log_ratio_of_c(c)
    assert abs(r + ratio.log_ratio_of_c(1 - c)) < 1e-12
    assert ratio.log_ratio_of_c(min(c + 1e-3, 1.0)) >= r
    assert abs(r) <= 10.0


@settings(max_examples=40, deadline=None)
@given(counts=arrays(float, (4,), elements=st.floats(0.1, 10)), phi=st.floats(-3, 3), alpha=st.floats(0, 5))
def test_closed_form_local_is_a_distribution(counts, phi, alpha):
    mu = counts / counts.sum()
    inputs = policy.ClosedFormInputs([np.linspace(-1, 1, 4)[None]], [mu[None]], np.array([phi]), alpha)
    p = policy.closed_form_local(inputs, 0, 0)
    assert abs(p.sum() - 1) < 1e-12 and (p >= 0).all()


@settings(max_examples=40, deadline=None)
@given(ret=arrays(float, st.integers(2, 12), elements=st.sampled_from([0.0, 1.0, 2.0])), data_=st.data())
def test_split_is_a_partition_sorted_by_return(ret, data_):
    ids = tuple(data_.draw(st.permutations(range(100, 100 + len(ret)))))
    k = data_.draw(st.integers(1, len(ret)))
    split = rank_and_split(RecoveredRewards(ids, tuple(np.zeros((len(ret), 1))), ret), k)
    assert sorted(split.expert_ids + split.mix_ids) == sorted(ids)
    g = dict(zip(ids, ret))
    ranked = split.expert_ids + split.mix_ids
    keys = [(-g[i], i) for i in ranked]
    assert keys == sorted(keys)


@st.composite
def trajectories(draw):
    n = draw(st.integers(1, 3))
    T = draw(st.integers(1, 5))
    obs = draw(arrays(np.int32, (T + 1, n), elements=st.integers(0, 3)))
    act = draw(arrays(np.int32, (T, n), elements=st.integers(0, 2)))
    term = draw(arrays(bool, (T,)))
    rew = draw(st.one_of(st.none(), arrays(float, (T,), elements=st.floats(-1e6, 1e6))))
    src = draw(st.one_of(st.none(), st.sampled_from(["expert", "poor"])))
    return Trajectory(obs, act, term, 0, sealed_rewards=rew, sealed_source=src)


@settings(max_examples=50, deadline=None)
@given(trs=st.lists(trajectories(), min_size=0, max_size=4), prov=st.text(max_size=10))
def test_dataset_serialisation_roundtrip(trs, prov):
    n = trs[0].n_agents if trs else 2
    trs = [t.replace(traj_id=k) for k, t in enumerate(trs) if t.n_agents == n]
    ds = Dataset(n, (4,) * n, (3,) * n, trs, provenance=prov)
    assert data.loads(data.dumps(ds)) == ds


@settings(max_examples=30, deadline=None)
@given(w=arrays(float, st.integers(1, 30), elements=st.floats(0.01, 5)), seed=st.integers(0, 1000))
def test_wbc_local_maximiser_is_stationary(w, seed):
    rng = np.random.default_rng(seed)
    obs = rng.integers(0, 2, size=(len(w), 2))
    act = rng.integers(0, 3, size=(len(w), 2))
    tab = policy.tabular_wbc_local(obs, act, w, (2, 2), (3, 3), 0)
    np.testing.assert_allclose(tab.sum(1), 1.0)
    # any re-weighting within a seen row lowers the weighted log-likelihood
    ll = lambda t: np.sum(w * np.log(np.maximum(t[obs[:, 0], act[:, 0]], 1e-300)))
    pert = 0.9 * tab + 0.1 / 3
    assert ll(pert) <= ll(tab) + 1e-9
