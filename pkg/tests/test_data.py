import numpy as np
import pytest

from misodice import data, env
from misodice.data import Dataset, Trajectory


def _traj(k, T=3, src=None, rewards=None):
    obs = np.arange((T + 1) * 2).reshape(T + 1, 2) % 3
    act = np.ones((T, 2), dtype=int)
    return Trajectory(obs, act, traj_id=k, sealed_rewards=rewards, sealed_source=src)


def _ds(n=4):
    return Dataset(2, (3, 3), (2, 2), [_traj(k, rewards=np.full(3, k), src="poor") for k in range(n)],
                   provenance="test")


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 2)))          # obs needs T+1 rows
    with pytest.raises(ValueError):
        Trajectory(np.zeros((1, 2)), np.zeros((0, 2)))          # empty
    with pytest.raises(ValueError):
        Trajectory(np.zeros((2, 2)), np.zeros((1, 2)), terminals=[True, False])


def test_trajectory_arrays_are_read_only():
    tr = _traj(0)
    with pytest.raises(ValueError):
        tr.obs[0, 0] = 5


def test_dataset_rejects_duplicates_and_out_of_range():
    with pytest.raises(ValueError, match="duplicate"):
        Dataset(2, (3, 3), (2, 2), [_traj(0), _traj(0)])
    with pytest.raises(ValueError, match="outside"):
        Dataset(2, (2, 2), (2, 2), [_traj(0)])


def test_roundtrip_preserves_everything(tmp_path):
    ds = _ds()
    path = tmp_path / "d.bin"
    data.save(ds, path)
    back = data.load(path)
    assert back == ds
    assert data.sealed_source(back[1]) == "poor"
    np.testing.assert_array_equal(data.sealed_rewards(back[2]), [2, 2, 2])


def test_serialisation_is_byte_stable():
    assert data.dumps(_ds()) == data.dumps(_ds())


def test_corruption_is_detected():
    raw = bytearray(data.dumps(_ds()))
    raw[40] ^= 0xFF
    with pytest.raises(data.ChecksumError):
        data.loads(bytes(raw))
    with pytest.raises(data.DatasetFormatError):
        data.loads(b"NOTADATA" + bytes(64))
    with pytest.raises(data.TruncatedRecordError):
        data.loads(b"MISO")


def test_version_mismatch_rejected():
    import hashlib
    raw = bytearray(data.dumps(_ds())[:-32])
    raw[8] = 9
    raw = bytes(raw) + hashlib.sha256(bytes(raw)).digest()
    with pytest.raises(data.VersionError):
        data.loads(raw)


def test_transitions_weights_are_discounted_and_normalised():
    t = _ds(2).transitions(0.5)
    assert len(t) == 6
    np.testing.assert_allclose(t.weights.sum(), 1.0)
    np.testing.assert_allclose(t.weights[:3] / t.weights[0], [1.0, 0.5, 0.25])


def test_empty_dataset_has_no_transitions():
    with pytest.raises(ValueError):
        Dataset(2, (3, 3), (2, 2)).transitions(0.9)


def test_build_unlabeled_seals_source_and_shuffles():
    mdp = env.build_benchmark({"family": "team-grid"})
    ex = env.solve_expert(mdp)
    E = env.collect(mdp, ex, 5, 4, 0, "expert")
    P = env.collect(mdp, env.degrade(ex, 1.0), 7, 4, 0, "poor")
    U = data.build_unlabeled(E, P, seed=3)
    assert U.ids == list(range(12))
    assert sorted(data.sealed_source(t) for t in U) == ["expert"] * 5 + ["poor"] * 7
    assert U == data.build_unlabeled(E, P, seed=3)


def test_union_renumbers_only_on_collision():
    a = _ds(2)
    b = Dataset(2, (3, 3), (2, 2), [_traj(5), _traj(6)])
    assert data.union(a, b).ids == [0, 1, 5, 6]
    assert data.union(a, a).ids == [0, 1, 2, 3]


def test_agent_view_projects_columns():
    v = _ds(2).agent_view(1)
    assert v.n_agents == 1 and v.obs_sizes == (3,)
    np.testing.assert_array_equal(v[0].obs[:, 0], _ds(2)[0].obs[:, 1])


def test_sealed_rewards_missing_raises():
    with pytest.raises(LookupError):
        data.sealed_rewards(_traj(0))
