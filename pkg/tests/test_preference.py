import json

import numpy as np
import pytest

from misodice.data import Dataset, Trajectory
from misodice.preference import (HttpProvider, Label, MalformedResponse, MockLabeller, NoisyProvider, PreferencePair,
                                 RuleProvider, TransportError, http_label, load_table, make_provider, pair_id,
                                 rule_label, sample_pairs, trajectory_summary)


def _ds(returns):
    trajs = [Trajectory(np.zeros((3, 2), dtype=int), np.zeros((2, 2), dtype=int), traj_id=k,
                        sealed_rewards=[g, 0.0], sealed_source="x") for k, g in enumerate(returns)]
    return Dataset(2, (1, 1), (1, 1), trajs)


def test_sample_pairs_distinct_until_exhausted():
    ds = _ds(range(6))
    pairs = sample_pairs(ds, 15, seed=0)
    assert len({frozenset(p) for p in pairs}) == 15
    assert all(a != b for a, b in pairs)
    more = sample_pairs(ds, 20, seed=0)
    assert len(more) == 20 and len({frozenset(p) for p in more}) == 15


def test_sample_pairs_deterministic_and_needs_two():
    ds = _ds(range(5))
    assert sample_pairs(ds, 7, 3) == sample_pairs(ds, 7, 3)
    with pytest.raises(ValueError):
        sample_pairs(_ds([1.0]), 1, 0)


def test_rule_label_prefers_higher_return_ties_to_first():
    ds = _ds([1.0, 2.0, 2.0])
    assert rule_label((0, 1), ds).preferred == 1
    assert rule_label((1, 0), ds).preferred == 1
    assert rule_label((2, 1), ds).label is Label.FIRST


def test_rule_label_rejects_unknown_ids():
    with pytest.raises(KeyError):
        rule_label((0, 9), _ds([1.0, 2.0]))


def test_pair_needs_two_trajectories():
    with pytest.raises(ValueError):
        PreferencePair(1, 1, Label.FIRST, "x")


def test_noisy_provider_flip_rate():
    ds = _ds(range(40))
    pairs = sample_pairs(ds, 700, seed=1)
    clean = RuleProvider().label(pairs, ds)
    noisy = NoisyProvider(0.3, seed=2).label(pairs, ds)
    rate = np.mean([c.label != n.label for c, n in zip(clean, noisy)])
    assert 0.25 < rate < 0.35
    assert NoisyProvider(0.0, 2).label(pairs, ds) == [PreferencePair(p.id_a, p.id_b, p.label, "noisy(0.0)")
                                                       for p in clean]
    with pytest.raises(ValueError):
        NoisyProvider(0.6, 0)


def test_summary_never_contains_sealed_fields():
    ds = _ds([5.0])
    body = json.dumps(trajectory_summary(ds[0]))
    assert "5.0" not in body and "x" not in body.replace("obs", "")


def test_http_provider_against_mock_server():
    ds = _ds([0.0, 1.0, 2.0])
    table = {pair_id(0, 1): "b", pair_id(2, 1): "a"}
    with MockLabeller(table, default="a") as srv:
        prov = make_provider("http", endpoint=srv.url, timeout=5)
        out = prov.label([(0, 1), (2, 1), (0, 2)], ds)
        assert [p.preferred for p in out] == [1, 2, 0]
        assert sorted(srv.requests) == sorted([pair_id(0, 1), pair_id(2, 1), pair_id(0, 2)])
        assert all(p.provider_tag == "http" for p in out)


def test_http_malformed_answer():
    ds = _ds([0.0, 1.0])
    with MockLabeller({}, default="maybe") as srv:
        with pytest.raises(MalformedResponse):
            http_label((0, 1), ds, srv.url)


def test_http_unreachable_raises_transport_error():
    srv = MockLabeller()
    url = srv.url
    srv.stop()   # never started: the port is closed
    with pytest.raises(TransportError):
        http_label((0, 1), _ds([0.0, 1.0]), url, timeout=0.5, retries=1)


def test_make_provider_validation():
    assert isinstance(make_provider("rule"), RuleProvider)
    with pytest.raises(ValueError):
        make_provider("http")
    with pytest.raises(ValueError):
        make_provider("oracle")
    with pytest.raises(ValueError):
        HttpProvider("http://x", max_in_flight=0)


def test_load_table(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"0-1": "a"}))
    assert load_table(p) == {"0-1": "a"}
