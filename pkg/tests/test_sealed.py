"""Learners never read environment rewards or source labels."""

import ast
from pathlib import Path

import numpy as np
import pytest

import misodice
from misodice import env
from misodice.baselines import train_bc, train_indd
from misodice.data import Dataset, build_unlabeled, sealed_source
from misodice.phase1 import train_pref_model
from misodice.pipeline import StageConfigs, train_misodice
from misodice.preference import RuleProvider, sample_pairs
from misodice.training import TrainConfig

PKG = Path(misodice.__file__).parent
LEARNERS = ["ratio.py", "dice.py", "policy.py", "phase1.py", "baselines.py", "pipeline.py", "training.py",
            "approx/nets.py", "approx/mixers.py", "approx/optim.py"]
SEALED_NAMES = {"sealed_rewards", "sealed_source", "_sealed_rewards", "_sealed_source"}


@pytest.mark.parametrize("name", LEARNERS)
def test_learner_sources_never_name_sealed_fields(name):
    tree = ast.parse((PKG / name).read_text())
    used = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
    used |= {n.attr for n in ast.walk(tree) if isinstance(n, ast.Attribute)}
    used |= {a.name for n in ast.walk(tree) if isinstance(n, ast.ImportFrom) for a in n.names}
    assert not used & SEALED_NAMES


def _strip(ds: Dataset) -> Dataset:
    return Dataset(*ds.dims, [t.replace(sealed_rewards=None, sealed_source=None) for t in ds], ds.provenance)


@pytest.fixture(scope="module")
def datasets():
    mdp = env.build_benchmark({"family": "team-grid"})
    ex = env.solve_expert(mdp)
    U = build_unlabeled(env.collect(mdp, ex, 6, 5, 0, "expert"),
                        env.collect(mdp, env.degrade(ex, 0.8, mdp), 12, 5, 0, "poor"), 0)
    E = U.subset([t.traj_id for t in U if sealed_source(t) == "expert"])
    return E, U


def _same_params(a, b):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_training_is_identical_without_sealed_fields(datasets):
    E, U = datasets
    cfg = TrainConfig(steps=15, batch_size=16, lr=0.05, hidden=(4,))
    st = StageConfigs(cfg, cfg, cfg)
    full, bare = train_misodice(E, U, st, 0.99), train_misodice(_strip(E), _strip(U), st, 0.99)
    _same_params(full.policies.params, bare.policies.params)
    _same_params(train_bc(E, U, 0.5, cfg).params, train_bc(_strip(E), _strip(U), 0.5, cfg).params)
    _same_params(train_indd(E, U, st, 0.99).params, train_indd(_strip(E), _strip(U), st, 0.99).params)


def test_preference_model_only_sees_labels(datasets):
    _, U = datasets
    prefs = RuleProvider().label(sample_pairs(U, 30, 0), U)
    cfg = TrainConfig(steps=10, batch_size=0, lr=0.05, hidden=())
    _same_params(train_pref_model(prefs, U, cfg, 0.99).params, train_pref_model(prefs, _strip(U), cfg, 0.99).params)
