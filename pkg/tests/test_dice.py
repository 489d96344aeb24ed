import math

import numpy as np
import pytest

from misodice import dice
from misodice.approx import MixerVariant, gradient_check
from misodice.fixtures import value_fixture
from misodice.verify import value_probe


def _setup(mixer=MixerVariant.LINEAR, hidden=(), seed=0):
    fx = value_fixture(seed)
    model = dice.ValueModel(fx.obs_sizes, hidden=hidden, mixer=mixer, alpha=0.3, gamma=fx.gamma, seed=seed)
    rng = np.random.default_rng(seed)
    for v in model.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    batch = dice.ValueBatch(fx.obs, fx.next_obs, fx.terminals, fx.log_ratio, fx.weights)
    return fx, model, batch


def test_weight_closed_form():
    assert dice.weight(1.0 + 0.5, 0.5) == pytest.approx(1.0)
    assert dice.inner_max_check(2.3, 0.7)
    assert dice.inner_argmax(-30.0, 0.0) == pytest.approx(math.exp(-31.0), rel=1e-6)


def test_golden_section_on_quadratic():
    assert dice.golden_section_max(lambda x: -(x - 1.25) ** 2, -3, 4) == pytest.approx(1.25, abs=1e-9)


def test_simplified_objective_equals_lagrangian():
    fx, model, batch = _setup()
    a = dice.value_loss(model, batch, fx.init_obs)
    b = dice.value_loss_lagrangian(model, batch, fx.init_obs)
    assert a == pytest.approx(b, rel=1e-12)


@pytest.mark.parametrize("mixer", list(MixerVariant))
@pytest.mark.parametrize("hidden", [(), (4,)])
def test_value_gradient(mixer, hidden):
    fx, model, batch = _setup(mixer, hidden)
    err = gradient_check(lambda: dice.value_loss_and_grad(model, batch, fx.init_obs), model.params)
    assert err < 1e-5


def test_advantage_skips_bootstrap_at_terminals():
    fx, model, batch = _setup()
    A = dice.advantage(model, batch.log_ratio, batch.obs, batch.next_obs, batch.terminals)
    t = batch.terminals
    np.testing.assert_allclose(A[t], batch.log_ratio[t] - model.nu_tot(batch.obs[t]))


def test_alpha_must_be_non_negative():
    with pytest.raises(ValueError):
        dice.ValueModel((2,), alpha=-0.1)
    with pytest.raises(ValueError):
        dice.ValueModel((2,), gamma=1.0)


def test_linear_value_loss_is_not_jointly_convex():
    """Block-wise convexity does not extend to varying values and mixer together (bilinear coupling)."""
    rep = value_probe(MixerVariant.LINEAR, blocks=("joint",), n_segments=300, tol=1e-8)
    assert len(rep.violations) > 0


def test_checkpoint_roundtrip(tmp_path):
    fx, model, batch = _setup(MixerVariant.TWO_LAYER, (3,))
    model.save(tmp_path / "v")
    back = dice.ValueModel.load(tmp_path / "v")
    np.testing.assert_array_equal(back.nu_tot(fx.obs), model.nu_tot(fx.obs))
    assert back.alpha == model.alpha and back.gamma == model.gamma
