import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vae4as.datagen import Normalizer
from vae4as.errors import ContractViolation, NumericalError
from vae4as.nn import DenseLayer
from vae4as.vae import (VaeModel, default_architecture, gradient_check, kl_loss,
                        load_checkpoint, reconstruction_loss, reparameterize, save_checkpoint,
                        train_on_window)


def _zero_model(d=2, k=1, hidden=3, **kw):
    enc = [DenseLayer(np.zeros((hidden, d)), np.zeros(hidden))]
    mu = DenseLayer(np.zeros((k, hidden)), np.zeros(k), "linear")
    lv = DenseLayer(np.zeros((k, hidden)), np.zeros(k), "linear")
    dec = [DenseLayer(np.zeros((hidden, k)), np.zeros(hidden)),
           DenseLayer(np.zeros((d, hidden)), np.zeros(d), "sigmoid")]
    return VaeModel(enc, mu, lv, dec, **kw)


def test_kl_examples():
    assert kl_loss([0.0], [0.0]) == 0.0
    assert kl_loss([1.0], [0.0]) == pytest.approx(0.5)
    expected = 0.5 * 2 * (0.25 + 0.25 - math.log(0.25) - 1)
    assert kl_loss([0.5, 0.5], np.log([0.25, 0.25])) == pytest.approx(expected)
    assert expected == pytest.approx(0.8863, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-8, 8)), min_size=1, max_size=6))
def test_kl_nonnegative(pairs):
    mu, lv = np.array(pairs).T
    assert kl_loss(mu, lv) >= -1e-12


def test_reconstruction_examples():
    assert reconstruction_loss([0.3, 0.4], [0.3, 0.4], "squared_error") == 0.0
    assert reconstruction_loss([1.0], [0.5], "binary_cross_entropy") == pytest.approx(math.log(2))
    assert reconstruction_loss([0.2, 0.8], [0.5, 0.5], "binary_cross_entropy") == \
        pytest.approx(2 * math.log(2))
    assert 2 * math.log(2) == pytest.approx(1.3863, abs=1e-4)


def test_reconstruction_rejects_out_of_range_bce():
    with pytest.raises(ContractViolation):
        reconstruction_loss([1.5], [0.5], "binary_cross_entropy")
    with pytest.raises(ContractViolation):
        reconstruction_loss([0.5], [0.5], "hinge")


def test_reparameterize_clamps_and_is_seeded():
    z = reparameterize([1.0], [-np.inf], np.random.default_rng(0))
    assert np.isfinite(z).all()
    zs = np.array([reparameterize([1.0], [-10.0], np.random.default_rng(s))[0] for s in range(200)])
    assert np.mean(np.abs(zs - 1.0) < 0.03) > 0.99
    a = reparameterize([0.0, 1.0], [0.0, 0.0], np.random.default_rng(5))
    b = reparameterize([0.0, 1.0], [0.0, 0.0], np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_zero_encoder_encodes_to_origin():
    code = _zero_model().encode(np.array([0.3, 0.9]))
    assert np.array_equal(code.mu, [0.0])
    assert np.array_equal(code.logvar, [0.0])
    assert np.array_equal(code.z, [0.0])


def test_encode_is_deterministic():
    m = VaeModel.build(4, np.random.default_rng(0))
    x = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.array_equal(m.encode(x).mu, m.encode(x).mu)
    assert np.allclose(m.encode_mean(x[None]), m.encode(x).mu)


def test_zero_model_squared_error_at_half_is_zero():
    m = _zero_model(loss_kind="squared_error")
    # zero decoder outputs sigmoid(0) = 0.5, zero encoder gives KL 0
    assert m.total_loss(np.array([0.5, 0.5])) == 0.0


def test_beta_zero_is_pure_reconstruction():
    m = VaeModel.build(3, np.random.default_rng(2), beta=0.0)
    x = np.array([0.2, 0.5, 0.9])
    xhat = m.decode(m.encode(x).mu)
    assert m.total_loss(x) == pytest.approx(float(reconstruction_loss(x, xhat, m.loss_kind)),
                                            rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), beta=st.sampled_from([0.0, 0.5, 1.0]))
def test_total_loss_bounds(seed, beta):
    rng = np.random.default_rng(seed)
    m = VaeModel.build(3, rng, beta=beta)
    x = rng.uniform(size=3)
    code = m.encode(x)
    loss = m.total_loss(x)
    assert loss >= 0
    assert loss >= beta * float(kl_loss(code.mu, code.logvar)) - 1e-12


def test_default_architecture_families():
    assert default_architecture(2) == ((8,), 2)
    assert default_architecture(10) == ((16,), 4)
    assert default_architecture(30) == ((64,), 8)


def test_build_validates_shapes():
    m = VaeModel.build(3, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        VaeModel(m.encoder, m.mu_head, m.logvar_head, m.decoder[:-1])
    with pytest.raises(ContractViolation):
        VaeModel.build(3, np.random.default_rng(0), loss_kind="hinge")
    with pytest.raises(ContractViolation):
        m.total_loss(np.zeros(4))


@pytest.mark.parametrize("loss_kind", ["binary_cross_entropy", "squared_error"])
@pytest.mark.parametrize("noise", [False, True])
def test_gradients_tiny_model(loss_kind, noise):
    rng = np.random.default_rng(11)
    m = VaeModel.build(2, rng, hidden=(4,), k=1, loss_kind=loss_kind)
    x = rng.uniform(0.05, 0.95, size=(3, 2))
    eps = rng.standard_normal((3, 1)) if noise else None
    assert gradient_check(m, x, noise=eps) < 1e-4


def test_gradient_check_zero_model_is_finite():
    err = gradient_check(_zero_model(), np.zeros((1, 2)))
    assert np.isfinite(err)


def test_train_zero_epochs_keeps_parameters():
    m = VaeModel.build(2, np.random.default_rng(0))
    before = m.fingerprint()
    train_on_window(m, np.full((10, 2), 0.5), 0, 4, np.random.default_rng(0))
    assert m.fingerprint() == before


def test_training_reduces_loss():
    rng = np.random.default_rng(0)
    X = np.clip(rng.normal(0.5, 0.05, size=(200, 2)), 0, 1)
    m = VaeModel.build(2, np.random.default_rng(1), loss_kind="squared_error")
    before = m.instance_losses(X).mean()
    train_on_window(m, X, 50, 64, np.random.default_rng(2))
    assert m.instance_losses(X).mean() <= 0.5 * before


def test_training_is_deterministic():
    X = np.random.default_rng(0).uniform(size=(50, 2))
    prints = []
    for _ in range(2):
        m = VaeModel.build(2, np.random.default_rng(3))
        train_on_window(m, X, 3, 16, np.random.default_rng(4))
        prints.append(m.fingerprint())
    assert prints[0] == prints[1]


def test_training_contract_errors():
    m = VaeModel.build(2, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        train_on_window(m, np.empty((0, 2)), 1, 4, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        train_on_window(m, np.full((4, 2), 0.5), 1, 0, np.random.default_rng(0))


def test_non_finite_loss_is_reported():
    m = VaeModel.build(2, np.random.default_rng(0), loss_kind="squared_error")
    with pytest.raises(NumericalError):
        train_on_window(m, np.array([[np.nan, 0.5]]), 1, 1, np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = VaeModel.build(3, rng, hidden=(5, 4), k=2, beta=0.5, loss_kind="squared_error", lr=0.01)
    train_on_window(m, rng.uniform(size=(20, 3)), 2, 8, rng)
    norm = Normalizer(np.array([0.0, -1.0, 2.0]), np.array([1.0, 1.0, 5.0]))
    path = tmp_path / "model.npz"
    save_checkpoint(path, m, norm)
    m2, norm2 = load_checkpoint(path)
    assert m2.fingerprint() == m.fingerprint()
    assert (m2.beta, m2.loss_kind, m2.lr) == (0.5, "squared_error", 0.01)
    assert m2.optimizer_state.step_count == m.optimizer_state.step_count
    for a, b in zip(m2.optimizer_state.second_moment, m.optimizer_state.second_moment):
        assert np.array_equal(a, b)
    assert np.array_equal(norm2.maximum, norm.maximum)
    x = np.array([0.1, 0.5, 0.7])
    assert m2.total_loss(x) == m.total_loss(x)


def test_checkpoint_without_normalizer(tmp_path):
    m = VaeModel.build(2, np.random.default_rng(0))
    save_checkpoint(tmp_path / "m.npz", m)
    _, norm = load_checkpoint(tmp_path / "m.npz")
    assert norm is None
