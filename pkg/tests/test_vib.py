import math

import numpy as np
import pytest

from anpvs.errors import ContractError
from anpvs.nn import build_network
from anpvs.tensor import Tensor, dense_forward, grad_check, softmax_cross_entropy
from anpvs.vib import VibLayer, vib_forward, vib_kl, vib_loss, vib_prune


def vib_with(mu, sigma, **kw) -> VibLayer:
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    layer = VibLayer(len(mu), **kw)
    layer.set_params(mu, sigma)
    return layer


def identity_fn(h):
    return h


class TestVibForward:
    def test_small_sigma_unit_mu_is_identity(self):
        h = Tensor.constant(np.random.default_rng(0).normal(size=(4, 3)))
        out = vib_forward(h, identity_fn, vib_with(np.ones(3), 1e-12), np.random.default_rng(1), train=True)
        np.testing.assert_allclose(out.values, h.values, atol=1e-10)

    def test_zero_mu_eval_is_zero(self):
        h = Tensor.constant(np.ones((2, 5)))
        out = vib_forward(h, identity_fn, vib_with(np.zeros(5), 0.3), None, train=False)
        np.testing.assert_array_equal(out.values, np.zeros((2, 5)))

    def test_gate_mean_matches_mu(self):
        mu, sigma = np.array([0.5, -1.0, 2.0]), np.array([0.3, 1.0, 0.1])
        layer = vib_with(mu, sigma)
        h = Tensor.constant(np.ones((100_000, 3)))
        gates = vib_forward(h, identity_fn, layer, np.random.default_rng(2), train=True).values
        assert np.all(np.abs(gates.mean(axis=0) - mu) < 3 * sigma / math.sqrt(100_000))

    def test_conv_outputs_gated_per_channel(self):
        h = Tensor.constant(np.ones((2, 3, 4, 4)))
        out = vib_forward(h, identity_fn, vib_with([1.0, 0.0, 2.0], 0.5), None, train=False).values
        np.testing.assert_array_equal(out[:, 1], 0.0)
        np.testing.assert_array_equal(out[:, 2], 2.0)

    def test_eval_deterministic_train_reproducible(self):
        layer = vib_with([0.4, 0.9], 0.2)
        h = Tensor.constant(np.ones((3, 2)))
        a = vib_forward(h, identity_fn, layer, np.random.default_rng(5), train=True).values
        b = vib_forward(h, identity_fn, layer, np.random.default_rng(5), train=True).values
        np.testing.assert_array_equal(a, b)
        e1 = vib_forward(h, identity_fn, layer, None, train=False).values
        e2 = vib_forward(h, identity_fn, layer, None, train=False).values
        np.testing.assert_array_equal(e1, e2)

    def test_width_mismatch(self):
        with pytest.raises(ContractError):
            vib_forward(Tensor.constant(np.ones((1, 4))), identity_fn, vib_with([1.0, 1.0], 1.0), None, False)


class TestVibKL:
    def test_zero_mu(self):
        assert vib_kl(vib_with(np.zeros(6), 0.7)) == 0.0

    def test_mu_equals_sigma(self):
        assert vib_kl(vib_with([0.37], [0.37])) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_ratio_invariance(self):
        mu, sigma = np.array([0.2, -1.5, 3.0]), np.array([0.5, 0.25, 2.0])
        assert vib_kl(vib_with(mu * 7.0, sigma * 7.0)) == pytest.approx(vib_kl(vib_with(mu, sigma)), rel=1e-12)

    def test_non_negative(self):
        layer = VibLayer(20, rng=np.random.default_rng(3), init_mu=0.0, init_sigma=0.5)
        assert np.all(layer.information() >= 0)

    def test_gradients(self):
        layer = vib_with([0.5, -1.2, 2.0], [0.4, 1.1, 0.3])
        sigma_raw = layer.sigma_raw.values.copy()
        mu = layer.mu.values.copy()

        def in_mu(t):
            ratio = t * t / Tensor.constant(layer.sigma ** 2)
            return (1.0 + ratio).log().sum()

        def in_sigma(t):
            s = t.softplus()
            return (1.0 + Tensor.constant(mu ** 2) / (s * s)).log().sum()

        assert grad_check(in_mu, mu) < 1e-4
        assert grad_check(in_sigma, sigma_raw) < 1e-4
        # and the layer's own on-graph KL agrees with the closed form
        assert layer.kl().item() == pytest.approx(vib_kl(layer), rel=1e-12)


class TestVibPrune:
    def test_zero_mu_dropped(self):
        decision = vib_prune(vib_with([0.0, 1.0], [1.0, 1.0]), 1e-9)
        np.testing.assert_array_equal(decision.keep, [False, True])

    def test_log_two_kept_at_half(self):
        assert vib_prune(vib_with([0.8], [0.8]), 0.5).keep.all()

    def test_zero_threshold_keeps_all(self):
        assert vib_prune(vib_with(np.zeros(4), 1.0), 0.0).keep.all()

    def test_negative_threshold(self):
        with pytest.raises(ContractError):
            vib_prune(vib_with([1.0], [1.0]), -0.1)


def _vib_net(seed=0, beta=None):
    net = build_network("mlp", np.random.default_rng(seed), gate="vib", num_classes=3)
    for gate in net.gates():
        gate.beta = beta
    return net


class TestVibLoss:
    def test_zero_beta_is_adversarial_ce(self):
        net = _vib_net(beta=0.0)
        rng = np.random.default_rng(1)
        x, y = rng.uniform(size=(8, 1, 1, 2)), rng.integers(0, 3, 8)
        noise = net.draw_noise(np.random.default_rng(2), 8)
        loss = vib_loss(net, x, y, dataset_size=100, gates=net.sample_gates(noise)).item()
        ce = softmax_cross_entropy(net.forward(Tensor.constant(x), net.sample_gates(noise)).logits, y).item()
        assert loss == ce

    def test_doubling_beta_doubles_kl_part(self):
        rng = np.random.default_rng(3)
        x, y = rng.uniform(size=(8, 1, 1, 2)), rng.integers(0, 3, 8)
        parts = []
        for beta in (0.0, 1.5, 3.0):
            net = _vib_net(beta=beta)
            noise = net.draw_noise(np.random.default_rng(4), 8)
            parts.append(vib_loss(net, x, y, 10, gates=net.sample_gates(noise)).item())
        assert parts[2] - parts[0] == pytest.approx(2 * (parts[1] - parts[0]), rel=1e-10)

    def test_needs_gates(self):
        with pytest.raises(ContractError):
            vib_loss(_vib_net(), np.zeros((1, 1, 1, 2)), [0], 10)


class TestPrunedEquality:
    def test_zero_mu_units_prune_exactly(self):
        net = build_network("mnist-small", np.random.default_rng(0), gate="vib")
        x = np.random.default_rng(1).uniform(size=(5, 1, 28, 28))
        for gate in net.gates():
            gate.mu.values[::3] = 0.0
            gate.threshold = 0.0
        unpruned = net.predict(x)
        for gate in net.gates():
            gate.threshold = 0.01
        assert sum(d.dropped for d in net.prune_decisions().values()) > 0
        np.testing.assert_array_equal(net.predict(x), unpruned)

    def test_dense_eval_path(self):
        """A single VIB layer in eval mode equals the dense layer scaled by mu."""
        rng = np.random.default_rng(2)
        w, b = rng.normal(size=(4, 3)), rng.normal(size=3)
        layer = vib_with([0.0, 1.3, 0.0], 0.5)
        h = Tensor.constant(rng.normal(size=(6, 4)))

        def fn(t):
            return dense_forward(t, Tensor.constant(w), Tensor.constant(b))

        gated = vib_forward(h, fn, layer, None, train=False).values
        keep = vib_prune(layer, 0.01).keep
        np.testing.assert_array_equal(gated[:, ~keep], 0.0)
        np.testing.assert_array_equal(gated[:, keep], (fn(h).values * layer.mu.values)[:, keep])
