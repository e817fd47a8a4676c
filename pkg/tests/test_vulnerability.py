import numpy as np
import pytest

from anpvs.attacks import AttackConfig
from anpvs.errors import DimensionError, GraphStateError
from anpvs.nn import build_network
from anpvs.tensor import Tensor
from anpvs.vulnerability import (
    feature_vulnerability,
    histogram,
    measure_vulnerability,
    network_vulnerability,
    read_histogram_csv,
    vs_penalty,
    vulnerability_map,
    write_histogram_csv,
)


class TestFeatureVulnerability:
    def test_identical(self):
        z = np.random.default_rng(0).normal(size=(4, 6))
        assert np.all(feature_vulnerability([z], [z.copy()])[0] == 0.0)

    def test_hand_value(self):
        np.testing.assert_allclose(feature_vulnerability([[[1.0, 2.0]]], [[[1.5, 1.5]]])[0], [0.5, 0.5])

    def test_batch_mean(self):
        out = feature_vulnerability([np.array([[0.0], [0.0]])], [np.array([[0.2], [-0.4]])])[0]
        assert out[0] == pytest.approx(0.3, abs=1e-15)

    def test_conv_maps_flatten(self):
        z = np.zeros((2, 3, 4, 4))
        assert feature_vulnerability([z], [z + 1.0])[0].shape == (48,)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            feature_vulnerability([np.zeros((1, 2))], [np.zeros((1, 3))])


class TestNetworkVulnerability:
    def test_single_layer(self):
        report = network_vulnerability([np.array([0.5, 0.5])])
        assert report.per_layer[0] == 0.5 and report.network == 0.5

    def test_zero(self):
        assert network_vulnerability([np.zeros(3), np.zeros(5)]).network == 0.0

    def test_layer_mean(self):
        report = network_vulnerability([np.array([0.2, 0.2]), np.array([0.4])])
        assert report.network == pytest.approx(0.3, abs=1e-15)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        v = [rng.uniform(size=7), rng.uniform(size=3)]
        shuffled = [rng.permutation(v[0]), rng.permutation(v[1])]
        assert network_vulnerability(v).network == pytest.approx(network_vulnerability(shuffled).network, abs=1e-15)


class TestVSPenalty:
    def traces(self, seed=0):
        rng = np.random.default_rng(seed)
        clean = [Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)]
        adv = [Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)]
        return clean, adv

    def test_zero_lambda(self):
        clean, adv = self.traces()
        penalty = vs_penalty(clean, adv, 0.0)
        assert penalty.item() == 0.0

    def test_identical_traces(self):
        clean, _ = self.traces()
        penalty = vs_penalty(clean, clean, 1.0)
        assert penalty.item() == 0.0
        penalty.backward()
        assert all(np.all(t.grad == 0.0) for t in clean)

    def test_linearity(self):
        clean, adv = self.traces()
        one = vs_penalty(clean, adv, 1.0).item()
        two = vs_penalty(clean, adv, 2.0).item()
        assert two == 2.0 * one

    def test_matches_off_graph(self):
        clean, adv = self.traces(2)
        on_graph = vs_penalty(clean, adv, 1.0).item()
        off_graph = network_vulnerability(feature_vulnerability(clean, adv)).network
        assert abs(on_graph - off_graph) < 1e-12

    def test_gradient_reaches_both_traces(self):
        clean, adv = self.traces(3)
        vs_penalty(clean, adv, 1.0).backward()
        assert all(np.any(t.grad != 0.0) for t in clean + adv)

    def test_consumed_graph(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        z = x * 2.0
        z.sum().backward()
        with pytest.raises(GraphStateError):
            vs_penalty([z], [z], 1.0)


class TestVulnerabilityMap:
    def setup_method(self):
        self.net = build_network("mnist-small", np.random.default_rng(0), gate="mask")
        rng = np.random.default_rng(1)
        self.x = rng.uniform(size=(6, 1, 28, 28))
        self.y = np.arange(6)
        self.cfg = AttackConfig(epsilon=0.3, step_size=0.1, steps=2)

    def test_zero_epsilon(self):
        vmap = vulnerability_map(self.net, self.x, self.y, AttackConfig(epsilon=0.0), 0, np.random.default_rng(0))
        assert vmap.zero_count == 784
        assert vmap.counts.sum() == 0

    @pytest.mark.parametrize("layer", [0, 1, 2, 3])
    def test_conservation(self, layer):
        vmap = vulnerability_map(self.net, self.x, self.y, self.cfg, layer, np.random.default_rng(2))
        assert vmap.zero_count + vmap.counts.sum() == vmap.values.size

    def test_input_layer_bounded_by_epsilon(self):
        vmap = vulnerability_map(self.net, self.x, self.y, self.cfg, 0, np.random.default_rng(3))
        assert np.all(vmap.values <= 0.3)
        np.testing.assert_allclose(vmap.bin_edges[[0, -1]], [0.0, 0.3])
        assert len(vmap.counts) == 50

    def test_pruned_channel_has_zero_vulnerability(self):
        conv1 = self.net.layers[0]
        a = conv1.gate.a.copy()
        a[3] = 1e-5
        conv1.gate.set_params(a, conv1.gate.b)
        assert not conv1.gate.prune().keep[3]
        vmap = vulnerability_map(self.net, self.x, self.y, self.cfg, 1, np.random.default_rng(4))
        per_channel = vmap.values.reshape(8, -1)
        assert np.all(per_channel[3] == 0.0)
        assert np.any(per_channel[0] > 0.0)

    def test_invalid_layer(self):
        with pytest.raises(IndexError):
            vulnerability_map(self.net, self.x, self.y, self.cfg, 9, np.random.default_rng(0))

    def test_csv_round_trip(self, tmp_path):
        vmap = vulnerability_map(self.net, self.x, self.y, self.cfg, 2, np.random.default_rng(5))
        path = tmp_path / "h.csv"
        write_histogram_csv(vmap, path)
        assert path.read_text().splitlines()[0] == "bin_lo,bin_hi,count"
        rows = read_histogram_csv(path)
        assert rows[0] == (0.0, 0.0, vmap.zero_count)
        assert rows == vmap.rows()

    def test_measure_matches_penalty_on_batch(self):
        x_adv = np.clip(self.x + 0.1, 0, 1)
        report = measure_vulnerability(self.net, self.x, x_adv)
        gates = self.net.inference_gates()
        clean = self.net.forward(Tensor.constant(self.x), gates)
        adv = self.net.forward(Tensor.constant(x_adv), gates)
        assert abs(vs_penalty(clean.traces, adv.traces, 1.0).item() - report.network) < 1e-12
        assert report.layer_names == ["conv1", "conv2", "fc1"]


def test_histogram_stretches_for_hidden_values():
    zeros, edges, counts = histogram(np.array([0.0, 0.1, 0.5, 2.0]), epsilon=0.3, bins=10)
    assert zeros == 1 and counts.sum() == 3 and edges[-1] == 2.0
