"""Small feed-forward classifiers whose units can be gated by masks or VIB noise."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .masks import MaskLayer
from .tensor import Tensor, conv2d_forward, dense_forward, maxpool2d
from .vib import VibLayer


def _param(values, name) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _apply_gate(h: Tensor, gate: Tensor) -> Tensor:
    lead = 1 if gate.ndim == 1 else gate.shape[0]
    return h * gate.reshape((lead, gate.shape[-1]) + (1,) * (h.ndim - 2))


class Conv2d:
    """Convolution, optional ReLU, optional per-channel gate, optional max-pool."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1, padding: int = 0,
                 pool: int | None = None, rng: np.random.Generator | None = None, name: str = "conv"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.c_in, self.c_out, self.kernel_size = c_in, c_out, kernel_size
        self.stride, self.padding, self.pool = stride, padding, pool
        fan_in = c_in * kernel_size * kernel_size
        self.kernel = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, kernel_size, kernel_size)),
                             f"{name}.weight")
        self.bias = _param(np.zeros(c_out), f"{name}.bias")
        self.gate: MaskLayer | VibLayer | None = None

    @property
    def units(self) -> int:
        return self.c_out

    def conv_shape(self, in_shape: tuple) -> tuple:
        c, h, w = in_shape
        if c != self.c_in:
            raise DimensionError(f"{self.name}: expected {self.c_in} channels, got {c}")
        k, p, s = self.kernel_size, self.padding, self.stride
        if k > h + 2 * p or k > w + 2 * p:
            raise DimensionError(f"{self.name}: kernel larger than padded input {in_shape}")
        return (self.c_out, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def output_shape(self, in_shape: tuple) -> tuple:
        c, h, w = self.conv_shape(in_shape)
        if self.pool:
            h, w = (h - self.pool) // self.pool + 1, (w - self.pool) // self.pool + 1
        return (c, h, w)

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.bias]


class Flatten:
    """Reshape to [batch, features]; may gate the flattened units."""

    kind = "flatten"

    def __init__(self, name: str = "flatten"):
        self.name = name
        self.gate: MaskLayer | VibLayer | None = None
        self.units = 0

    def output_shape(self, in_shape: tuple) -> tuple:
        return (int(np.prod(in_shape)),)

    def parameters(self) -> list[Tensor]:
        return []


class Dense:
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, activation: bool = True,
                 rng: np.random.Generator | None = None, name: str = "dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.activation = activation
        scale = np.sqrt((2.0 if activation else 1.0) / in_features)
        self.weight = _param(rng.normal(0.0, scale, (in_features, out_features)), f"{name}.weight")
        self.bias = _param(np.zeros(out_features), f"{name}.bias")
        self.gate: MaskLayer | VibLayer | None = None

    @property
    def units(self) -> int:
        return self.out_features

    def output_shape(self, in_shape: tuple) -> tuple:
        if in_shape != (self.in_features,):
            raise DimensionError(f"{self.name}: expected ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class ForwardResult:
    logits: Tensor
    traces: list[Tensor] = field(default_factory=list)
    trace_names: list[str] = field(default_factory=list)


class Network:
    """Ordered list of layers mapping [B, C, H, W] images to class logits.

    Hidden conv and dense outputs (after activation and gate, before pooling)
    are the latent features recorded in traces.
    """

    def __init__(self, layers: list, input_shape: tuple, num_classes: int, preset: str | None = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.preset = preset
        shape = self.input_shape
        for layer in layers:
            if layer.kind == "flatten":
                layer.units = int(np.prod(shape))
            shape = layer.output_shape(shape)
        if shape != (num_classes,):
            raise DimensionError(f"network output {shape} does not match {num_classes} classes")

    # -- structure ----------------------------------------------------------
    def gates(self) -> list:
        return [layer.gate for layer in self.layers if layer.gate is not None]

    def gated_layers(self) -> list:
        return [layer for layer in self.layers if layer.gate is not None]

    def weight_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def variational_parameters(self) -> list[Tensor]:
        return [p for gate in self.gates() for p in gate.parameters()]

    def hidden_layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers
                if layer.kind == "conv" or (layer.kind == "dense" and layer.activation)]

    def attach_gates(self, kind: str | None, rng: np.random.Generator, **options) -> "Network":
        """Give every conv, hidden flatten and hidden dense layer a gate of ``kind``."""
        for index, layer in enumerate(self.layers):
            layer.gate = None
            if kind is None or (layer.kind == "dense" and not layer.activation):
                continue
            if layer.kind == "flatten" and index == 0:
                continue  # raw inputs are never gated
            gate_name = f"{layer.name}.{kind}"
            if kind == "mask":
                layer.gate = MaskLayer(layer.units, rng=rng, name=gate_name, **options)
            elif kind == "vib":
                layer.gate = VibLayer(layer.units, rng=rng, name=gate_name, **options)
            else:
                raise ConfigError(f"unknown gate kind {kind!r}")
        return self

    @property
    def gate_kind(self) -> str | None:
        kinds = {g.kind for g in self.gates()}
        return kinds.pop() if len(kinds) == 1 else None

    # -- gate values ---------------------------------------------------------
    def draw_noise(self, rng: np.random.Generator, batch_size: int) -> dict[str, np.ndarray]:
        return {layer.name: layer.gate.draw_noise(rng, batch_size) for layer in self.gated_layers()}

    def sample_gates(self, noise: dict[str, np.ndarray]) -> dict[str, Tensor]:
        """Stochastic gate tensors on the graph, one entry per gated layer."""
        return {layer.name: layer.gate.sample(noise[layer.name]) for layer in self.gated_layers()}

    def inference_gates(self) -> dict[str, Tensor]:
        """Deterministic gates: posterior mean (or mu) for kept units, 0 for pruned."""
        return {layer.name: Tensor.constant(layer.gate.inference_gate()) for layer in self.gated_layers()}

    def prune_decisions(self) -> dict:
        return {layer.name: layer.gate.prune() for layer in self.gated_layers()}

    def kl(self) -> Tensor | None:
        total = None
        for gate in self.gates():
            term = gate.kl()
            total = term if total is None else total + term
        return total

    # -- evaluation ----------------------------------------------------------
    def forward(self, x, gates: dict[str, Tensor] | None = None, detach_params: bool = False) -> ForwardResult:
        """Run the network.

        ``gates=None`` uses inference gates; otherwise layers absent from the
        dict are left ungated.  ``detach_params`` treats weights as constants
        (used by attacks, which only need input gradients).
        """
        h = x if isinstance(x, Tensor) else Tensor.constant(x)
        if h.shape[1:] != self.input_shape:
            raise DimensionError(f"input shape {h.shape[1:]} does not match network input {self.input_shape}")
        if gates is None:
            gates = self.inference_gates()

        def p(t: Tensor) -> Tensor:
            return Tensor.constant(t.values) if detach_params else t

        result = ForwardResult(logits=None)
        for layer in self.layers:
            gate = gates.get(layer.name) if layer.gate is not None else None
            if layer.kind == "conv":
                h = conv2d_forward(h, p(layer.kernel), p(layer.bias), layer.stride, layer.padding).relu()
                if gate is not None:
                    h = _apply_gate(h, gate)
                result.traces.append(h)
                result.trace_names.append(layer.name)
                if layer.pool:
                    h = maxpool2d(h, layer.pool)
            elif layer.kind == "flatten":
                h = h.reshape(h.shape[0], -1)
                if gate is not None:
                    h = _apply_gate(h, gate)
            else:
                h = dense_forward(h, p(layer.weight), p(layer.bias))
                if layer.activation:
                    h = h.relu()
                    if gate is not None:
                        h = _apply_gate(h, gate)
                    result.traces.append(h)
                    result.trace_names.append(layer.name)
        result.logits = h
        return result

    def __call__(self, x, gates=None) -> Tensor:
        return self.forward(x, gates).logits

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Inference-mode logits as a plain array."""
        gates = self.inference_gates()
        out = [self.forward(Tensor.constant(x[i:i + batch_size]), gates, detach_params=True).logits.values
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def accuracy(self, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> float:
        if len(x) == 0:
            return 0.0
        return float(np.mean(self.predict(x, batch_size).argmax(axis=1) == np.asarray(y)))

    # -- state ----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for layer in self.layers:
            for t in layer.parameters():
                state[t.name] = t.values.copy()
            if layer.gate is not None:
                for key, value in layer.gate.state().items():
                    state[f"{layer.name}.{layer.gate.kind}.{key}"] = value
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for layer in self.layers:
            for t in layer.parameters():
                if t.name not in state:
                    if strict:
                        raise ConfigError(f"snapshot lacks {t.name}")
                    continue
                if state[t.name].shape != t.shape:
                    raise DimensionError(f"{t.name}: snapshot {state[t.name].shape} vs model {t.shape}")
                t.values[...] = state[t.name]
            if layer.gate is not None:
                prefix = f"{layer.name}.{layer.gate.kind}."
                sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
                if sub:
                    layer.gate.load_state(sub)
                elif strict:
                    raise ConfigError(f"snapshot lacks gate parameters for {layer.name}")

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def __repr__(self) -> str:
        names = ", ".join(f"{layer.kind}:{layer.name}" for layer in self.layers)
        return f"Network({names})"


PRESETS = ("mnist-small", "lenet5-caffe", "mlp")


def build_network(preset: str, rng: np.random.Generator, gate: str | None = None,
                  input_shape: tuple | None = None, num_classes: int = 10, **gate_options) -> Network:
    """Construct a preset architecture.

    * ``mnist-small``: conv 8 -> conv 16 -> dense 128 (5x5 kernels, 2x2 pools)
    * ``lenet5-caffe``: conv 20 -> conv 50 -> dense 500
    * ``mlp``: two hidden dense layers of 32 units for 2-D toy data
    """
    if preset in ("mnist-small", "lenet5-caffe"):
        c1, c2, hidden = (8, 16, 128) if preset == "mnist-small" else (20, 50, 500)
        input_shape = input_shape or (1, 28, 28)
        conv1 = Conv2d(input_shape[0], c1, 5, pool=2, rng=rng, name="conv1")
        conv2 = Conv2d(c1, c2, 5, pool=2, rng=rng, name="conv2")
        flat_units = int(np.prod(conv2.output_shape(conv1.output_shape(input_shape))))
        layers = [conv1, conv2, Flatten("flatten"),
                  Dense(flat_units, hidden, rng=rng, name="fc1"),
                  Dense(hidden, num_classes, activation=False, rng=rng, name="fc2")]
    elif preset == "mlp":
        input_shape = input_shape or (1, 1, 2)
        n_in = int(np.prod(input_shape))
        layers = [Flatten("flatten"), Dense(n_in, 32, rng=rng, name="fc1"), Dense(32, 32, rng=rng, name="fc2"),
                  Dense(32, num_classes, activation=False, rng=rng, name="out")]
    else:
        raise ConfigError(f"unknown architecture preset {preset!r}; choose from {PRESETS}")
    net = Network(layers, input_shape, num_classes, preset=preset)
    if gate is not None:
        net.attach_gates(gate, rng, **gate_options)
    return net
