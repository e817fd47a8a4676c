"""Latent-feature vulnerability: mean absolute distortion between clean and
adversarial activations, per feature, per layer and for the whole network."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, batched_attack
from .errors import ContractError, DimensionError, GraphStateError
from .tensor import Tensor


@dataclass
class VulnerabilityReport:
    per_feature: list[np.ndarray]
    per_layer: np.ndarray
    network: float
    layer_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"layers": list(self.layer_names), "per_layer": [float(v) for v in self.per_layer],
                "network": float(self.network)}


def _values(t) -> np.ndarray:
    return t.values if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def feature_vulnerability(clean, adv) -> list[np.ndarray]:
    """Batch mean of ``|z - z_adv|`` for every scalar feature of every layer.

    ``clean`` and ``adv`` are sequences of per-layer activations shaped
    [batch, ...]; conv maps are flattened so each spatial unit of each channel
    is one feature.
    """
    if len(clean) != len(adv):
        raise DimensionError(f"{len(clean)} clean layers vs {len(adv)} adversarial layers")
    out = []
    for z, z_adv in zip(clean, adv):
        z, z_adv = _values(z), _values(z_adv)
        if z.shape != z_adv.shape:
            raise DimensionError(f"trace shapes differ: {z.shape} vs {z_adv.shape}")
        if z.shape[0] < 1:
            raise ContractError("vulnerability needs at least one example")
        out.append(np.abs(z - z_adv).reshape(z.shape[0], -1).mean(axis=0))
    return out


def network_vulnerability(per_feature: list[np.ndarray], layer_names: list[str] | None = None) -> VulnerabilityReport:
    if not per_feature:
        raise ContractError("network vulnerability needs at least one hidden layer")
    per_layer = np.array([np.mean(v) for v in per_feature])
    return VulnerabilityReport(per_feature=[np.asarray(v) for v in per_feature], per_layer=per_layer,
                               network=float(per_layer.mean()), layer_names=list(layer_names or []))


def vs_penalty(clean_trace: list[Tensor], adv_trace: list[Tensor], lam: float) -> Tensor:
    """``lam * V`` computed on the graph so gradients reach weights and gates."""
    if len(clean_trace) != len(adv_trace) or not clean_trace:
        raise DimensionError("traces must be non-empty and aligned")
    for t in (*clean_trace, *adv_trace):
        if not isinstance(t, Tensor):
            raise ContractError("vs_penalty needs live tensors")
        if t.consumed:
            raise GraphStateError("trace belongs to a consumed graph")
    if lam == 0.0:
        return Tensor.constant(0.0)
    total = None
    for z, z_adv in zip(clean_trace, adv_trace):
        if z.shape != z_adv.shape:
            raise DimensionError(f"trace shapes differ: {z.shape} vs {z_adv.shape}")
        layer = (z - z_adv).abs().mean()
        total = layer if total is None else total + layer
    return total * (lam / len(clean_trace))


def measure_vulnerability(model, x: np.ndarray, x_adv: np.ndarray, batch_size: int = 500,
                          gates=None) -> VulnerabilityReport:
    """Vulnerability of ``model`` (inference gates) over a whole evaluation set."""
    if x.shape != x_adv.shape:
        raise DimensionError(f"clean {x.shape} vs adversarial {x_adv.shape}")
    gates = model.inference_gates() if gates is None else gates
    sums, names = None, None
    for i in range(0, len(x), batch_size):
        clean = model.forward(Tensor.constant(x[i:i + batch_size]), gates, detach_params=True)
        adv = model.forward(Tensor.constant(x_adv[i:i + batch_size]), gates, detach_params=True)
        batch = [np.abs(z.values - za.values).reshape(z.shape[0], -1).sum(axis=0)
                 for z, za in zip(clean.traces, adv.traces)]
        sums = batch if sums is None else [s + b for s, b in zip(sums, batch)]
        names = clean.trace_names
    return network_vulnerability([s / len(x) for s in sums], names)


@dataclass
class VulnerabilityMap:
    layer: int
    values: np.ndarray
    zero_count: int
    bin_edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> list[tuple[float, float, int]]:
        out = [(0.0, 0.0, self.zero_count)]
        out += [(float(lo), float(hi), int(c)) for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)]
        return out


def histogram(values: np.ndarray, epsilon: float, bins: int = 50) -> tuple[int, np.ndarray, np.ndarray]:
    """Zero count plus counts of the non-zero values in ``bins`` uniform bins.

    Bins span [0, epsilon]; if any value exceeds epsilon (possible for hidden
    layers) the upper edge stretches to the maximum so counts are conserved.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    zeros = values == 0.0
    upper = max(float(epsilon), float(values.max()) if values.size else 0.0)
    if upper <= 0.0:
        upper = 1.0
    edges = np.linspace(0.0, upper, bins + 1)
    counts, _ = np.histogram(values[~zeros], bins=edges)
    return int(zeros.sum()), edges, counts


def vulnerability_map(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, layer: int,
                      rng: np.random.Generator, x_adv: np.ndarray | None = None, bins: int = 50) -> VulnerabilityMap:
    """Per-feature vulnerability at ``layer`` (0 is the input image)."""
    n_hidden = len(model.hidden_layer_names())
    if not 0 <= layer <= n_hidden:
        raise IndexError(f"layer {layer} outside 0..{n_hidden}")
    if x_adv is None:
        x_adv = batched_attack(model, x, y, cfg, rng)
    if layer == 0:
        values = np.abs(x - x_adv).reshape(len(x), -1).mean(axis=0)
    else:
        values = measure_vulnerability(model, x, x_adv).per_feature[layer - 1]
    zero_count, edges, counts = histogram(values, cfg.epsilon, bins)
    return VulnerabilityMap(layer=layer, values=values, zero_count=zero_count, bin_edges=edges, counts=counts)


def write_histogram_csv(vmap: VulnerabilityMap, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, count in vmap.rows():
            writer.writerow([repr(lo), repr(hi), count])


def read_histogram_csv(path) -> list[tuple[float, float, int]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [(float(r["bin_lo"]), float(r["bin_hi"]), int(r["count"])) for r in reader]
