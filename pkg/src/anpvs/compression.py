"""Memory footprint, FLOP ratio and unit sparsity of a pruned network.

Conventions: one multiply-accumulate counts as one FLOP; activations and
pooling are free.  Memory counts the stored outputs of conv layers (before
pooling) and hidden dense layers.  A flattened unit is alive only when its
own gate keeps it and its source channel survived.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass
class CompressionReport:
    memory_pct: float
    xflops: float
    sparsity_pct: float
    original_flops: int = 0
    pruned_flops: int = 0
    units_total: int = 0
    units_dropped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _layers_of(model) -> list:
    return list(model.layers) if hasattr(model, "layers") else list(model)


def _keep_vector(decision, units: int, name: str) -> np.ndarray:
    keep = np.asarray(getattr(decision, "keep", decision), dtype=bool).reshape(-1)
    if keep.size != units:
        raise ConfigError(f"decision for {name} has {keep.size} entries, layer has {units} units")
    return keep


def _walk(layers: list, input_shape: tuple, decisions: dict) -> dict:
    """Propagate alive units through the layers, tallying FLOPs and memory."""
    shape = tuple(input_shape)
    alive = np.ones(shape[0] if len(shape) == 3 else int(np.prod(shape)), dtype=bool)
    flops, memory, memory_full = {}, 0, 0
    units_total = units_dropped = 0
    for layer in layers:
        name = layer.name
        gated = getattr(layer, "gate", None) is not None or name in decisions
        if layer.kind == "conv":
            if len(shape) != 3:
                raise DimensionError(f"{name} needs a [C, H, W] input, got {shape}")
            c_out, ho, wo = layer.conv_shape(shape)
            keep = _keep_vector(decisions[name], c_out, name) if name in decisions else np.ones(c_out, bool)
            k = layer.kernel_size
            flops[name] = k * k * int(alive.sum()) * int(keep.sum()) * ho * wo
            memory += int(keep.sum()) * ho * wo
            memory_full += c_out * ho * wo
            if gated:
                units_total += c_out
                units_dropped += int((~keep).sum())
            alive = keep
            shape = layer.output_shape(shape)
        elif layer.kind == "flatten":
            if len(shape) == 3:
                alive = np.repeat(alive, shape[1] * shape[2])
            shape = layer.output_shape(shape)
            if name in decisions:
                own = _keep_vector(decisions[name], shape[0], name)
                units_total += shape[0]
                units_dropped += int((~(own & alive)).sum())
                alive = own & alive
            flops[name] = 0
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise DimensionError(f"{name} needs a flat input, got {shape}")
            out = layer.out_features
            keep = _keep_vector(decisions[name], out, name) if name in decisions else np.ones(out, bool)
            flops[name] = int(alive.sum()) * int(keep.sum())
            if layer.activation:
                memory += int(keep.sum())
                memory_full += out
            if gated:
                units_total += out
                units_dropped += int((~keep).sum())
            alive = keep
            shape = layer.output_shape(shape)
        else:
            raise ConfigError(f"unknown layer kind {layer.kind!r}")
    return {"flops": flops, "memory": memory, "memory_full": memory_full,
            "units_total": units_total, "units_dropped": units_dropped}


def count_flops(model, input_shape: tuple | None = None) -> dict[str, int]:
    """Per-layer multiply-accumulate counts of the unpruned model plus ``total``."""
    layers = _layers_of(model)
    if not layers:
        return {"total": 0}
    input_shape = input_shape or model.input_shape
    flops = _walk(layers, input_shape, {})["flops"]
    flops["total"] = sum(flops.values())
    return flops


def _normalise(decisions: dict | None, layers: list) -> dict:
    decisions = dict(decisions or {})
    names = {layer.name for layer in layers}
    unknown = set(decisions) - names
    if unknown:
        raise ConfigError(f"decisions given for unknown layers {sorted(unknown)}")
    for layer in layers:
        if getattr(layer, "gate", None) is not None and layer.name not in decisions:
            raise ConfigError(f"no prune decision for gated layer {layer.name}")
    return decisions


def compression_report(model, decisions: dict | None = None, input_shape: tuple | None = None) -> CompressionReport:
    layers = _layers_of(model)
    input_shape = tuple(input_shape or model.input_shape)
    decisions = _normalise(decisions, layers)
    full = _walk(layers, input_shape, {})
    pruned = _walk(layers, input_shape, decisions)
    f_full, f_pruned = sum(full["flops"].values()), sum(pruned["flops"].values())
    if f_pruned == 0:
        xflops = float("inf") if f_full else 1.0
    else:
        xflops = f_full / f_pruned
    memory_pct = 100.0 * pruned["memory"] / full["memory_full"] if full["memory_full"] else 100.0
    total = pruned["units_total"]
    sparsity = 100.0 * pruned["units_dropped"] / total if total else 0.0
    return CompressionReport(memory_pct=memory_pct, xflops=xflops, sparsity_pct=sparsity,
                             original_flops=f_full, pruned_flops=f_pruned,
                             units_total=total, units_dropped=pruned["units_dropped"])


def model_compression(model) -> CompressionReport:
    """Compression of ``model`` under its gates' own pruning thresholds."""
    return compression_report(model, {name: d.keep for name, d in model.prune_decisions().items()})
