"""Loss landscapes around clean inputs along gradient-sign and random-sign directions."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor, softmax_cross_entropy


@dataclass
class LandscapeGrid:
    u: np.ndarray  # offsets along the gradient-sign direction (rows)
    v: np.ndarray  # offsets along the random-sign direction (columns)
    loss: np.ndarray  # [len(u), len(v)]

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(self.u[i]), float(self.v[j]), float(self.loss[i, j]))
                for i in range(len(self.u)) for j in range(len(self.v))]


def batch_loss(model, x: np.ndarray, y: np.ndarray, gates=None) -> float:
    """Mean cross-entropy under fixed (inference by default) gates."""
    gates = model.inference_gates() if gates is None else gates
    logits = model.forward(Tensor.constant(x), gates, detach_params=True).logits
    return softmax_cross_entropy(logits, y).item()


def gradient_sign(model, x: np.ndarray, y: np.ndarray, gates=None) -> np.ndarray:
    gates = model.inference_gates() if gates is None else gates
    leaf = Tensor(x, requires_grad=True)
    loss = softmax_cross_entropy(model.forward(leaf, gates, detach_params=True).logits, y)
    loss.backward()
    return np.sign(leaf.grad)


def loss_landscape_grid(model, x: np.ndarray, y: np.ndarray, grid_n: int, span: float,
                        rng: np.random.Generator, pixel_range=(0.0, 1.0)) -> LandscapeGrid:
    """``grid_n`` x ``grid_n`` losses at ``clip(x + u*d1 + v*d2)``.

    ``d1`` is the sign of the input gradient of the batch loss, ``d2`` the
    sign of a standard-normal draw from ``rng``; ``u`` and ``v`` run evenly
    over ``[-span, span]``.  ``grid_n`` must be odd so the centre cell is the
    clean loss.
    """
    if grid_n < 1 or grid_n % 2 == 0:
        raise ContractError("grid_n must be a positive odd number")
    if span < 0:
        raise ContractError("span must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    gates = model.inference_gates()
    d1 = gradient_sign(model, x, y, gates)
    d2 = np.sign(rng.standard_normal(x.shape))
    offsets = np.linspace(-span, span, grid_n)
    offsets[grid_n // 2] = 0.0
    lo, hi = pixel_range
    loss = np.empty((grid_n, grid_n))
    for i, u in enumerate(offsets):
        for j, v in enumerate(offsets):
            loss[i, j] = batch_loss(model, np.clip(x + u * d1 + v * d2, lo, hi), y, gates)
    return LandscapeGrid(u=offsets.copy(), v=offsets.copy(), loss=loss)


def write_landscape_csv(grid: LandscapeGrid, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["u", "v", "loss"])
        for u, v, value in grid.rows():
            writer.writerow([repr(u), repr(v), repr(value)])


def read_landscape_csv(path) -> LandscapeGrid:
    with open(path, newline="") as f:
        rows = [(float(r["u"]), float(r["v"]), float(r["loss"])) for r in csv.DictReader(f)]
    u = np.array(sorted({r[0] for r in rows}))
    v = np.array(sorted({r[1] for r in rows}))
    loss = np.empty((len(u), len(v)))
    index_u = {val: i for i, val in enumerate(u)}
    index_v = {val: j for j, val in enumerate(v)}
    for a, b, value in rows:
        loss[index_u[a], index_v[b]] = value
    return LandscapeGrid(u=u, v=v, loss=loss)
