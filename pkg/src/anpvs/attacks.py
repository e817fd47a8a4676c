"""L-infinity PGD adversary and black-box transfer evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError
from .tensor import Tensor, softmax_cross_entropy

# loss_fn(x, y) -> per-example losses, shape [batch]
LossFn = Callable[[Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    step_size: float = 0.01
    steps: int = 40
    restarts: int = 1
    random_start: bool = True
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.restarts < 0:
            raise ConfigError("restarts must be >= 0")
        if not self.pixel_min < self.pixel_max:
            raise ConfigError("pixel_min must be below pixel_max")

    @property
    def runs(self) -> int:
        """Independent attack runs; 0 and 1 both mean a single run."""
        return max(1, self.restarts)

    def to_dict(self) -> dict:
        return asdict(self)


def project_linf(x_adv, x, cfg: AttackConfig) -> np.ndarray:
    """Clamp into the epsilon ball around ``x``, then into the pixel range."""
    x_adv = x_adv.values if isinstance(x_adv, Tensor) else np.asarray(x_adv, dtype=np.float64)
    x = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise DimensionError(f"projection of {x_adv.shape} onto ball around {x.shape}")
    out = np.clip(x_adv, x - cfg.epsilon, x + cfg.epsilon)
    # x + eps is rounded, so the measured distance can exceed eps by an ulp
    over = np.abs(out - x) > cfg.epsilon
    while over.any():
        out = np.where(over, np.nextafter(out, x), out)
        over = np.abs(out - x) > cfg.epsilon
    return np.clip(out, cfg.pixel_min, cfg.pixel_max)


def network_loss(model, gates=None) -> LossFn:
    """Per-example cross-entropy of ``model`` with gates held fixed.

    Gate tensors are converted to constants so the attack never
    differentiates through them.
    """
    if gates is None:
        gates = model.inference_gates()
    frozen = {name: Tensor.constant(g.values) for name, g in gates.items()}

    def loss_fn(x: Tensor, y) -> Tensor:
        logits = model.forward(x, frozen, detach_params=True).logits
        return softmax_cross_entropy(logits, y, reduction="none")

    return loss_fn


def _as_loss_fn(model, gates) -> LossFn:
    if hasattr(model, "forward") and hasattr(model, "inference_gates"):
        return network_loss(model, gates)
    if callable(model):
        return model
    raise TypeError("model must be a Network or a per-example loss function")


def _loss_and_grad(loss_fn: LossFn, x: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
    leaf = Tensor(x, requires_grad=True)
    losses = loss_fn(leaf, y)
    total = losses.sum()
    total.backward()
    return losses.values.copy(), leaf.grad


def pgd_attack(model, x, y, cfg: AttackConfig, rng: np.random.Generator, gates=None) -> np.ndarray:
    """Iterated signed-gradient ascent projected onto the epsilon ball.

    ``model`` is a :class:`~anpvs.nn.Network` (attacked with ``gates`` frozen,
    inference gates by default) or any callable returning per-example losses.
    With several runs, each example keeps the run with the highest final loss.
    """
    x = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if cfg.epsilon == 0.0:
        return x.copy()
    loss_fn = _as_loss_fn(model, gates)
    best, best_loss = None, None
    for _ in range(cfg.runs):
        if cfg.random_start:
            x_adv = project_linf(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg)
        else:
            x_adv = x.copy()
        for _ in range(cfg.steps):
            _, grad = _loss_and_grad(loss_fn, x_adv, y)
            if not np.all(np.isfinite(grad)):
                raise NumericalError("non-finite input gradient during PGD",
                                     {"nan": int(np.isnan(grad).sum()), "inf": int(np.isinf(grad).sum())})
            x_adv = project_linf(x_adv + cfg.step_size * np.sign(grad), x, cfg)
        if cfg.runs == 1:
            return x_adv
        final = loss_fn(Tensor.constant(x_adv), y).values
        if best is None:
            best, best_loss = x_adv, final
        else:
            better = final > best_loss
            best = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)), x_adv, best)
            best_loss = np.where(better, final, best_loss)
    return best


def batched_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, rng: np.random.Generator,
                   batch_size: int = 200, gates=None) -> np.ndarray:
    out = [pgd_attack(model, x[i:i + batch_size], y[i:i + batch_size], cfg, rng, gates)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else x.copy()


def transfer_attack_eval(source, target, data, cfg: AttackConfig, rng: np.random.Generator,
                         batch_size: int = 200) -> float:
    """Accuracy of ``target`` on PGD examples crafted against ``source``."""
    x, y = data
    if tuple(source.input_shape) != tuple(target.input_shape):
        raise DimensionError(f"source input {source.input_shape} vs target input {target.input_shape}")
    x_adv = batched_attack(source, x, y, cfg, rng, batch_size)
    return target.accuracy(x_adv, y)
