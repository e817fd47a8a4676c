"""Variational information bottleneck gates.

A VIB gate multiplies a layer's output by Gaussian noise ``mu + sigma * eps``
per unit; its compression cost is ``sum_j log(1 + mu_j^2 / sigma_j^2)``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .masks import PruneDecision, _inverse_softplus
from .tensor import Tensor, softmax_cross_entropy


class VibLayer:
    kind = "vib"

    def __init__(self, units: int, beta: float | None = None, threshold: float = 0.01,
                 rng: np.random.Generator | None = None, name: str = "vib",
                 init_mu: float = 1.0, init_sigma: float = 0.1):
        if units < 1:
            raise ContractError("a VIB gate needs at least one unit")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.units = units
        self.beta = beta
        self.threshold = threshold
        self.name = name
        self.mu = Tensor(init_mu + rng.normal(0.0, 0.01, size=units), requires_grad=True, name=f"{name}.mu")
        self.sigma_raw = Tensor(np.full(units, _inverse_softplus(init_sigma)), requires_grad=True,
                                name=f"{name}.sigma")

    def parameters(self) -> list[Tensor]:
        return [self.mu, self.sigma_raw]

    def sigma_tensor(self) -> Tensor:
        return self.sigma_raw.softplus()

    @property
    def sigma(self) -> np.ndarray:
        return np.logaddexp(0.0, self.sigma_raw.values)

    def set_params(self, mu, sigma) -> None:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (self.units,))
        if np.any(sigma <= 0):
            raise ContractError("sigma must be positive")
        self.mu.values[:] = mu
        self.sigma_raw.values[:] = _inverse_softplus(sigma)

    def state(self) -> dict[str, np.ndarray]:
        return {"mu": self.mu.values.copy(), "sigma": self.sigma.copy()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.set_params(state["mu"], state["sigma"])

    # -- gate values ---------------------------------------------------------
    def draw_noise(self, rng: np.random.Generator, batch_size: int = 1) -> np.ndarray:
        """Standard normal noise, one draw per example and unit."""
        return rng.standard_normal(size=(batch_size, self.units))

    def sample(self, noise: np.ndarray) -> Tensor:
        return self.mu + self.sigma_tensor() * Tensor.constant(noise)

    def information(self) -> np.ndarray:
        """Per-unit KL contribution ``log(1 + mu^2 / sigma^2)``."""
        return np.log1p(self.mu.values ** 2 / self.sigma ** 2)

    def kl(self) -> Tensor:
        ratio = self.mu * self.mu / (self.sigma_tensor() * self.sigma_tensor())
        return (1.0 + ratio).log().sum()

    def prune(self, threshold: float | None = None) -> PruneDecision:
        return vib_prune(self, self.threshold if threshold is None else threshold)

    def inference_gate(self) -> np.ndarray:
        decision = self.prune()
        return np.where(decision.keep, self.mu.values, 0.0)

    def __repr__(self) -> str:
        return f"VibLayer(units={self.units}, beta={self.beta})"


def vib_kl(vib: VibLayer) -> float:
    return float(np.sum(vib.information()))


def vib_prune(vib: VibLayer, threshold: float) -> PruneDecision:
    """Drop units carrying less than ``threshold`` nats of information.

    A zero threshold keeps every unit.
    """
    if threshold < 0:
        raise ContractError("threshold must be non-negative")
    info = vib.information()
    keep = info >= threshold if threshold > 0 else np.ones(vib.units, dtype=bool)
    return PruneDecision(keep=keep, expected_keep_prob=info, threshold=threshold)


def vib_forward(h_prev: Tensor, layer_fn, vib: VibLayer, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Apply ``layer_fn`` then the multiplicative VIB gate.

    Training draws ``mu + sigma * eps`` per example; evaluation uses ``mu``.
    Conv outputs are gated per channel.
    """
    out = layer_fn(h_prev)
    if out.shape[1] != vib.units:
        raise ContractError(f"layer produced {out.shape[1]} units, gate has {vib.units}")
    if train:
        if rng is None:
            raise ContractError("training mode needs an RNG")
        gate = vib.sample(vib.draw_noise(rng, out.shape[0]))
    else:
        gate = vib.mu.reshape(1, vib.units)
    shape = (gate.shape[0], vib.units) + (1,) * (out.ndim - 2)
    return out * gate.reshape(shape)


def vib_loss(model, x_adv, y, dataset_size: int, gates=None, beta: float | None = None) -> Tensor:
    """Adversarial cross-entropy plus ``sum_i beta_i * KL_i / dataset_size``.

    ``model`` is a :class:`~anpvs.nn.Network` with VIB gates; ``gates`` are
    the sampled gate tensors (sampled afresh when omitted).  Layers with
    ``beta_i == 0`` contribute nothing, so all-zero betas give exactly the
    adversarial cross-entropy.
    """
    x_adv = x_adv if isinstance(x_adv, Tensor) else Tensor.constant(x_adv)
    if gates is None:
        raise ContractError("vib_loss needs sampled gate values")
    logits = model.forward(x_adv, gates).logits
    loss = softmax_cross_entropy(logits, y)
    for layer in model.gates():
        if layer.kind != "vib":
            continue
        coef = layer.beta if layer.beta is not None else (beta if beta is not None else 0.0)
        if coef != 0.0:
            loss = loss + layer.kl() * (coef / dataset_size)
    return loss
