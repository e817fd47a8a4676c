"""Beta-Bernoulli dropout gates.

Each unit ``k`` (a dense neuron or a conv output channel) carries a keep
probability ``pi_k`` with a Kumaraswamy(a_k, b_k) variational posterior and a
Beta(alpha/K, 1) prior.  Training masks are concrete (relaxed Bernoulli)
samples; inference uses the posterior mean for units that survive pruning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln

from .errors import ContractError, DomainError
from .tensor import EULER_GAMMA, Tensor, digamma

CLAMP = 1e-12
POSITIVE_FLOOR = 1e-6


def _clamp_unit(u):
    return np.clip(u, CLAMP, 1.0 - CLAMP)


def kumaraswamy_sample(a, b, u):
    """Inverse-CDF draw ``(1 - (1-u)^(1/b))^(1/a)``.

    Works on floats/arrays, or on tensors ``a``/``b`` (``u`` is always plain
    noise) in which case the result stays differentiable in ``a`` and ``b``.
    """
    u = _clamp_unit(np.asarray(u, dtype=np.float64))
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor.constant(a)
        b = b if isinstance(b, Tensor) else Tensor.constant(b)
        log_survival = Tensor.constant(np.log1p(-u))
        inner = (1.0 - (log_survival / b).exp()).clip(1e-300, 1.0)
        return (inner.log() / a).exp().clip(CLAMP, 1.0 - CLAMP)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("Kumaraswamy parameters must be positive")
    log_inner = np.log1p(-np.exp(np.log1p(-u) / b))
    out = np.exp(log_inner / a)
    return float(out) if out.ndim == 0 else out


def kumaraswamy_cdf(x, a, b):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return 1.0 - (1.0 - x ** a) ** b


def relaxed_mask(pi, u, temperature: float):
    """Concrete relaxation ``sigmoid((logit(pi) + logit(u)) / temperature)``.

    The result is clamped to ``[1e-12, 1 - 1e-12]`` since small temperatures
    otherwise saturate to exactly 0 or 1 in double precision.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    u = _clamp_unit(np.asarray(u, dtype=np.float64))
    noise = np.log(u) - np.log1p(-u)
    if isinstance(pi, Tensor):
        pi = pi.clip(CLAMP, 1.0 - CLAMP)
        logit = pi.log() - (1.0 - pi).log()
        return ((logit + noise) * (1.0 / temperature)).sigmoid().clip(CLAMP, 1.0 - CLAMP)
    pi = _clamp_unit(np.asarray(pi, dtype=np.float64))
    z = (np.log(pi) - np.log1p(-pi) + noise) / temperature
    out = np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), CLAMP, 1.0 - CLAMP)
    return float(out) if out.ndim == 0 else out


def kumaraswamy_mean(a, b):
    """``E[pi] = b * B(1 + 1/a, b)`` for Kumaraswamy(a, b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return b * np.exp(betaln(1.0 + 1.0 / a, b))


def kl_kumaraswamy_beta(a, b, prior):
    """Closed-form KL(Kumaraswamy(a, b) || Beta(prior, 1)), summed over units.

    ``a`` and ``b`` may be arrays or tensors; the result matches their kind.
    """
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor.constant(a)
        b = b if isinstance(b, Tensor) else Tensor.constant(b)
        term = ((a - prior) / a) * (-EULER_GAMMA - digamma(b) - 1.0 / b) \
            + (a * b * (1.0 / prior)).log() - (b - 1.0) / b
        return term.sum()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    term = ((a - prior) / a) * (-EULER_GAMMA - digamma(b) - 1.0 / b) \
        + np.log(a * b / prior) - (b - 1.0) / b
    return float(np.sum(term))


def _inverse_softplus(y, offset: float = 0.0):
    """Raw values whose ``softplus(.) + offset`` reproduces ``y + offset``.

    The analytic inverse can be off by an ulp; a few ``nextafter`` nudges make
    saved parameters reload bit-identically.
    """
    y = np.asarray(y, dtype=np.float64)
    raw = y + np.log(-np.expm1(-y))
    target = y + offset
    for _ in range(8):
        got = np.logaddexp(0.0, raw) + offset
        off = got != target
        if not off.any():
            break
        raw = np.where(off, np.nextafter(raw, np.where(got < target, np.inf, -np.inf)), raw)
    return raw


@dataclass
class PruneDecision:
    keep: np.ndarray
    expected_keep_prob: np.ndarray
    threshold: float

    @property
    def kept(self) -> int:
        return int(self.keep.sum())

    @property
    def dropped(self) -> int:
        return int(self.keep.size - self.keep.sum())


class MaskLayer:
    """Per-unit beta-Bernoulli gate with Kumaraswamy posterior parameters.

    ``a`` and ``b`` are stored unconstrained and mapped through
    ``softplus(.) + 1e-6``.
    """

    kind = "mask"

    def __init__(self, units: int, prior_concentration: float = 1e-4, temperature: float = 0.1,
                 threshold: float = 1e-3, rng: np.random.Generator | None = None, name: str = "mask",
                 init_a: float = 1.0, init_b: float = 1.0):
        if units < 1:
            raise ContractError("a mask needs at least one unit")
        if prior_concentration <= 0 or temperature <= 0:
            raise ContractError("prior concentration and temperature must be positive")
        if init_a <= 0 or init_b <= 0:
            raise ContractError("initial a and b must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.units = units
        self.prior_concentration = prior_concentration
        self.temperature = temperature
        self.threshold = threshold
        self.name = name
        init = np.array([[init_a], [init_b]]) * (1.0 + rng.uniform(-0.01, 0.01, size=(2, units)))
        self.a_raw = Tensor(_inverse_softplus(init[0] - POSITIVE_FLOOR, POSITIVE_FLOOR), requires_grad=True, name=f"{name}.a")
        self.b_raw = Tensor(_inverse_softplus(init[1] - POSITIVE_FLOOR, POSITIVE_FLOOR), requires_grad=True, name=f"{name}.b")

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return [self.a_raw, self.b_raw]

    def a_tensor(self) -> Tensor:
        return self.a_raw.softplus() + POSITIVE_FLOOR

    def b_tensor(self) -> Tensor:
        return self.b_raw.softplus() + POSITIVE_FLOOR

    @property
    def a(self) -> np.ndarray:
        return np.logaddexp(0.0, self.a_raw.values) + POSITIVE_FLOOR

    @property
    def b(self) -> np.ndarray:
        return np.logaddexp(0.0, self.b_raw.values) + POSITIVE_FLOOR

    def set_params(self, a, b) -> None:
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), (self.units,))
        b = np.broadcast_to(np.asarray(b, dtype=np.float64), (self.units,))
        if np.any(a <= POSITIVE_FLOOR) or np.any(b <= POSITIVE_FLOOR):
            raise DomainError("a and b must exceed the positivity floor")
        self.a_raw.values[:] = _inverse_softplus(a - POSITIVE_FLOOR, POSITIVE_FLOOR)
        self.b_raw.values[:] = _inverse_softplus(b - POSITIVE_FLOOR, POSITIVE_FLOOR)

    def state(self) -> dict[str, np.ndarray]:
        return {"a": self.a.copy(), "b": self.b.copy()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.set_params(state["a"], state["b"])

    # -- gate values ---------------------------------------------------------
    def draw_noise(self, rng: np.random.Generator, batch_size: int = 1) -> np.ndarray:
        """Two uniforms per unit: one for ``pi`` and one for the relaxation.

        Masks are resampled once per minibatch, so ``batch_size`` is unused.
        """
        return rng.uniform(size=(2, self.units))

    def sample(self, noise: np.ndarray) -> Tensor:
        """Relaxed mask on the graph, differentiable in ``a`` and ``b``."""
        pi = kumaraswamy_sample(self.a_tensor(), self.b_tensor(), noise[0])
        return relaxed_mask(pi, noise[1], self.temperature)

    def sample_values(self, noise: np.ndarray) -> np.ndarray:
        pi = kumaraswamy_sample(self.a, self.b, noise[0])
        return np.asarray(relaxed_mask(pi, noise[1], self.temperature))

    def expected_keep_probability(self) -> np.ndarray:
        return kumaraswamy_mean(self.a, self.b)

    def prune(self, threshold: float | None = None) -> PruneDecision:
        return prune(self, self.threshold if threshold is None else threshold)

    def inference_gate(self) -> np.ndarray:
        decision = self.prune()
        return np.where(decision.keep, decision.expected_keep_prob, 0.0)

    def kl(self) -> Tensor:
        return kl_kumaraswamy_beta(self.a_tensor(), self.b_tensor(), self.prior_concentration)

    def __repr__(self) -> str:
        return f"MaskLayer(units={self.units}, prior={self.prior_concentration}, tau={self.temperature})"


def kl_beta_bernoulli(layer: MaskLayer) -> float:
    return kl_kumaraswamy_beta(layer.a, layer.b, layer.prior_concentration)


def expected_keep_probability(layer: MaskLayer) -> np.ndarray:
    return layer.expected_keep_probability()


def prune(layer: MaskLayer, threshold: float) -> PruneDecision:
    """Drop units whose expected keep probability falls below ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    keep_prob = layer.expected_keep_probability()
    return PruneDecision(keep=keep_prob >= threshold, expected_keep_prob=keep_prob, threshold=threshold)


def monte_carlo_kl(a: float, b: float, prior: float, samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Sample estimate of KL(Kumaraswamy(a, b) || Beta(prior, 1)).

    Returns ``(estimate, standard_error)``.  The log densities are evaluated in
    log space so tiny ``pi`` do not underflow.
    """
    u = _clamp_unit(rng.uniform(size=samples))
    log_survival = np.log1p(-u) / b  # log(1 - pi^a)
    log_pi = np.log1p(-np.exp(log_survival)) / a
    log_q = math.log(a) + math.log(b) + (a - 1.0) * log_pi + (b - 1.0) * log_survival
    log_p = math.log(prior) + (prior - 1.0) * log_pi
    diff = log_q - log_p
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(samples))
