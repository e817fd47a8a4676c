"""Training loops and evaluation for the six variants.

Variants:

* ``standard``   clean cross-entropy only
* ``at``         PGD adversarial training (clean + adversarial CE)
* ``at_vs``      ``at`` plus the vulnerability-suppression penalty
* ``anp``        ``at`` with beta-Bernoulli gates and their KL term
* ``anp_vs``     ``anp`` plus vulnerability suppression
* ``anp_vs_vib`` ``anp_vs`` with VIB gates instead of beta-Bernoulli gates
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, batched_attack, pgd_attack
from .compression import CompressionReport, model_compression
from .errors import ConfigError, DimensionError, NumericalError
from .nn import Network, build_network
from .optim import Adam
from .tensor import Tensor, softmax_cross_entropy
from .vulnerability import VulnerabilityReport, measure_vulnerability, vs_penalty

logger = logging.getLogger(__name__)

VARIANTS = ("standard", "at", "at_vs", "anp", "anp_vs", "anp_vs_vib")


def default_train_attack() -> AttackConfig:
    return AttackConfig(epsilon=0.3, step_size=0.1, steps=7, restarts=1, random_start=True)


def default_eval_attack() -> AttackConfig:
    return AttackConfig(epsilon=0.3, step_size=0.01, steps=40, restarts=2, random_start=True)


@dataclass
class TrainConfig:
    variant: str = "anp_vs"
    arch: str = "mnist-small"
    epochs: int = 10
    batch_size: int = 64
    lam: float = 0.01
    beta: float = 1.0
    variational_lr: float = 1e-2
    weight_lr: float | None = None  # defaults to 0.1 * variational_lr
    weight_decay: float = 0.0
    attack: AttackConfig = field(default_factory=default_train_attack)
    eval_attack: AttackConfig = field(default_factory=default_eval_attack)
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    prior_concentration: float = 1e-4
    temperature: float = 0.1
    prune_threshold: float = 1e-3
    mask_init_a: float = 1.0
    mask_init_b: float = 1.0
    warm_start_epochs: int = 0  # standard-training epochs before the variant's own
    vib_threshold: float = 0.01
    val_fraction: float = 0.1
    val_limit: int = 500

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lambda and beta must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.warm_start_epochs < 0:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.variational_lr <= 0 or (self.weight_lr is not None and self.weight_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    @property
    def effective_weight_lr(self) -> float:
        return 0.1 * self.variational_lr if self.weight_lr is None else self.weight_lr

    @property
    def uses_attack(self) -> bool:
        return self.variant != "standard"

    @property
    def gate_kind(self) -> str | None:
        return {"anp": "mask", "anp_vs": "mask", "anp_vs_vib": "vib"}.get(self.variant)

    @property
    def vs_strength(self) -> float:
        return self.lam if self.variant in ("at_vs", "anp_vs", "anp_vs_vib") else 0.0

    @property
    def kl_strength(self) -> float:
        return self.beta if self.gate_kind else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class StepMetrics:
    loss: float
    loss_J: float
    loss_vs: float
    loss_kl: float
    clean_acc: float
    adv_acc: float


@dataclass
class EvalReport:
    clean_accuracy: float
    whitebox_adv_accuracy: float
    blackbox_adv_accuracy: float | None
    vulnerability: VulnerabilityReport
    blackbox_vulnerability: float | None
    compression: CompressionReport
    variant: str = ""

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "clean_accuracy": self.clean_accuracy,
            "whitebox_adv_accuracy": self.whitebox_adv_accuracy,
            "blackbox_adv_accuracy": self.blackbox_adv_accuracy,
            "vulnerability": self.vulnerability.to_dict(),
            "blackbox_vulnerability": self.blackbox_vulnerability,
            "compression": self.compression.to_dict(),
        }


@dataclass
class TrainResult:
    model: Network
    log: list[dict]
    config: TrainConfig


def new_model(cfg: TrainConfig, input_shape: tuple, num_classes: int, rng: np.random.Generator) -> Network:
    kind = cfg.gate_kind
    options = {}
    if kind == "mask":
        options = dict(prior_concentration=cfg.prior_concentration, temperature=cfg.temperature,
                       threshold=cfg.prune_threshold, init_a=cfg.mask_init_a, init_b=cfg.mask_init_b)
    elif kind == "vib":
        options = dict(threshold=cfg.vib_threshold)
    return build_network(cfg.arch, rng, gate=kind, input_shape=input_shape, num_classes=num_classes, **options)


def make_optimizer(model: Network, cfg: TrainConfig) -> Adam:
    groups = [(model.weight_parameters(), cfg.effective_weight_lr)]
    if model.variational_parameters():
        groups.append((model.variational_parameters(), cfg.variational_lr))
    return Adam(groups, betas=cfg.adam_betas, eps=cfg.adam_eps)


def _weight_decay(model: Network, coef: float) -> Tensor | None:
    if coef == 0.0:
        return None
    total = None
    for layer in model.layers:
        for p in layer.parameters():
            if p.ndim > 1:
                term = (p * p).sum()
                total = term if total is None else total + term
    return total * coef


def objective_J(model: Network, gates, x, x_adv, y, weight_decay: float = 0.0, traces: bool = False):
    """Half clean plus half adversarial cross-entropy, plus weight decay.

    ``x_adv=None`` gives the clean-only objective.  With ``traces=True`` the
    two forward results are returned as well, for the VS penalty.
    """
    clean = model.forward(Tensor.constant(x), gates)
    if x_adv is None:
        J = softmax_cross_entropy(clean.logits, y)
        adv = None
    else:
        adv = model.forward(Tensor.constant(x_adv), gates)
        J = softmax_cross_entropy(clean.logits, y) * 0.5 + softmax_cross_entropy(adv.logits, y) * 0.5
    decay = _weight_decay(model, weight_decay)
    if decay is not None:
        J = J + decay
    return (J, clean, adv) if traces else J


def _kl_term(model: Network, cfg: TrainConfig, dataset_size: int) -> Tensor | None:
    if cfg.gate_kind is None:
        return None
    total = None
    for gate in model.gates():
        coef = cfg.kl_strength if getattr(gate, "beta", None) is None else gate.beta
        if coef == 0.0:
            continue
        term = gate.kl() * (coef / dataset_size)
        total = term if total is None else total + term
    return total


def anp_vs_step(model: Network, batch, cfg: TrainConfig, rng: np.random.Generator, optimizer: Adam,
                dataset_size: int, gate_mode: str = "sample") -> StepMetrics:
    """One minibatch update.

    Gates are sampled once for the batch (``gate_mode="ones"`` pins them to
    1); the attack sees them frozen.  The total loss ``J + lam*V + beta*KL/N``
    is backpropagated once and Adam applies the weight and variational
    learning rates to their parameter groups.
    """
    x, y = batch
    attack_rng, gate_rng = rng.spawn(2)
    if gate_mode == "sample":
        gates = model.sample_gates(model.draw_noise(gate_rng, len(x)))
    elif gate_mode == "ones":
        gates = {layer.name: Tensor.constant(np.ones(layer.gate.units)) for layer in model.gated_layers()}
    else:
        raise ConfigError(f"unknown gate mode {gate_mode!r}")

    x_adv = pgd_attack(model, x, y, cfg.attack, attack_rng, gates=gates) if cfg.uses_attack else None
    J, clean, adv = objective_J(model, gates, x, x_adv, y, cfg.weight_decay, traces=True)
    loss = J
    vs_value = kl_value = 0.0
    if cfg.vs_strength > 0.0 and adv is not None:
        vs = vs_penalty(clean.traces, adv.traces, cfg.vs_strength)
        vs_value = vs.item()
        loss = loss + vs
    kl = _kl_term(model, cfg, dataset_size)
    if kl is not None:
        kl_value = kl.item()
        loss = loss + kl
    if not np.isfinite(loss.item()):
        raise NumericalError("non-finite training loss",
                             {"loss_J": J.item(), "loss_vs": vs_value, "loss_kl": kl_value})
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    y = np.asarray(y)
    clean_acc = float(np.mean(clean.logits.values.argmax(1) == y))
    adv_acc = float(np.mean(adv.logits.values.argmax(1) == y)) if adv is not None else clean_acc
    return StepMetrics(loss=loss.item(), loss_J=J.item(), loss_vs=vs_value, loss_kl=kl_value,
                       clean_acc=clean_acc, adv_acc=adv_acc)


def split_train_val(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation; the last ``fraction`` of it is the validation split."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * fraction))
    return order[:n - n_val], order[n - n_val:]


def _validate(model: Network, x, y, cfg: TrainConfig, rng) -> dict:
    if len(x) == 0:
        return {"clean_acc": None, "adv_acc": None, "vulnerability": None}
    x_adv = batched_attack(model, x, y, cfg.attack, rng) if cfg.uses_attack else x
    report = measure_vulnerability(model, x, x_adv)
    return {"clean_acc": model.accuracy(x, y), "adv_acc": model.accuracy(x_adv, y),
            "vulnerability": report.network}


def train(dataset, cfg: TrainConfig, model: Network | None = None, log_path=None, init_state=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of minibatch updates on ``dataset``.

    ``dataset`` exposes ``images`` [N, C, H, W], ``labels`` and
    ``num_classes``.  ``init_state`` optionally warm-starts the weights from a
    (standard-trained) snapshot; gate parameters absent from it keep their
    initialisation.
    """
    x_all, y_all = np.asarray(dataset.images), np.asarray(dataset.labels)
    if len(x_all) == 0:
        raise ConfigError("empty training set")
    init_ss, step_ss, val_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if model is None:
        model = new_model(cfg, x_all.shape[1:], dataset.num_classes, np.random.default_rng(init_ss))
    if tuple(x_all.shape[1:]) != model.input_shape:
        raise DimensionError(f"dataset images {x_all.shape[1:]} do not fit model input {model.input_shape}")
    if init_state is None and cfg.warm_start_epochs > 0 and cfg.variant != "standard":
        warm_cfg = replace(cfg, variant="standard", epochs=cfg.warm_start_epochs, warm_start_epochs=0)
        init_state = train(dataset, warm_cfg).model.state_dict()
    if init_state is not None:
        model.load_state_dict(init_state, strict=False)

    train_idx, val_idx = split_train_val(len(x_all), cfg.val_fraction, cfg.seed)
    val_idx = val_idx[:cfg.val_limit]
    x_val, y_val = x_all[val_idx], y_all[val_idx]
    n_train = len(train_idx)
    optimizer = make_optimizer(model, cfg)
    step_rng = np.random.default_rng(step_ss)
    val_rng = np.random.default_rng(val_ss)
    log: list[dict] = []
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = train_idx[step_rng.permutation(n_train)]
            sums = np.zeros(4)
            batches = 0
            for start in range(0, n_train, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                try:
                    m = anp_vs_step(model, (x_all[idx], y_all[idx]), cfg, step_rng, optimizer, n_train)
                except NumericalError as exc:
                    exc.diagnostics.update({"epoch": epoch, "batch_start": start})
                    raise
                sums += (m.loss, m.loss_J, m.loss_vs, m.loss_kl)
                batches += 1
            val = _validate(model, x_val, y_val, cfg, val_rng)
            mean = [float(v) for v in sums / batches]
            record = {"epoch": epoch, "loss": mean[0], "loss_J": mean[1],
                      "loss_vs": mean[2], "loss_kl": mean[3],
                      "clean_acc": val["clean_acc"], "adv_acc": val["adv_acc"],
                      "vulnerability": val["vulnerability"],
                      "sparsity": model_compression(model).sparsity_pct}
            log.append(record)
            logger.info("epoch %d %s", epoch, record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return TrainResult(model=model, log=log, config=cfg)


def evaluate(model: Network, data, cfg: TrainConfig, source: Network | None = None,
             blackbox: bool = False, rng: np.random.Generator | None = None) -> EvalReport:
    """Build the :class:`EvalReport` for ``model`` on held-out data.

    ``data`` is ``(x, y)``.  Black-box examples are crafted on ``source`` with
    the same evaluation attack.
    """
    x, y = data
    x, y = np.asarray(x), np.asarray(y)
    if blackbox and source is None:
        raise ConfigError("black-box evaluation requested without a source model")
    rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    attack_rng, bb_rng = rng.spawn(2)
    x_adv = batched_attack(model, x, y, cfg.eval_attack, attack_rng)
    vuln = measure_vulnerability(model, x, x_adv)
    bb_acc = bb_vuln = None
    if blackbox:
        if tuple(source.input_shape) != tuple(model.input_shape):
            raise DimensionError("source and target input shapes differ")
        x_bb = batched_attack(source, x, y, cfg.eval_attack, bb_rng)
        bb_acc = model.accuracy(x_bb, y)
        bb_vuln = measure_vulnerability(model, x, x_bb).network
    return EvalReport(clean_accuracy=model.accuracy(x, y), whitebox_adv_accuracy=model.accuracy(x_adv, y),
                      blackbox_adv_accuracy=bb_acc, vulnerability=vuln, blackbox_vulnerability=bb_vuln,
                      compression=model_compression(model), variant=cfg.variant)


def with_variant(cfg: TrainConfig, variant: str, **changes) -> TrainConfig:
    return replace(cfg, variant=variant, **changes)
