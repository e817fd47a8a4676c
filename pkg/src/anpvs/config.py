"""Experiment configuration from flat dotted-key TOML files.

Example::

    seed = 0
    dataset.kind = "blobs"
    train.variant = "standard"
    train.epochs = 5
    attack.epsilon = 0.3
    output.dir = "runs/blobs"

``[section]`` tables are accepted too; both flatten to the same dotted keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli

from .attacks import AttackConfig
from .errors import ConfigError
from .training import TrainConfig, default_eval_attack, default_train_attack

DATASET_KINDS = ("mnist", "mnist-subset", "blobs", "moons", "cifar10")

# dotted key -> (target, field name)
_TRAIN_KEYS = {
    "train.variant": "variant", "train.epochs": "epochs", "train.batch_size": "batch_size",
    "train.lambda": "lam", "train.weight_lr": "weight_lr", "train.variational_lr": "variational_lr",
    "train.weight_decay": "weight_decay", "train.warm_start_epochs": "warm_start_epochs",
    "train.val_fraction": "val_fraction", "train.val_limit": "val_limit",
    "mask.beta": "beta", "mask.prior": "prior_concentration", "mask.temperature": "temperature",
    "mask.threshold": "prune_threshold", "mask.init_a": "mask_init_a", "mask.init_b": "mask_init_b",
    "vib.threshold": "vib_threshold", "model.arch": "arch",
}
_ATTACK_FIELDS = ("epsilon", "step_size", "steps", "restarts", "random_start")
_OTHER_KEYS = {
    "seed", "output.dir",
    "dataset.kind", "dataset.images", "dataset.labels", "dataset.test_images", "dataset.test_labels",
    "dataset.n", "dataset.n_train", "dataset.n_test", "dataset.separation",
    "eval.n", "eval.blackbox",
    "analysis.histogram_layer", "analysis.bins", "analysis.landscape_n", "analysis.landscape_span",
    "analysis.landscape_examples",
}


@dataclass
class ExperimentConfig:
    train: TrainConfig
    dataset_kind: str = "blobs"
    dataset_paths: dict = field(default_factory=dict)
    dataset_n: int = 400
    n_train: int = 4000
    n_test: int = 1000
    separation: float = 4.0
    output_dir: Path = Path("runs/default")
    eval_n: int = 1000
    blackbox: bool = False
    histogram_layer: int = 1
    bins: int = 50
    landscape_n: int = 21
    landscape_span: float | None = None  # defaults to the evaluation epsilon
    landscape_examples: int = 100

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "dataset_kind": self.dataset_kind,
                "dataset_paths": {k: str(v) for k, v in self.dataset_paths.items()},
                "dataset_n": self.dataset_n, "n_train": self.n_train, "n_test": self.n_test,
                "output_dir": str(self.output_dir), "eval_n": self.eval_n, "blackbox": self.blackbox,
                "histogram_layer": self.histogram_layer, "bins": self.bins, "landscape_n": self.landscape_n,
                "landscape_span": self.landscape_span, "landscape_examples": self.landscape_examples}


def flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _attack(flat: dict, section: str, base: AttackConfig) -> AttackConfig:
    changes = {f: flat[f"{section}.{f}"] for f in _ATTACK_FIELDS if f"{section}.{f}" in flat}
    try:
        return replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def from_flat(flat: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate dotted keys and build the configuration objects."""
    known = set(_TRAIN_KEYS) | _OTHER_KEYS | {f"{s}.{f}" for s in ("attack", "eval") for f in _ATTACK_FIELDS}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    base_dir = base_dir or Path.cwd()
    kind = flat.get("dataset.kind", "blobs")
    if kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {kind!r}")
    if kind == "cifar10":
        raise ConfigError("dataset.kind = cifar10 is reserved but not supported")
    paths = {}
    for key in ("images", "labels", "test_images", "test_labels"):
        if f"dataset.{key}" in flat:
            p = Path(flat[f"dataset.{key}"])
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                raise ConfigError(f"dataset.{key}: {p} does not exist")
            paths[key] = p
    if kind == "mnist" and not {"images", "labels"} <= set(paths):
        raise ConfigError("dataset.kind = mnist needs dataset.images and dataset.labels")

    train_kwargs = {field_name: flat[key] for key, field_name in _TRAIN_KEYS.items() if key in flat}
    train_kwargs["seed"] = flat.get("seed", 0)
    if not isinstance(train_kwargs["seed"], int) or train_kwargs["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if kind in ("blobs", "moons"):
        train_kwargs.setdefault("arch", "mlp")
    try:
        train_cfg = TrainConfig(attack=_attack(flat, "attack", default_train_attack()),
                                eval_attack=_attack(flat, "eval", default_eval_attack()), **train_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training settings: {exc}") from exc

    out = Path(flat.get("output.dir", "runs/default"))
    cfg = ExperimentConfig(
        train=train_cfg, dataset_kind=kind, dataset_paths=paths,
        dataset_n=int(flat.get("dataset.n", 400)), n_train=int(flat.get("dataset.n_train", 4000)),
        n_test=int(flat.get("dataset.n_test", 1000)), separation=float(flat.get("dataset.separation", 4.0)),
        output_dir=out if out.is_absolute() else base_dir / out,
        eval_n=int(flat.get("eval.n", 1000)), blackbox=bool(flat.get("eval.blackbox", False)),
        histogram_layer=int(flat.get("analysis.histogram_layer", 1)), bins=int(flat.get("analysis.bins", 50)),
        landscape_n=int(flat.get("analysis.landscape_n", 21)),
        landscape_span=flat.get("analysis.landscape_span"),
        landscape_examples=int(flat.get("analysis.landscape_examples", 100)),
    )
    if cfg.landscape_n < 1 or cfg.landscape_n % 2 == 0:
        raise ConfigError("analysis.landscape_n must be a positive odd number")
    if cfg.bins < 1 or cfg.eval_n < 1 or cfg.dataset_n < 2:
        raise ConfigError("analysis.bins and eval.n must be >= 1, dataset.n >= 2")
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse ``path``; ``overrides`` (dotted keys) win over file values.

    Relative paths inside the file resolve against the file's directory.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            tree = tomli.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    flat = flatten(tree)
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_flat(flat, path.resolve().parent)
