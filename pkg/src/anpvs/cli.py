"""Command-line entry point.

Verbs: ``run`` (train, evaluate and analyse in one go), ``train``,
``evaluate``, ``attack``, ``prune``, ``landscape`` and ``histogram``.  Each
takes ``--config`` plus overrides.  Exit codes: 0 success, 2 invalid
configuration, 3 numerical abort (diagnostics written to
``<out>/diagnostics.json``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import loss_landscape_grid, write_landscape_csv
from .attacks import batched_attack
from .compression import model_compression
from .config import ExperimentConfig, load_config
from .data import Dataset, load_mnist_idx, mnist_subset, synthetic_dataset
from .errors import ConfigError, NumericalError
from .nn import Network
from .report import canonical_json, write_report
from .snapshot import load_snapshot, save_model
from .training import evaluate, new_model, train
from .vulnerability import vulnerability_map, write_histogram_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

WEIGHTS = "weights.anpw"
TRAIN_LOG = "train_log.jsonl"
REPORT = "report.json"
HISTOGRAM = "histogram.csv"
LANDSCAPE = "landscape.csv"

logger = logging.getLogger("anpvs")


def _streams(cfg: ExperimentConfig) -> dict[str, np.random.SeedSequence]:
    """Independent seed streams for the parts of one experiment."""
    names = ("data", "eval", "histogram", "landscape")
    return dict(zip(names, np.random.SeedSequence([cfg.seed, 7]).spawn(len(names))))


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    kind = cfg.dataset_kind
    if kind in ("blobs", "moons"):
        data_seed = int(_streams(cfg)["data"].generate_state(1)[0])
        train_set = synthetic_dataset(kind, cfg.dataset_n, data_seed, separation=cfg.separation)
        test_set = synthetic_dataset(kind, cfg.dataset_n, data_seed + 1, separation=cfg.separation)
        return train_set, replace(test_set, split="test")
    if kind == "mnist-subset":
        return mnist_subset(cfg.n_train, cfg.n_test)
    paths = cfg.dataset_paths
    if "test_images" in paths:
        train_set = load_mnist_idx(paths["images"], paths["labels"])
        test_set = load_mnist_idx(paths["test_images"], paths["test_labels"], split="test")
        return train_set.subset(slice(0, cfg.n_train)), test_set.subset(slice(0, cfg.n_test), "test")
    return mnist_subset(cfg.n_train, cfg.n_test, images_path=paths["images"], labels_path=paths["labels"])


def _model_for(cfg: ExperimentConfig, data: Dataset, weights=None) -> Network:
    model = new_model(cfg.train, data.images.shape[1:], data.num_classes, np.random.default_rng(cfg.seed))
    if weights is not None:
        model.load_state_dict(load_snapshot(weights))
    return model


def _blackbox_source(cfg: ExperimentConfig, train_set: Dataset) -> Network:
    """Independently seeded source: standard for standard targets, AT otherwise."""
    variant = "standard" if cfg.train.variant == "standard" else "at"
    source_cfg = replace(cfg.train, variant=variant, seed=cfg.seed + 1000)
    return train(train_set, source_cfg).model


class RunArtifacts:
    def __init__(self, out: Path):
        self.out = out
        self.weights, self.train_log = out / WEIGHTS, out / TRAIN_LOG
        self.report, self.histogram, self.landscape = out / REPORT, out / HISTOGRAM, out / LANDSCAPE

    def all(self) -> list[Path]:
        return [self.weights, self.train_log, self.report, self.histogram, self.landscape]


def execute(cfg: ExperimentConfig) -> RunArtifacts:
    """Full pipeline for one config; every artifact lands in ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = _streams(cfg)
    train_set, test_set = load_datasets(cfg)
    result = train(train_set, cfg.train, log_path=out / TRAIN_LOG)
    model = result.model
    save_model(model, out / WEIGHTS)

    x, y = test_set.images[:cfg.eval_n], test_set.labels[:cfg.eval_n]
    source = _blackbox_source(cfg, train_set) if cfg.blackbox else None
    report = evaluate(model, (x, y), cfg.train, source=source, blackbox=cfg.blackbox,
                      rng=np.random.default_rng(streams["eval"]))
    write_report(report, out / REPORT)

    attack = cfg.train.eval_attack
    layer = min(cfg.histogram_layer, len(model.hidden_layer_names()))
    vmap = vulnerability_map(model, x, y, attack, layer, np.random.default_rng(streams["histogram"]), bins=cfg.bins)
    write_histogram_csv(vmap, out / HISTOGRAM)

    span = attack.epsilon if cfg.landscape_span is None else cfg.landscape_span
    n = min(cfg.landscape_examples, len(x))
    grid = loss_landscape_grid(model, x[:n], y[:n], cfg.landscape_n, span,
                               np.random.default_rng(streams["landscape"]))
    write_landscape_csv(grid, out / LANDSCAPE)
    return RunArtifacts(out)


def run_experiment(config_path, overrides: dict | None = None) -> int:
    """Full pipeline for one config file; returns the process exit status."""
    return _guarded(lambda: load_config(config_path, overrides), lambda cfg: execute(cfg))


# -- verbs ---------------------------------------------------------------------

def _cmd_run(cfg: ExperimentConfig, args) -> None:
    print(execute(cfg).report)


def _cmd_train(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, _ = load_datasets(cfg)
    result = train(train_set, cfg.train, log_path=out / TRAIN_LOG)
    save_model(result.model, out / WEIGHTS)
    print(out / WEIGHTS)


def _trained(cfg: ExperimentConfig, args) -> tuple[Network, Dataset, Dataset]:
    train_set, test_set = load_datasets(cfg)
    weights = Path(args.weights) if args.weights else Path(cfg.output_dir) / WEIGHTS
    if not weights.exists():
        raise ConfigError(f"weight snapshot {weights} not found; run `train` first or pass --weights")
    return _model_for(cfg, train_set, weights), train_set, test_set


def _cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    model, train_set, test_set = _trained(cfg, args)
    x, y = test_set.images[:cfg.eval_n], test_set.labels[:cfg.eval_n]
    source = _blackbox_source(cfg, train_set) if cfg.blackbox else None
    report = evaluate(model, (x, y), cfg.train, source=source, blackbox=cfg.blackbox,
                      rng=np.random.default_rng(_streams(cfg)["eval"]))
    write_report(report, Path(cfg.output_dir) / REPORT)
    sys.stdout.write(canonical_json(report))


def _cmd_attack(cfg: ExperimentConfig, args) -> None:
    model, _, test_set = _trained(cfg, args)
    x, y = test_set.images[:cfg.eval_n], test_set.labels[:cfg.eval_n]
    attack = cfg.train.eval_attack
    x_adv = batched_attack(model, x, y, attack, np.random.default_rng(_streams(cfg)["eval"]))
    np.save(Path(cfg.output_dir) / "adversarial.npy", x_adv)
    summary = {"attack": attack.to_dict(), "clean_accuracy": model.accuracy(x, y),
               "adv_accuracy": model.accuracy(x_adv, y), "max_perturbation": float(np.abs(x_adv - x).max())}
    write_report(summary, Path(cfg.output_dir) / "attack.json")
    sys.stdout.write(canonical_json(summary))


def _cmd_prune(cfg: ExperimentConfig, args) -> None:
    model, _, _ = _trained(cfg, args)
    decisions = model.prune_decisions()
    summary = {"compression": model_compression(model).to_dict(),
               "layers": {name: {"kept": d.kept, "dropped": d.dropped, "threshold": d.threshold}
                          for name, d in decisions.items()}}
    write_report(summary, Path(cfg.output_dir) / "prune.json")
    sys.stdout.write(canonical_json(summary))


def _cmd_landscape(cfg: ExperimentConfig, args) -> None:
    model, _, test_set = _trained(cfg, args)
    n = min(cfg.landscape_examples, len(test_set))
    span = cfg.train.eval_attack.epsilon if cfg.landscape_span is None else cfg.landscape_span
    grid = loss_landscape_grid(model, test_set.images[:n], test_set.labels[:n], cfg.landscape_n, span,
                               np.random.default_rng(_streams(cfg)["landscape"]))
    write_landscape_csv(grid, Path(cfg.output_dir) / LANDSCAPE)
    print(Path(cfg.output_dir) / LANDSCAPE)


def _cmd_histogram(cfg: ExperimentConfig, args) -> None:
    model, _, test_set = _trained(cfg, args)
    x, y = test_set.images[:cfg.eval_n], test_set.labels[:cfg.eval_n]
    layer = cfg.histogram_layer if args.layer is None else args.layer
    vmap = vulnerability_map(model, x, y, cfg.train.eval_attack, layer,
                             np.random.default_rng(_streams(cfg)["histogram"]), bins=cfg.bins)
    write_histogram_csv(vmap, Path(cfg.output_dir) / HISTOGRAM)
    print(Path(cfg.output_dir) / HISTOGRAM)


COMMANDS = {"run": _cmd_run, "train": _cmd_train, "evaluate": _cmd_evaluate, "attack": _cmd_attack,
            "prune": _cmd_prune, "landscape": _cmd_landscape, "histogram": _cmd_histogram}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anpvs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat dotted-key TOML file")
        p.add_argument("--epsilon", type=float, help="attack radius for training and evaluation")
        p.add_argument("--steps", type=int, help="PGD steps for training and evaluation")
        p.add_argument("--step-size", type=float, help="PGD step size for training and evaluation")
        p.add_argument("--restarts", type=int, help="PGD restarts for evaluation")
        p.add_argument("--variant", help="training variant")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name not in ("run", "train"):
            p.add_argument("--weights", help="weight snapshot (default: <out>/weights.anpw)")
        if name == "histogram":
            p.add_argument("--layer", type=int, help="0 = input, 1.. = hidden layers")
    return parser


def overrides_from(args) -> dict:
    o = {"train.variant": args.variant, "seed": args.seed, "output.dir": args.out,
         "eval.restarts": args.restarts}
    for flag, key in (("epsilon", "epsilon"), ("steps", "steps"), ("step_size", "step_size")):
        value = getattr(args, flag)
        if value is not None:
            o[f"attack.{key}"] = o[f"eval.{key}"] = value
    return o


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return str(float(value))
    return value


def _guarded(load, action) -> int:
    """Run ``action(load())`` and map failures onto exit codes."""
    out_dir = None
    try:
        cfg = load()
        out_dir = Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        action(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        dump = _json_safe({"error": str(exc), "diagnostics": exc.diagnostics})
        print(f"numerical abort: {exc}", file=sys.stderr)
        if out_dir is not None:
            (out_dir / "diagnostics.json").write_text(json.dumps(dump, indent=2, sort_keys=True, default=str))
        return EXIT_NUMERICAL
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return _guarded(lambda: load_config(args.config, overrides_from(args)),
                    lambda cfg: COMMANDS[args.command](cfg, args))


if __name__ == "__main__":
    sys.exit(main())
