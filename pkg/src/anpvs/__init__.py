"""Robustness through pruning: adversarially learned dropout masks and feature-vulnerability penalties."""

from .attacks import AttackConfig, batched_attack, pgd_attack, project_linf, transfer_attack_eval
from .compression import CompressionReport, compression_report, count_flops, model_compression
from .data import Dataset, load_mnist_idx, mnist_subset, synthetic_dataset
from .errors import (AnpError, ConfigError, ConsistencyError, ContractError, DimensionError, DomainError,
                     FormatError, GraphStateError, NumericalError)
from .masks import MaskLayer, PruneDecision, kl_beta_bernoulli, prune
from .nn import Network, build_network
from .tensor import Tensor, grad_check
from .training import EvalReport, TrainConfig, anp_vs_step, evaluate, objective_J, train
from .vib import VibLayer, vib_kl, vib_loss, vib_prune
from .vulnerability import VulnerabilityReport, measure_vulnerability, network_vulnerability, vs_penalty

__version__ = "0.1.0"
