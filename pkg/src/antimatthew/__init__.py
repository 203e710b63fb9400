"""Anti-Matthew fair federated learning: a simulator and constrained multi-gradient descent."""

from .attacks import AttackSpec, corrupt
from .baselines import fairreg_train, fedavg_train, qffl_train
from .data import ClientDataset, FederationData, Sample, filter_min_size, generate_synthetic, load_csv
from .direction import constrained_direction, min_norm_direction, normalize
from .metrics import Budgets, FederationReport, budget_check, evaluate
from .model import ModelParams, init_params, predict, soft_bias, soft_bias_gradient
from .trainer import GradientBundle, RoundLog, StagePlan, train

__all__ = [
    "AttackSpec", "Budgets", "ClientDataset", "FederationData", "FederationReport",
    "GradientBundle", "ModelParams", "RoundLog", "Sample", "StagePlan", "budget_check",
    "constrained_direction", "corrupt", "evaluate", "fairreg_train", "fedavg_train",
    "filter_min_size", "generate_synthetic", "init_params", "load_csv", "min_norm_direction",
    "normalize", "predict", "qffl_train", "soft_bias", "soft_bias_gradient", "train",
]
__version__ = "0.1.0"
