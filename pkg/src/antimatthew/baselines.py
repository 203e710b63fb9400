"""Reference trainers sharing the anti-Matthew trainer's init, rounds and logs."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .attacks import AttackSpec, RoundCorrupter
from .data import FederationData
from .metrics import evaluate
from .model import ModelParams, init_params
from .trainer import GradientBundle, RoundLog, StagePlan, collect_round


def _run(federation: FederationData, plan: StagePlan, seed: int, metric: str, hidden: int,
         branch: str, update: Callable[[GradientBundle], np.ndarray],
         attack: Optional[AttackSpec] = None,
         use_protected: bool = False) -> tuple[ModelParams, list[RoundLog]]:
    params = init_params(federation.feature_dim, federation.M, hidden, seed,
                         use_protected=use_protected)
    template = params.copy()
    theta = params.flat()
    corrupt = RoundCorrupter(attack) if attack is not None else None
    logs: list[RoundLog] = []
    report = None
    for rnd in range(1, plan.total_rounds + 1):
        bundle, train_rep = collect_round(template.with_flat(theta), federation, metric,
                                          plan.normalize_gradients, corrupt)
        theta = theta - plan.eta * update(bundle)
        if rnd % plan.log_every == 0 or rnd == plan.total_rounds:
            report = evaluate(template.with_flat(theta), federation, metric)
        logs.append(RoundLog(rnd, 0, branch, [], plan.eta, True, train_rep, report, theta.copy()))
    return template.with_flat(theta), logs


def size_weights(federation: FederationData) -> np.ndarray:
    sizes = federation.train_sizes().astype(float)
    return sizes / sizes.sum()


def fedavg_train(federation: FederationData, plan: StagePlan | None = None, seed: int = 0,
                 metric: str = "TPSD", hidden: int = 0, weighted: bool = True,
                 attack: Optional[AttackSpec] = None, use_protected: bool = False):
    """FedSGD on the dataset-size-weighted mean loss (``weighted=False``: plain mean)."""
    plan = plan or StagePlan()
    w = size_weights(federation) if weighted else np.full(federation.n_clients,
                                                          1.0 / federation.n_clients)
    return _run(federation, plan, seed, metric, hidden, "fedavg",
                lambda b: w @ b.loss_grads, attack, use_protected)


def qffl_weights(losses: np.ndarray, q: float, base: np.ndarray) -> np.ndarray:
    raw = base * np.power(np.maximum(losses, 0.0), q)
    total = raw.sum()
    return raw / total if total > 0 else base


def qffl_train(federation: FederationData, plan: StagePlan | None = None, q: float = 1.0,
               seed: int = 0, metric: str = "TPSD", hidden: int = 0,
               size_weighting: bool = True, attack: Optional[AttackSpec] = None,
               use_protected: bool = False):
    """Loss-reweighted FedSGD: client k's gradient weighs ``p_k l_k^q / sum_j p_j l_j^q``.

    This is the gradient-reweighting form of q-FFL, not the original method's
    Lipschitz-scaled update. ``p_k`` are FedAvg size weights, or uniform when
    ``size_weighting`` is off.
    """
    if q < 0:
        raise ValueError("q must be nonnegative")
    plan = plan or StagePlan()
    base = size_weights(federation) if size_weighting else np.full(
        federation.n_clients, 1.0 / federation.n_clients)
    return _run(federation, plan, seed, metric, hidden, "qffl",
                lambda b: qffl_weights(b.losses, q, base) @ b.loss_grads, attack, use_protected)


def fairreg_train(federation: FederationData, plan: StagePlan | None = None, lam: float = 1.0,
                  seed: int = 0, metric: str = "TPSD", hidden: int = 0,
                  attack: Optional[AttackSpec] = None, use_protected: bool = False):
    """Gradient steps on ``mean loss + lam * mean soft bias`` over clients."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    plan = plan or StagePlan()
    return _run(federation, plan, seed, metric, hidden, "fairreg",
                lambda b: b.loss_grads.mean(axis=0) + lam * b.bias_grads.mean(axis=0), attack,
                use_protected)

