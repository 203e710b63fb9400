"""Hard evaluation metrics and cross-client aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientDataset, FederationData
from .model import (ModelParams, PredictionBatch, bce_from_probs, predict, soft_bias,
                    std_of_rates, _group_masks)

SATISFIED, NEAR, VIOLATED = "satisfied", "near", "violated"


@dataclass(frozen=True)
class Budgets:
    eps_b: float
    eps_vl: float
    eps_vb: float

    def __post_init__(self):
        for name in ("eps_b", "eps_vl", "eps_vb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class ClientReport:
    loss: float
    accuracy: float
    bias: float
    soft_bias: float
    degenerate: bool = False


@dataclass
class FederationReport:
    reports: list[ClientReport]
    losses: np.ndarray = field(init=False)
    accuracies: np.ndarray = field(init=False)
    biases: np.ndarray = field(init=False)
    soft_biases: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.reports:
            raise ValueError("empty report")
        self.losses = np.array([r.loss for r in self.reports])
        self.accuracies = np.array([r.accuracy for r in self.reports])
        self.biases = np.array([r.bias for r in self.reports])
        self.soft_biases = np.array([r.soft_bias for r in self.reports])

    @property
    def n(self) -> int:
        return len(self.reports)

    @property
    def mean_loss(self) -> float:
        return float(self.losses.mean())

    @property
    def mean_bias(self) -> float:
        return float(self.biases.mean())

    @property
    def loss_devs(self) -> np.ndarray:
        return np.abs(self.losses - self.losses.mean())

    @property
    def bias_devs(self) -> np.ndarray:
        return np.abs(self.biases - self.biases.mean())

    @property
    def avg_acc(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std_acc(self) -> float:
        return float(self.accuracies.std())

    @property
    def avg_bias(self) -> float:
        return float(self.biases.mean())

    @property
    def std_bias(self) -> float:
        return float(self.biases.std())

    @property
    def max_bias(self) -> float:
        return float(self.biases.max())

    @property
    def max_loss_dev(self) -> float:
        return float(self.loss_devs.max())

    @property
    def max_bias_dev(self) -> float:
        return float(self.bias_devs.max())

    def subset(self, idx: Sequence[int]) -> "FederationReport":
        return FederationReport([self.reports[i] for i in idx])


def hard_bias(preds: PredictionBatch, ds: ClientDataset, metric: str = "TPSD",
              n_groups: int = 2) -> tuple[float, bool]:
    """TPSD or APSD from thresholded predictions.

    Groups without eligible samples are skipped; with fewer than two eligible
    groups the value is 0 and the degenerate flag is set.
    """
    masks = _group_masks(ds, n_groups, metric)
    if len(masks) < 2:
        return 0.0, True
    if metric == "TPSD":
        hit = preds.labels == 1
    else:
        hit = preds.labels == ds.y
    rates = np.array([hit[m].mean() for m in masks])
    return std_of_rates(rates), False


def client_report(params: ModelParams, ds: ClientDataset, metric: str = "TPSD") -> ClientReport:
    preds = predict(params, ds)
    bias, degenerate = hard_bias(preds, ds, metric, params.n_groups)
    return ClientReport(
        loss=bce_from_probs(preds.probabilities, ds.y),
        accuracy=float(np.mean(preds.labels == ds.y)),
        bias=bias,
        soft_bias=soft_bias(params, ds, metric),
        degenerate=degenerate,
    )


def evaluate(params: ModelParams, federation: FederationData, metric: str = "TPSD",
             split: str = "test") -> FederationReport:
    parts = federation.test_clients if split == "test" else federation.clients
    return FederationReport([client_report(params, ds, metric) for ds in parts])


def _status(value: float, budget: float) -> str:
    if value <= budget:
        return SATISFIED
    if value <= 1.1 * budget:
        return NEAR
    return VIOLATED


def budget_check(report: FederationReport, budgets: Budgets) -> dict[str, str]:
    """Per-constraint status using the 10% "near" band."""
    return {
        "bias": _status(report.max_bias, budgets.eps_b),
        "loss_dev": _status(report.max_loss_dev, budgets.eps_vl),
        "bias_dev": _status(report.max_bias_dev, budgets.eps_vb),
    }


def table_check(avg_acc_std: float, avg_bias: float, std_bias: float,
                budgets: Budgets) -> dict[str, str]:
    """The table-style checks: Std. acc vs eps_vl, Avg. bias vs eps_b, Std. bias vs eps_vb."""
    return {
        "std_acc": _status(avg_acc_std, budgets.eps_vl),
        "avg_bias": _status(avg_bias, budgets.eps_b),
        "std_bias": _status(std_bias, budgets.eps_vb),
    }


def ablation_checks(std_acc: float, avg_bias: float, std_bias: float, max_bias: float,
                    budgets: Budgets) -> dict[str, str]:
    """Table checks plus the per-client bias cap, applied to the worst client."""
    out = table_check(std_acc, avg_bias, std_bias, budgets)
    out["max_bias"] = _status(max_bias, budgets.eps_b)
    return out
