"""Byzantine client behaviours: enlarged, random and zero gradients."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

ATTACK_KINDS = ("enlarge", "random", "zero")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    malicious_ids: frozenset[int] = field(default_factory=frozenset)
    seed: int = 0
    factor: float = 10.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.factor <= 0:
            raise ValueError("enlarge factor must be positive")
        object.__setattr__(self, "malicious_ids", frozenset(int(i) for i in self.malicious_ids))


def pick_malicious(n_clients: int, count: int, seed: int) -> frozenset[int]:
    if count >= n_clients:
        raise ValueError(f"{count} malicious clients leaves no honest client among {n_clients}")
    rng = np.random.default_rng(seed)
    return frozenset(int(i) for i in rng.choice(n_clients, size=count, replace=False))


def corrupt(bundle, spec: AttackSpec, round_index: int = 0):
    """Return a copy of ``bundle`` with malicious clients' gradients replaced.

    Random gradients are standard normal, drawn from ``(spec.seed, round_index)``
    so a run is reproducible while each round sees fresh noise.
    """
    n = bundle.loss_grads.shape[0]
    bad = sorted(spec.malicious_ids)
    if any(i < 0 or i >= n for i in bad):
        raise ValueError(f"malicious ids {bad} out of range for {n} clients")
    out = copy.copy(bundle)
    out.loss_grads = bundle.loss_grads.copy()
    out.bias_grads = bundle.bias_grads.copy()
    if not bad:
        return out.derive()
    if spec.kind == "enlarge":
        out.loss_grads[bad] *= spec.factor
        out.bias_grads[bad] *= spec.factor
    elif spec.kind == "zero":
        out.loss_grads[bad] = 0.0
        out.bias_grads[bad] = 0.0
    else:
        rng = np.random.default_rng([spec.seed, round_index])
        p = bundle.loss_grads.shape[1]
        out.loss_grads[bad] = rng.standard_normal((len(bad), p))
        out.bias_grads[bad] = rng.standard_normal((len(bad), p))
    return out.derive()


class RoundCorrupter:
    """Callable applying an attack with an incrementing round counter."""

    def __init__(self, spec: AttackSpec):
        self.spec = spec
        self.round = 0

    def __call__(self, bundle):
        self.round += 1
        return corrupt(bundle, self.spec, self.round)
