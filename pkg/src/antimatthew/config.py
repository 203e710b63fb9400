"""Flat ``section.key=value`` experiment configuration.

Files hold one assignment per line; ``#`` starts a comment. Every key has a
default, command-line overrides are applied on top, and ``dump`` writes the
fully resolved configuration back out so a run directory can be replayed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

from .attacks import ATTACK_KINDS
from .metrics import Budgets
from .trainer import StagePlan

METHODS = ("anti-matthew", "fedavg", "qffl", "fairreg")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_str(text: str) -> Optional[str]:
    return text.strip() or None


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    # dataset
    dataset_kind: str = "synthetic"
    dataset_n: int = 10000
    dataset_seed: int = 0
    dataset_clients: int = 2
    dataset_test_frac: float = 0.2
    dataset_path: Optional[str] = None
    dataset_features: tuple[str, ...] = ()
    dataset_protected: str = "a"
    dataset_label: str = "y"
    dataset_client: str = "client_id"
    dataset_test_column: Optional[str] = None
    dataset_min_samples: int = 0
    dataset_standardize: bool = False
    # model
    model_hidden: int = 0
    model_use_protected: bool = False
    # method
    method: str = "anti-matthew"
    metric: str = "tpsd"
    seed: int = 0
    q: float = 1.0
    lam: float = 1.0
    size_weighting: bool = True
    # budgets
    eps_b: Optional[float] = None
    eps_vl: Optional[float] = None
    eps_vb: Optional[float] = None
    # stage plan
    rounds: tuple[int, ...] = (750, 750, 500)
    eta: float = 0.05
    shrink: float = 0.5
    max_halvings: int = 20
    normalize: bool = False
    centering: float = 0.5
    log_every: int = 1
    stages: tuple[int, ...] = (1, 2, 3)
    # attack
    attack_kind: Optional[str] = None
    attack_malicious: tuple[int, ...] = ()
    attack_count: int = 0
    attack_seed: int = 0
    attack_factor: float = 10.0
    # output
    out: Optional[str] = None
    repeat: int = 1
    figures: bool = True
    dump_lp: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.dataset_kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind must be synthetic or csv, got {self.dataset_kind!r}")
        if self.dataset_kind == "synthetic" and self.dataset_n < 100:
            raise ConfigError("dataset.n must be at least 100")
        if self.dataset_kind == "synthetic" and self.dataset_clients < 1:
            raise ConfigError("dataset.clients must be at least 1")
        if self.dataset_kind == "csv" and (not self.dataset_path or not self.dataset_features):
            raise ConfigError("csv datasets need dataset.path and dataset.features")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}; got {self.method!r}")
        if self.metric.lower() not in ("tpsd", "apsd"):
            raise ConfigError(f"metric must be tpsd or apsd, got {self.metric!r}")
        if self.method == "anti-matthew" and self.budgets() is None:
            raise ConfigError("anti-matthew needs budgets.eps_b, budgets.eps_vl and budgets.eps_vb")
        if self.repeat < 1:
            raise ConfigError("run.repeat must be at least 1")
        if self.model_hidden < 0:
            raise ConfigError("model.hidden must be nonnegative")
        if not self.stages or any(s not in (1, 2, 3) for s in self.stages):
            raise ConfigError(f"plan.stages must be a subset of 1,2,3; got {self.stages}")
        if self.attack_kind is not None and self.attack_kind not in ATTACK_KINDS:
            raise ConfigError(f"attack.kind must be one of {ATTACK_KINDS}")
        if self.q < 0 or self.lam < 0:
            raise ConfigError("baseline.q and baseline.lam must be nonnegative")
        for name in ("eps_b", "eps_vl", "eps_vb"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"budgets.{name} must be nonnegative")
        try:
            self.plan()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def metric_name(self) -> str:
        return self.metric.upper()

    def budgets(self) -> Optional[Budgets]:
        if None in (self.eps_b, self.eps_vl, self.eps_vb):
            return None
        return Budgets(self.eps_b, self.eps_vl, self.eps_vb)

    def plan(self) -> StagePlan:
        return StagePlan(rounds=tuple(self.rounds), eta=self.eta, shrink=self.shrink,
                         max_halvings=self.max_halvings, normalize_gradients=self.normalize,
                         log_every=self.log_every, centering=self.centering)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# file key -> (field, parser)
_KEYS: dict[str, tuple[str, Any]] = {
    "dataset.kind": ("dataset_kind", str),
    "dataset.n": ("dataset_n", int),
    "dataset.seed": ("dataset_seed", int),
    "dataset.clients": ("dataset_clients", int),
    "dataset.test_frac": ("dataset_test_frac", float),
    "dataset.path": ("dataset_path", _opt_str),
    "dataset.features": ("dataset_features", _str_list),
    "dataset.protected": ("dataset_protected", str),
    "dataset.label": ("dataset_label", str),
    "dataset.client": ("dataset_client", str),
    "dataset.test_column": ("dataset_test_column", _opt_str),
    "dataset.min_samples": ("dataset_min_samples", int),
    "dataset.standardize": ("dataset_standardize", _bool),
    "model.hidden": ("model_hidden", int),
    "model.use_protected": ("model_use_protected", _bool),
    "train.method": ("method", str),
    "train.metric": ("metric", str),
    "train.seed": ("seed", int),
    "baseline.q": ("q", float),
    "baseline.lam": ("lam", float),
    "baseline.size_weighting": ("size_weighting", _bool),
    "budgets.eps_b": ("eps_b", _opt_float),
    "budgets.eps_vl": ("eps_vl", _opt_float),
    "budgets.eps_vb": ("eps_vb", _opt_float),
    "plan.rounds": ("rounds", _int_list),
    "plan.eta": ("eta", float),
    "plan.shrink": ("shrink", float),
    "plan.max_halvings": ("max_halvings", int),
    "plan.normalize": ("normalize", _bool),
    "plan.centering": ("centering", float),
    "plan.log_every": ("log_every", int),
    "plan.stages": ("stages", _int_list),
    "attack.kind": ("attack_kind", _opt_str),
    "attack.malicious": ("attack_malicious", _int_list),
    "attack.count": ("attack_count", int),
    "attack.seed": ("attack_seed", int),
    "attack.factor": ("attack_factor", float),
    "output.dir": ("out", _opt_str),
    "run.repeat": ("repeat", int),
    "output.figures": ("figures", _bool),
    "debug.dump_lp": ("dump_lp", _bool),
}
_FIELD_TO_KEY = {f: k for k, (f, _) in _KEYS.items()}


def apply(cfg: ExperimentConfig, pairs: Iterable[tuple[str, str]], source: str = "") -> ExperimentConfig:
    """Return ``cfg`` with ``(key, text)`` assignments parsed and applied."""
    changes = {}
    for key, text in pairs:
        if key not in _KEYS:
            raise ConfigError(f"{source}unknown key {key!r}")
        fname, parse = _KEYS[key]
        try:
            changes[fname] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"{source}{key}: {exc}") from None
    return cfg.replace(**changes)


def parse_text(text: str, source: str = "<text>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return apply(base or ExperimentConfig(), parse_text(text, str(p)), f"{p}: ")


def dump(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"{_FIELD_TO_KEY[f.name]}={_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def keys() -> list[str]:
    return list(_KEYS)
