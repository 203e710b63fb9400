"""Command-line experiment harness.

Subcommands: generate, train, evaluate, budget-from-fedavg, sweep, ablation,
attack. Exit status is 0 on success, 2 for configuration errors and 3 for
failures while running. ``ANTIMATTHEW_OUT`` sets the default output root.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .attacks import AttackSpec, pick_malicious
from .baselines import fairreg_train, fedavg_train, qffl_train
from .config import ConfigError, ExperimentConfig
from .data import DataError, FederationData, filter_min_size, generate_synthetic, load_csv, \
    write_federation_csv
from .metrics import FederationReport, ablation_checks, budget_check, evaluate
from .model import ModelError, load_checkpoint, save_checkpoint
from .trainer import RoundLog, train

log = logging.getLogger("antimatthew")

OUT_ENV = "ANTIMATTHEW_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SUMMARY_KEYS = ("avg_loss", "avg_acc", "std_acc", "avg_bias", "std_bias", "max_bias",
                "max_loss_dev", "max_bias_dev")
ROUND_COLUMNS = ("round", "stage", *SUMMARY_KEYS, "eta", "branch", "active", "marker")


# ---------------------------------------------------------------------------
# building blocks shared by the subcommands


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_out(cfg: ExperimentConfig, default_name: str) -> Path:
    return Path(cfg.out) if cfg.out else output_root() / default_name


def repeat_config(cfg: ExperimentConfig, r: int) -> ExperimentConfig:
    """Repeat ``r`` shifts both the data seed and the training seed by ``r``."""
    return cfg.replace(dataset_seed=cfg.dataset_seed + r, seed=cfg.seed + r, repeat=1)


def build_federation(cfg: ExperimentConfig) -> FederationData:
    if cfg.dataset_kind == "synthetic":
        fed = generate_synthetic(cfg.dataset_n, cfg.dataset_seed, cfg.dataset_clients,
                                 cfg.dataset_test_frac)
    else:
        fed = load_csv(cfg.dataset_path, cfg.dataset_features, cfg.dataset_protected,
                       cfg.dataset_label, cfg.dataset_client, test_column=cfg.dataset_test_column,
                       test_frac=cfg.dataset_test_frac, seed=cfg.dataset_seed,
                       standardize=cfg.dataset_standardize)
    if cfg.dataset_min_samples > 0:
        fed = filter_min_size(fed, cfg.dataset_min_samples)
    return fed


def attack_spec(cfg: ExperimentConfig, n_clients: int) -> Optional[AttackSpec]:
    if cfg.attack_kind is None:
        return None
    if cfg.attack_malicious:
        ids = frozenset(cfg.attack_malicious)
        if any(i < 0 or i >= n_clients for i in ids):
            raise ConfigError(f"attack.malicious {sorted(ids)} out of range for {n_clients} clients")
        if len(ids) >= n_clients:
            raise ConfigError("every client is malicious")
    elif cfg.attack_count > 0:
        try:
            ids = pick_malicious(n_clients, cfg.attack_count, cfg.attack_seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        ids = frozenset()
    return AttackSpec(cfg.attack_kind, ids, cfg.attack_seed, cfg.attack_factor)


def run_method(cfg: ExperimentConfig, fed: FederationData, attack: Optional[AttackSpec] = None,
               lp_dump=None):
    plan = cfg.plan()
    common = dict(seed=cfg.seed, metric=cfg.metric_name, hidden=cfg.model_hidden, attack=attack,
                  use_protected=cfg.model_use_protected)
    if cfg.method == "anti-matthew":
        return train(fed, cfg.budgets(), plan, stages=cfg.stages, lp_dump=lp_dump, **common)
    if cfg.method == "fedavg":
        return fedavg_train(fed, plan, **common)
    if cfg.method == "qffl":
        return qffl_train(fed, plan, q=cfg.q, size_weighting=cfg.size_weighting, **common)
    return fairreg_train(fed, plan, lam=cfg.lam, **common)


def summarize(report: FederationReport) -> dict[str, float]:
    return {
        "avg_loss": report.mean_loss,
        "avg_acc": report.avg_acc,
        "std_acc": report.std_acc,
        "avg_bias": report.avg_bias,
        "std_bias": report.std_bias,
        "max_bias": report.max_bias,
        "max_loss_dev": report.max_loss_dev,
        "max_bias_dev": report.max_bias_dev,
    }


def round_rows(logs: Sequence[RoundLog], n_clients: int, log_every: int = 1) -> list[dict]:
    """One row per evaluated round: every ``log_every`` rounds, plus the last."""
    rows = []
    for i, lg in enumerate(logs):
        rep = lg.report
        if rep is None or not (lg.round % log_every == 0 or lg.terminal or i == len(logs) - 1):
            continue
        row = {"round": lg.round, "stage": lg.stage, **summarize(rep), "eta": lg.eta,
               "branch": lg.branch, "active": ";".join(lg.active),
               "marker": "terminal" if lg.terminal else ""}
        for k in range(n_clients):
            row[f"loss_{k}"] = float(rep.losses[k])
            row[f"acc_{k}"] = float(rep.accuracies[k])
            row[f"bias_{k}"] = float(rep.biases[k])
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> Path:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def read_key_values(path: Path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row[0]: row[1] for row in list(csv.reader(fh))[1:] if row}


@dataclass
class RunResult:
    directory: Path
    final: FederationReport
    summary: dict[str, float]
    logs: list[RoundLog]


def final_rows(report: FederationReport, cfg: ExperimentConfig, rounds_run: int) -> list[dict]:
    rows = [{"key": k, "value": v} for k, v in summarize(report).items()]
    rows.append({"key": "rounds", "value": rounds_run})
    for k in range(report.n):
        rows += [{"key": f"loss_{k}", "value": float(report.losses[k])},
                 {"key": f"acc_{k}", "value": float(report.accuracies[k])},
                 {"key": f"bias_{k}", "value": float(report.biases[k])}]
    budgets = cfg.budgets()
    if budgets is not None:
        for name, status in budget_check(report, budgets).items():
            rows.append({"key": f"status_{name}", "value": status})
    return rows


def execute_run(cfg: ExperimentConfig, run_dir: Path, attack: Optional[AttackSpec] = None) -> RunResult:
    """Train once and write the run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfgmod.dump(cfg), encoding="utf-8")
    fed = build_federation(cfg)
    if attack is None:
        attack = attack_spec(cfg, fed.n_clients)
    if cfg.dump_lp and cfg.method == "anti-matthew":
        with open(run_dir / "lp_dump.txt", "w", encoding="utf-8") as fh:
            params, logs = run_method(cfg, fed, attack, lp_dump=fh)
    else:
        params, logs = run_method(cfg, fed, attack)
    rows = round_rows(logs, fed.n_clients, cfg.log_every)
    cols = list(ROUND_COLUMNS) + [f"{m}_{k}" for k in range(fed.n_clients)
                                  for m in ("loss", "acc", "bias")]
    write_csv(run_dir / "rounds.csv", rows, cols)
    final = evaluate(params, fed, cfg.metric_name)
    write_csv(run_dir / "final_report.csv", final_rows(final, cfg, len(logs)), ["key", "value"])
    save_checkpoint(params, run_dir / "model.ckpt")
    # stage-boundary checkpoints
    template = params
    for a, b in zip(logs, logs[1:]):
        if a.stage != b.stage:
            save_checkpoint(template.with_flat(a.theta), run_dir / f"model_stage{a.stage}.ckpt")
    if cfg.figures and rows:
        from .plotting import training_figures
        training_figures(run_dir, rows, cfg.budgets())
    return RunResult(run_dir, final, summarize(final), logs)


def aggregate(summaries: Sequence[dict[str, float]]) -> list[dict]:
    out = []
    for k in SUMMARY_KEYS:
        vals = np.array([s[k] for s in summaries])
        out.append({"metric": k, "mean": float(vals.mean()), "std": float(vals.std()),
                    "n": len(vals)})
    return out


def execute_repeats(cfg: ExperimentConfig, out_dir: Path) -> tuple[list[RunResult], dict[str, float]]:
    """``cfg.repeat`` runs; with more than one, each gets ``run_XXX`` plus ``summary.csv``."""
    if cfg.repeat == 1:
        res = execute_run(cfg, out_dir)
        return [res], res.summary
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfgmod.dump(cfg), encoding="utf-8")
    results = []
    for r in range(cfg.repeat):
        log.info("repeat %d/%d", r + 1, cfg.repeat)
        results.append(execute_run(repeat_config(cfg, r), out_dir / f"run_{r:03d}"))
    table = aggregate([res.summary for res in results])
    write_csv(out_dir / "summary.csv", table, ["metric", "mean", "std", "n"])
    return results, {row["metric"]: row["mean"] for row in table}


# ---------------------------------------------------------------------------
# budgets from a FedAvg run


def one_sig_fig(x: float) -> float:
    """Round to one significant figure (0.124 -> 0.1, 0.01415 -> 0.01)."""
    if x == 0 or not math.isfinite(x):
        return 0.0
    return float(f"{x:.1g}")


def budgets_from_report(avg_bias: float, std_acc: float, std_bias: float) -> tuple[float, float, float]:
    return one_sig_fig(0.5 * avg_bias), one_sig_fig(0.5 * std_acc), one_sig_fig(0.5 * std_bias)


def load_run_summary(run_dir: Path) -> dict[str, float]:
    summary, final = run_dir / "summary.csv", run_dir / "final_report.csv"
    if summary.exists():
        with open(summary, newline="", encoding="utf-8") as fh:
            return {row["metric"]: float(row["mean"]) for row in csv.DictReader(fh)}
    if final.exists():
        kv = read_key_values(final)
        return {k: float(kv[k]) for k in SUMMARY_KEYS if k in kv}
    raise ConfigError(f"{run_dir}: no final_report.csv or summary.csv (not a completed run)")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: ExperimentConfig) -> Path:
    out = resolve_out(cfg, "data")
    try:
        out.mkdir(parents=True, exist_ok=True)
        fed = build_federation(cfg)
        write_federation_csv(fed, out / "train.csv", out / "test.csv")
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc.strerror}") from None
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")
    return out


def cmd_train(cfg: ExperimentConfig) -> Path:
    out = resolve_out(cfg, f"train_{cfg.method}_{cfg.metric}_s{cfg.seed}")
    results, summary = execute_repeats(cfg, out)
    print(f"run directory: {out}")
    for k in ("avg_acc", "std_acc", "avg_bias", "std_bias"):
        print(f"  {k} = {summary[k]:.4f}")
    return out


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str, split: str = "test") -> dict[str, float]:
    try:
        params = load_checkpoint(checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    fed = build_federation(cfg)
    rep = evaluate(params, fed, cfg.metric_name, split)
    rows = final_rows(rep, cfg, 0)
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(cfg.out) / "evaluation.csv", rows, ["key", "value"])
    for r in rows:
        print(f"{r['key']},{_fmt(r['value'])}")
    return summarize(rep)


def cmd_budget_from_fedavg(run_dir: str, write: Optional[str] = None) -> tuple[float, float, float]:
    path = Path(run_dir)
    if not path.is_dir():
        raise ConfigError(f"missing run directory {path}")
    s = load_run_summary(path)
    eps = budgets_from_report(s["avg_bias"], s["std_acc"], s["std_bias"])
    if eps == (0.0, 0.0, 0.0):
        log.warning("FedAvg run shows no bias or spread; all budgets are zero")
    text = "".join(f"budgets.{k}={v!r}\n" for k, v in zip(("eps_b", "eps_vl", "eps_vb"), eps))
    if write:
        Path(write).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return eps


SWEEP_PARAMETERS = ("eps_b", "eps_vl", "eps_vb")


def cmd_sweep(cfg: ExperimentConfig, parameter: str, values: Sequence[float]) -> list[dict]:
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMETERS}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = resolve_out(cfg, f"sweep_{parameter}_s{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        point = cfg.replace(**{parameter: float(v)}, out=None).validate()
        _, s = execute_repeats(point.replace(figures=False), out / f"{parameter}={v}")
        rows.append({"value": float(v), "avg_acc": s["avg_acc"], "std_acc": s["std_acc"],
                     "avg_bias": s["avg_bias"], "std_bias": s["std_bias"]})
    write_csv(out / "sweep.csv", rows)
    if cfg.figures:
        from .plotting import sweep_figure
        sweep_figure(out / "sweep.svg", parameter, [r["value"] for r in rows],
                     {k: [r[k] for r in rows] for k in ("avg_bias", "std_acc", "std_bias")})
    for r in rows:
        print(" ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
    return rows


ABLATION_VARIANTS = (("stage1", (1,)), ("stage2", (2,)), ("stage3", (3,)), ("full", (1, 2, 3)))


def cmd_ablation(cfg: ExperimentConfig) -> list[dict]:
    budgets = cfg.budgets()
    if budgets is None:
        raise ConfigError("ablation needs budgets")
    out = resolve_out(cfg, f"ablation_{cfg.metric}_s{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, stages in ABLATION_VARIANTS:
        variant = cfg.replace(method="anti-matthew", stages=stages, out=None, figures=False)
        _, s = execute_repeats(variant, out / name)
        checks = ablation_checks(s["std_acc"], s["avg_bias"], s["std_bias"], s["max_bias"], budgets)
        rows.append({"variant": name, "stages": "+".join(map(str, stages)),
                     "avg_acc": s["avg_acc"], "std_acc": s["std_acc"], "avg_bias": s["avg_bias"],
                     "std_bias": s["std_bias"], "max_bias": s["max_bias"],
                     **{f"check_{k}": v for k, v in checks.items()}})
    write_csv(out / "ablation.csv", rows)
    for r in rows:
        print(" ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
    return rows


ATTACK_METHODS = ("anti-matthew", "fedavg")


def cmd_attack(cfg: ExperimentConfig, methods: Sequence[str] = ATTACK_METHODS,
               kinds: Sequence[str] = ("none", "enlarge", "random", "zero")) -> list[dict]:
    fed = build_federation(cfg)
    base = cfg.replace(attack_kind=cfg.attack_kind or "zero")
    spec = attack_spec(base, fed.n_clients)
    if not spec.malicious_ids and cfg.attack_count == 0 and not cfg.attack_malicious:
        raise ConfigError("attack needs attack.count or attack.malicious")
    honest = [i for i in range(fed.n_clients) if i not in spec.malicious_ids]
    out = resolve_out(cfg, f"attack_s{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in methods:
        for kind in kinds:
            run_cfg = cfg.replace(method=method, attack_kind=None if kind == "none" else kind,
                                  out=None, figures=False).validate()
            atk = None if kind == "none" else AttackSpec(kind, spec.malicious_ids, cfg.attack_seed,
                                                        cfg.attack_factor)
            res = execute_run(run_cfg, out / f"{method}_{kind}", attack=atk)
            h = res.final.subset(honest)
            rows.append({"method": method, "attack": kind,
                         "malicious": ";".join(map(str, sorted(spec.malicious_ids))),
                         "avg_acc": res.final.avg_acc, "std_acc": res.final.std_acc,
                         "avg_bias": res.final.avg_bias, "std_bias": res.final.std_bias,
                         "honest_avg_acc": h.avg_acc, "honest_std_acc": h.std_acc,
                         "honest_avg_bias": h.avg_bias, "honest_std_bias": h.std_bias})
    write_csv(out / "attack.csv", rows)
    for r in rows:
        print(" ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
    return rows


# ---------------------------------------------------------------------------
# argument parsing

# shortcut flag -> config key
_FLAGS = {
    "method": "train.method", "metric": "train.metric", "seed": "train.seed",
    "n": "dataset.n", "data_seed": "dataset.seed", "clients": "dataset.clients",
    "eps_b": "budgets.eps_b", "eps_vl": "budgets.eps_vl", "eps_vb": "budgets.eps_vb",
    "rounds": "plan.rounds", "eta": "plan.eta", "stages": "plan.stages",
    "log_every": "plan.log_every", "hidden": "model.hidden", "repeat": "run.repeat",
    "out": "output.dir", "attack_kind": "attack.kind", "malicious": "attack.malicious",
    "attack_count": "attack.count", "q": "baseline.q", "lam": "baseline.lam",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    for flag in _FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)
    p.add_argument("--normalize", action="store_true", default=None,
                   help="normalise every client gradient to unit length")
    p.add_argument("--no-figures", action="store_true", help="skip SVG charts")
    p.add_argument("--dump-lp", action="store_true", help="write every direction LP to lp_dump.txt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="antimatthew", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("generate", "write the synthetic federation as CSV"),
                           ("train", "train one method, optionally repeated"),
                           ("ablation", "single-stage runs against the full pipeline")):
        _common(sub.add_parser(name, help=helptext))
    p = sub.add_parser("attack", help="robustness to malicious clients")
    _common(p)
    p.add_argument("--methods", default=",".join(ATTACK_METHODS),
                   help="comma-separated methods to compare")
    p.add_argument("--kinds", default="none,enlarge,random,zero",
                   help="comma-separated attacks; 'none' is the attack-free reference")
    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = sub.add_parser("budget-from-fedavg", help="derive budgets from a FedAvg run")
    p.add_argument("--run", required=True, help="FedAvg run directory")
    p.add_argument("--write", help="also write the budgets as a config fragment")
    p = sub.add_parser("sweep", help="sweep one budget")
    _common(p)
    p.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    pairs = [(key, str(getattr(args, flag))) for flag, key in _FLAGS.items()
             if getattr(args, flag, None) is not None]
    if getattr(args, "normalize", None):
        pairs.append(("plan.normalize", "true"))
    if getattr(args, "no_figures", False):
        pairs.append(("output.figures", "false"))
    if getattr(args, "dump_lp", False):
        pairs.append(("debug.dump_lp", "true"))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return cfgmod.apply(cfg, pairs, "command line: ")


def dispatch(args: argparse.Namespace):
    if args.command == "budget-from-fedavg":
        return cmd_budget_from_fedavg(args.run, args.write)
    cfg = config_from_args(args)
    if args.command == "generate":
        if cfg.dataset_kind != "synthetic":
            raise ConfigError("generate only writes the synthetic dataset")
        if cfg.dataset_n < 100:
            raise ConfigError("dataset.n must be at least 100")
        return cmd_generate(cfg)
    if args.command == "evaluate":
        return cmd_evaluate(cfg.replace(method="fedavg").validate(), args.checkpoint, args.split)
    if args.command == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"--values: {exc}") from None
        return cmd_sweep(cfg.validate(), args.parameter, values)
    cfg.validate()
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "ablation":
        return cmd_ablation(cfg)
    methods = [m for m in args.methods.split(",") if m]
    kinds = [k for k in args.kinds.split(",") if k]
    bad = [m for m in methods if m not in cfgmod.METHODS]
    bad += [k for k in kinds if k != "none" and k not in ("enlarge", "random", "zero")]
    if bad or not methods or not kinds:
        raise ConfigError(f"invalid --methods/--kinds entries: {bad or 'empty'}")
    return cmd_attack(cfg, methods, kinds)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
