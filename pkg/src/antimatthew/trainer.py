"""Three-stage constrained multi-gradient descent over simulated FedSGD rounds.

Stage 1 drives the mean loss down while keeping the worst client's bias under
``eps_b``; stage 2 equalises client losses and biases without raising the
mean loss; stage 3 lowers the worst client's loss without hurting anyone else.
Every round the server picks a direction from a small LP over a hull of
client-derived gradients and then backtracks until no guarded quantity rises.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from .attacks import RoundCorrupter
from .data import FederationData
from .direction import DirectionResult, constrained_direction, min_norm_direction, normalize
from .metrics import Budgets, ClientReport, FederationReport, evaluate, hard_bias
from .model import (ModelParams, bce_from_probs, init_params, loss_gradient, predict,
                    soft_bias, soft_bias_gradient)

log = logging.getLogger(__name__)

# clients ship gradients at single precision
WIRE_DTYPE = np.float32
GUARD_TOL = 1e-9


@dataclass
class StagePlan:
    rounds: tuple[int, int, int] = (750, 750, 500)
    eta: float = 0.05
    shrink: float = 0.5
    max_halvings: int = 20
    normalize_gradients: bool = False
    log_every: int = 1
    centering: float = 0.5

    def __post_init__(self):
        self.rounds = tuple(int(r) for r in self.rounds)
        if len(self.rounds) != 3 or any(r < 0 for r in self.rounds) or sum(self.rounds) == 0:
            raise ValueError(f"invalid stage rounds {self.rounds}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def total_rounds(self) -> int:
        return sum(self.rounds)


@dataclass
class GradientBundle:
    """Per-client gradients for one round plus the derived hull vectors.

    ``derive`` must be called (again) after the per-client arrays change.
    """
    loss_grads: np.ndarray
    bias_grads: np.ndarray
    losses: np.ndarray
    soft_biases: np.ndarray
    hard_biases: np.ndarray
    mean_loss_grad: np.ndarray = field(init=False, repr=False)
    fmax_idx: int = field(init=False, default=0)
    lmax_idx: int = field(init=False, default=0)
    ldev_idx: int = field(init=False, default=0)
    ldev_sign: float = field(init=False, default=0.0)
    fdev_idx: int = field(init=False, default=0)
    fdev_sign: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.derive()

    @property
    def n(self) -> int:
        return self.loss_grads.shape[0]

    def derive(self) -> "GradientBundle":
        # np.argmax returns the first maximiser, i.e. the lowest client index
        self.mean_loss_grad = self.loss_grads.mean(axis=0)
        self.mean_bias_grad = self.bias_grads.mean(axis=0)
        self.fmax_idx = int(np.argmax(self.hard_biases))
        self.lmax_idx = int(np.argmax(self.losses))
        ldev = self.losses - self.losses.mean()
        self.ldev_idx = int(np.argmax(np.abs(ldev)))
        self.ldev_sign = float(np.sign(ldev[self.ldev_idx]))
        fdev = self.hard_biases - self.hard_biases.mean()
        self.fdev_idx = int(np.argmax(np.abs(fdev)))
        self.fdev_sign = float(np.sign(fdev[self.fdev_idx]))
        return self

    @property
    def fmax_grad(self) -> np.ndarray:
        return self.bias_grads[self.fmax_idx]

    @property
    def lmax_grad(self) -> np.ndarray:
        return self.loss_grads[self.lmax_idx]

    @property
    def ldev_grad(self) -> np.ndarray:
        return self.ldev_sign * (self.loss_grads[self.ldev_idx] - self.mean_loss_grad)

    @property
    def fdev_grad(self) -> np.ndarray:
        return self.fdev_sign * (self.bias_grads[self.fdev_idx] - self.mean_bias_grad)


# ---------------------------------------------------------------------------
# guarded scalar quantities, all evaluated on the training split


@dataclass(frozen=True)
class Quantity:
    """A smooth training-split quantity whose gradient appears in an LP."""
    kind: str                 # mean_loss | loss | soft_bias | loss_dev | bias_dev
    client: int = -1
    sign: float = 1.0

    @property
    def name(self) -> str:
        if self.kind == "mean_loss":
            return "mean_loss"
        if self.kind in ("loss_dev", "bias_dev"):
            return f"{self.kind}[{self.client}]{'+' if self.sign >= 0 else '-'}"
        return f"{self.kind}[{self.client}]"

    def value(self, losses: np.ndarray, sbias: np.ndarray) -> float:
        if self.kind == "mean_loss":
            return float(losses.mean())
        if self.kind == "loss":
            return float(losses[self.client])
        if self.kind == "soft_bias":
            return float(sbias[self.client])
        if self.kind == "loss_dev":
            return float(self.sign * (losses[self.client] - losses.mean()))
        if self.kind == "bias_dev":
            return float(self.sign * (sbias[self.client] - sbias.mean()))
        raise ValueError(self.kind)


def train_state(theta: np.ndarray, template: ModelParams, federation: FederationData,
                metric: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-client training losses and soft biases at ``theta``."""
    params = template.with_flat(theta)
    losses = np.array([bce_from_probs(predict(params, ds).probabilities, ds.y)
                       for ds in federation.clients])
    sb = np.array([soft_bias(params, ds, metric) for ds in federation.clients])
    return losses, sb


@dataclass
class Guard:
    quantity: Quantity
    cap: float
    label: str = "monotone"      # monotone | snapshot


@dataclass
class StepProblem:
    """One round's direction subproblem and the quantities it must protect."""
    branch: str
    objective: Quantity
    objective_grad: np.ndarray
    hull: list[np.ndarray]
    constraints: list[tuple[Quantity, np.ndarray]]

    @property
    def active(self) -> list[str]:
        return [q.name for q, _ in self.constraints]


@dataclass
class StageSnapshot:
    mean_loss_stage1: Optional[float] = None
    losses_stage2: Optional[np.ndarray] = None
    mean_loss_stage2: Optional[float] = None


@dataclass
class RoundLog:
    round: int
    stage: int
    branch: str
    active: list[str]
    eta: float
    accepted: bool
    train_report: Optional[FederationReport]
    report: Optional[FederationReport]
    theta: np.ndarray
    guards: list[tuple[str, float, float, float]] = field(default_factory=list)
    fallback: bool = False
    stationary: bool = False
    terminal: bool = False


# ---------------------------------------------------------------------------


def _train_report(params: ModelParams, federation: FederationData, metric: str):
    reps = []
    for ds in federation.clients:
        preds = predict(params, ds)
        b, degenerate = hard_bias(preds, ds, metric, params.n_groups)
        reps.append(ClientReport(bce_from_probs(preds.probabilities, ds.y),
                                 float(np.mean(preds.labels == ds.y)), b,
                                 soft_bias(params, ds, metric), degenerate))
    return FederationReport(reps)


def collect_round(params: ModelParams, federation: FederationData, metric: str = "TPSD",
                  normalize_gradients: bool = False,
                  corrupt: Optional[Callable[[GradientBundle], GradientBundle]] = None):
    """One FedSGD exchange: clients send gradients, the server assembles the bundle.

    Client gradients pass through ``WIRE_DTYPE``; ``corrupt`` (an attack) sees
    them before the server normalises and derives aggregate gradients.
    """
    report = _train_report(params, federation, metric)
    lg = np.array([loss_gradient(params, ds) for ds in federation.clients])
    bg = np.array([soft_bias_gradient(params, ds, metric) for ds in federation.clients])
    lg = lg.astype(WIRE_DTYPE).astype(float)
    bg = bg.astype(WIRE_DTYPE).astype(float)
    bundle = GradientBundle(lg, bg, report.losses.copy(), report.soft_biases.copy(),
                            report.biases.copy())
    if corrupt is not None:
        bundle = corrupt(bundle)
    if normalize_gradients:
        bundle.loss_grads = np.array([normalize(g)[0] for g in bundle.loss_grads])
        bundle.bias_grads = np.array([normalize(g)[0] for g in bundle.bias_grads])
    bundle.derive()
    return bundle, report


def _q_fmax(b: GradientBundle) -> Quantity:
    return Quantity("soft_bias", b.fmax_idx)


def _q_ldev(b: GradientBundle) -> Quantity:
    return Quantity("loss_dev", b.ldev_idx, b.ldev_sign)


def _q_fdev(b: GradientBundle) -> Quantity:
    return Quantity("bias_dev", b.fdev_idx, b.fdev_sign)


MEAN_LOSS = Quantity("mean_loss")


def stage1_problem(bundle: GradientBundle, report: FederationReport,
                   budgets: Budgets) -> StepProblem:
    hull = [bundle.mean_loss_grad, bundle.fmax_grad]
    if report.max_bias <= budgets.eps_b:
        return StepProblem("mean_loss", MEAN_LOSS, bundle.mean_loss_grad, hull, [])
    return StepProblem("worst_bias", _q_fmax(bundle), bundle.fmax_grad, hull,
                       [(MEAN_LOSS, bundle.mean_loss_grad)])


def stage2_problem(bundle: GradientBundle, report: FederationReport,
                   budgets: Budgets) -> StepProblem:
    bias_active = report.max_bias > budgets.eps_b
    if report.max_loss_dev <= budgets.eps_vl:
        hull = [bundle.fdev_grad, bundle.fmax_grad, bundle.mean_loss_grad]
        cons = [(MEAN_LOSS, bundle.mean_loss_grad)]
        if bias_active:
            cons.append((_q_fmax(bundle), bundle.fmax_grad))
        return StepProblem("bias_spread", _q_fdev(bundle), bundle.fdev_grad, hull, cons)
    hull = [bundle.ldev_grad, bundle.fdev_grad, bundle.fmax_grad, bundle.mean_loss_grad]
    cons = [(MEAN_LOSS, bundle.mean_loss_grad)]
    if report.max_bias_dev > budgets.eps_vb:
        cons.append((_q_fdev(bundle), bundle.fdev_grad))
    if bias_active:
        cons.append((_q_fmax(bundle), bundle.fmax_grad))
    return StepProblem("loss_spread", _q_ldev(bundle), bundle.ldev_grad, hull, cons)


def stage3_problem(bundle: GradientBundle, report: FederationReport,
                   budgets: Budgets) -> StepProblem:
    k = bundle.lmax_idx
    hull = [*bundle.loss_grads, bundle.mean_loss_grad, bundle.fmax_grad,
            bundle.ldev_grad, bundle.fdev_grad]
    cons = [(MEAN_LOSS, bundle.mean_loss_grad)]
    if report.max_bias > budgets.eps_b:
        cons.append((_q_fmax(bundle), bundle.fmax_grad))
    if report.max_loss_dev > budgets.eps_vl:
        cons.append((_q_ldev(bundle), bundle.ldev_grad))
    if report.max_bias_dev > budgets.eps_vb:
        cons.append((_q_fdev(bundle), bundle.fdev_grad))
    for i in range(bundle.n):
        if i != k:
            cons.append((Quantity("loss", i), bundle.loss_grads[i]))
    return StepProblem("worst_loss", Quantity("loss", k), bundle.lmax_grad, hull, cons)


def solve_problem(problem: StepProblem) -> DirectionResult:
    return constrained_direction(problem.objective_grad, [g for _, g in problem.constraints],
                                 problem.hull)


def stage1_direction(bundle, report, budgets) -> np.ndarray:
    return solve_problem(stage1_problem(bundle, report, budgets)).d


def stage2_direction(bundle, report, budgets, snapshot: StageSnapshot | None = None) -> np.ndarray:
    return solve_problem(stage2_problem(bundle, report, budgets)).d


def stage3_direction(bundle, report, budgets, snapshot: StageSnapshot | None = None) -> np.ndarray:
    return solve_problem(stage3_problem(bundle, report, budgets)).d


def line_search(theta: np.ndarray, d: np.ndarray,
                guarded: Sequence[tuple[Callable[[np.ndarray], float], float]],
                plan: StagePlan) -> tuple[float, np.ndarray]:
    """Backtrack from ``plan.eta`` until every guarded value is within its cap.

    ``guarded`` holds ``(evaluator, cap)`` pairs; evaluators map a parameter
    vector to a float. Returns ``(0.0, theta)`` when ``max_halvings`` is spent.
    """
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite direction")
    if not np.any(d):
        return plan.eta, theta.copy()
    eta = plan.eta
    for _ in range(plan.max_halvings + 1):
        trial = theta + eta * d
        if all(fn(trial) <= cap + GUARD_TOL for fn, cap in guarded):
            return eta, trial
        eta *= plan.shrink
    return 0.0, theta.copy()


def _guards_for(problem: StepProblem, state, stage: int,
                snapshot: StageSnapshot, n_clients: int) -> list[Guard]:
    losses, sb = state
    guards = [Guard(q, q.value(losses, sb)) for q, _ in problem.constraints]
    guards.append(Guard(problem.objective, problem.objective.value(losses, sb), "objective"))
    if stage == 2 and snapshot.mean_loss_stage1 is not None:
        guards.append(Guard(MEAN_LOSS, snapshot.mean_loss_stage1, "snapshot"))
    if stage == 3 and snapshot.losses_stage2 is not None:
        for i in range(n_clients):
            guards.append(Guard(Quantity("loss", i), float(snapshot.losses_stage2[i]), "snapshot"))
        guards.append(Guard(MEAN_LOSS, snapshot.mean_loss_stage2, "snapshot"))
    return guards


def _guarded_step(theta, d, guards: list[Guard], template, federation, metric, plan):
    """Line search over a shared per-trial evaluation of all guards."""
    cache: dict[bytes, tuple] = {}

    def state_at(t):
        key = t.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = train_state(t, template, federation, metric)
        return cache[key]

    pairs = [((lambda t, q=g.quantity: q.value(*state_at(t))), g.cap) for g in guards]
    return line_search(theta, d, pairs, plan)


def _dump_lp(out: TextIO, rnd: int, problem: StepProblem, sol: DirectionResult) -> None:
    vec = lambda v: " ".join(repr(float(x)) for x in v)  # noqa: E731
    out.write(f"round {rnd} branch {problem.branch} objective {problem.objective.name}\n")
    out.write(f"  g {vec(problem.objective_grad)}\n")
    for h in problem.hull:
        out.write(f"  h {vec(h)}\n")
    for q, c in problem.constraints:
        out.write(f"  c {q.name} {vec(c)}\n")
    out.write(f"  alpha {vec(sol.alpha)} value {sol.objective!r} infeasible {sol.infeasible}\n")


def train(federation: FederationData, budgets: Budgets, plan: StagePlan | None = None,
          metric: str = "TPSD", seed: int = 0, hidden: int = 0,
          stages: Sequence[int] = (1, 2, 3), attack=None,
          init: ModelParams | None = None,
          use_protected: bool = False,
          lp_dump: Optional[TextIO] = None) -> tuple[ModelParams, list[RoundLog]]:
    """Run anti-Matthew training; returns the final parameters and per-round logs.

    ``stages`` selects a subset for ablations: a single stage then runs for the
    whole ``plan.total_rounds`` budget. ``attack`` is an ``AttackSpec`` applied to
    every round's client gradients. ``lp_dump`` receives one text record per
    direction subproblem.
    """
    plan = plan or StagePlan()
    params = init if init is not None else init_params(
        federation.feature_dim, federation.M, hidden, seed, use_protected=use_protected)
    template = params.copy()
    theta = params.flat()
    corrupt = RoundCorrupter(attack) if attack is not None else None

    if tuple(stages) == (1, 2, 3):
        schedule = [(1, plan.rounds[0]), (2, plan.rounds[1]), (3, plan.rounds[2])]
    else:
        per = plan.total_rounds // len(stages)
        schedule = [(s, per) for s in stages]
        schedule[-1] = (schedule[-1][0], plan.total_rounds - per * (len(stages) - 1))

    builders = {1: stage1_problem, 2: stage2_problem, 3: stage3_problem}
    snapshot = StageSnapshot()
    logs: list[RoundLog] = []
    rnd = 0
    last_report = None
    for stage, n_rounds in schedule:
        if stage == 2 and snapshot.mean_loss_stage1 is None:
            snapshot.mean_loss_stage1 = float(train_state(theta, template, federation, metric)[0].mean())
        if stage == 3 and snapshot.losses_stage2 is None:
            losses, _ = train_state(theta, template, federation, metric)
            snapshot.losses_stage2 = losses
            snapshot.mean_loss_stage2 = float(losses.mean())
        for _ in range(n_rounds):
            cur = template.with_flat(theta)
            bundle, train_rep = collect_round(cur, federation, metric,
                                              plan.normalize_gradients, corrupt)
            problem = builders[stage](bundle, train_rep, budgets)
            sol = solve_problem(problem)
            if lp_dump is not None:
                _dump_lp(lp_dump, rnd + 1, problem, sol)
            d = sol.d
            if plan.centering > 0 and problem.constraints and not sol.infeasible:
                mn = min_norm_direction([problem.objective_grad,
                                         *(g for _, g in problem.constraints)])
                d = (1.0 - plan.centering) * d + plan.centering * mn.d
            stationary = sol.objective >= -1e-12 * max(
                1.0, float(np.linalg.norm(problem.objective_grad)) ** 2)
            if stationary:
                d = np.zeros_like(d)
            state = (train_rep.losses, train_rep.soft_biases)
            guards = _guards_for(problem, state, stage, snapshot, federation.n_clients)
            eta, new_theta = _guarded_step(theta, d, guards, template, federation, metric, plan)
            after = train_state(new_theta, template, federation, metric)
            guard_log = [(g.quantity.name + ("@" + g.label if g.label != "monotone" else ""),
                          g.quantity.value(*state), g.quantity.value(*after), g.cap)
                         for g in guards]
            theta = new_theta
            rnd += 1
            terminal = stationary and stage == 3
            if rnd % plan.log_every == 0 or terminal or rnd == plan.total_rounds:
                last_report = evaluate(template.with_flat(theta), federation, metric)
            logs.append(RoundLog(rnd, stage, problem.branch, problem.active, eta,
                                 eta > 0 and bool(np.any(d)), train_rep, last_report,
                                 theta.copy(), guard_log, sol.infeasible, stationary, terminal))
            if terminal:
                log.info("stage 3 Pareto-stationary at round %d", rnd)
                break
    return template.with_flat(theta), logs
