"""Numerical certification of the update-decomposition claims and
replica-level statistics.

The central check: when every sampled client takes the same number K of
plain SGD steps and updates are averaged uniformly, the round's mean
parameter delta is, term for term, the single-step baseline update plus the
K-1 adapted-gradient updates built from the same recorded trajectories.
Because every term comes from the same trajectory record, the identity
holds to floating-point roundoff, not just in expectation.

Convention: recorded step gradients are raw loss gradients; the client step
size enters once, with a minus sign, when an update vector is built from
them. All update-space quantities here follow that convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .federation import RoundTrace, TrainingRun, fomaml_update
from .model import Batch, ModelSpec, gradient, maml_gradient_oracle, sgd_trajectory

METRICS = ("initial", "personalized")


@dataclass
class DecompositionReport:
    g_fedavg: np.ndarray
    g_fedsgd: np.ndarray
    g_fomaml_by_j: list[np.ndarray]
    residual_norm: float


def decompose_round(trace: RoundTrace, beta: float) -> DecompositionReport:
    """Split a traced uniform round update into its per-step components.

    Requires the trace to carry raw step gradients, every client to have
    taken the same number of steps, and uniform weights; with
    data-proportional weights the rearrangement does not telescope and the
    round is rejected rather than approximated.
    """
    if not trace.results:
        raise ContractViolation("trace has no client results")
    for res in trace.results:
        if res.step_gradients is None:
            raise ContractViolation(
                "round was not traced with step gradients; rerun with tracing enabled"
            )
    lengths = {len(res.step_gradients) for res in trace.results}
    if len(lengths) != 1:
        raise ContractViolation(
            f"clients took different step counts {sorted(lengths)}; "
            "the decomposition requires a common K"
        )
    weights = {res.weight for res in trace.results}
    if len(weights) != 1:
        raise ContractViolation(
            "decomposition requires uniform client weights"
        )
    k = lengths.pop()
    grad_lists = [res.step_gradients for res in trace.results]

    g_fedavg = np.asarray(trace.aggregate, dtype=np.float64)
    g_fedsgd = fomaml_update(grad_lists, 0, beta)
    terms = [fomaml_update(grad_lists, j, beta) for j in range(1, k)]

    reconstruction = g_fedsgd.copy()
    for term in terms:
        reconstruction += term
    residual = float(np.linalg.norm(g_fedavg - reconstruction))
    return DecompositionReport(
        g_fedavg=g_fedavg,
        g_fedsgd=g_fedsgd,
        g_fomaml_by_j=terms,
        residual_norm=residual,
    )


def decomposition_text(report: DecompositionReport) -> str:
    lines = [
        "fms-decomposition/1",
        f"norm_fedavg={np.linalg.norm(report.g_fedavg):.12e}",
        f"norm_fedsgd={np.linalg.norm(report.g_fedsgd):.12e}",
    ]
    for j, term in enumerate(report.g_fomaml_by_j, start=1):
        lines.append(f"norm_fomaml_{j}={np.linalg.norm(term):.12e}")
    lines.append(f"residual_norm={report.residual_norm:.12e}")
    return "\n".join(lines) + "\n"


def fomaml_maml_gap(
    spec: ModelSpec,
    params: np.ndarray,
    batches: list[Batch],
    eval_batch: Batch | None,
    steps: int,
    beta: float,
    fd_step: float = 1e-5,
) -> tuple[float, float]:
    """Distance and cosine between the exact meta-gradient and its
    first-order surrogate for a single client.

    The exact meta-gradient differentiates through the K adaptation steps
    (finite differences); the surrogate is the raw gradient at the adapted
    parameters. Both shrink together as beta -> 0, and their gap is
    proportional to beta to first order.
    """
    if steps < 0:
        raise ContractViolation("steps must be non-negative")
    if len(batches) < steps:
        raise ContractViolation(f"need {steps} adaptation batches, got {len(batches)}")
    adapt = batches[:steps]
    if eval_batch is None:
        if not adapt:
            raise ContractViolation("eval_batch required when steps is 0")
        xs = np.concatenate([b.x for b in adapt])
        ys = np.concatenate([b.y for b in adapt])
        ts = (
            np.concatenate([b.targets for b in adapt])
            if all(b.targets is not None for b in adapt)
            else None
        )
        eval_batch = Batch(xs, ys, ts)

    g_maml = maml_gradient_oracle(spec, params, adapt, beta, eval_batch, fd_step)
    theta = sgd_trajectory(spec, params, adapt, beta)[0] if steps else np.asarray(params, dtype=np.float64)
    g_first_order = gradient(spec, theta, eval_batch)

    gap = float(np.linalg.norm(g_maml - g_first_order))
    n1 = np.linalg.norm(g_maml)
    n2 = np.linalg.norm(g_first_order)
    cosine = 1.0 if n1 == 0.0 or n2 == 0.0 else float(g_maml @ g_first_order / (n1 * n2))
    return gap, cosine


def rounds_to_threshold(run: TrainingRun, metric: str, threshold: float) -> int | None:
    """First evaluated round whose metric reaches the threshold, else None."""
    if metric not in METRICS:
        raise ContractViolation(f"unknown metric {metric!r}")
    snapshots = run.snapshots
    if not snapshots:
        raise ContractViolation("run has no evaluation snapshots")
    for snap in snapshots:
        value = snap.initial_mean if metric == "initial" else snap.personalized_mean
        if value >= threshold:
            return snap.round_index
    return None


@dataclass
class ThresholdStats:
    threshold: float
    per_replica: list[int | None]
    mean_rounds: float | None
    reached_count: int

    def format(self) -> str:
        if self.reached_count == 0:
            return "never"
        return f"{self.mean_rounds:.1f}({self.reached_count})"


def threshold_stats(runs: list[TrainingRun], metric: str, threshold: float) -> ThresholdStats:
    """Mean rounds-to-threshold over the replicas that reached it."""
    per_replica = [rounds_to_threshold(run, metric, threshold) for run in runs]
    reached = [r for r in per_replica if r is not None]
    mean_rounds = float(np.mean(reached)) if reached else None
    return ThresholdStats(
        threshold=threshold,
        per_replica=per_replica,
        mean_rounds=mean_rounds,
        reached_count=len(reached),
    )


@dataclass
class ReplicaStats:
    metric: str
    values: list[float]
    mean: float
    std: float
    count: int

    def format(self) -> str:
        return format_mean_std(self.mean, self.std)


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f} ({std:.4f})"


def _snapshot_value(snap, metric: str) -> float:
    return snap.initial_mean if metric == "initial" else snap.personalized_mean


def _check_schedules(runs: list[TrainingRun]) -> None:
    if not runs:
        raise ContractViolation("need at least one run")
    schedules = [[s.round_index for s in run.snapshots] for run in runs]
    if any(not s for s in schedules):
        raise ContractViolation("every run needs evaluation snapshots")
    if any(s != schedules[0] for s in schedules[1:]):
        raise ContractViolation("runs have inconsistent snapshot schedules")


def aggregate_replicas(runs: list[TrainingRun], metric: str) -> ReplicaStats:
    """Final-snapshot mean and population standard deviation across replicas."""
    if metric not in METRICS:
        raise ContractViolation(f"unknown metric {metric!r}")
    _check_schedules(runs)
    values = [float(_snapshot_value(run.snapshots[-1], metric)) for run in runs]
    # Sort before reducing so the stats are exactly permutation-invariant.
    arr = np.sort(np.array(values))
    return ReplicaStats(
        metric=metric,
        values=values,
        mean=float(arr.mean()),
        std=float(arr.std()),
        count=len(values),
    )


def per_snapshot_stats(runs: list[TrainingRun], metric: str) -> list[tuple[int, float, float]]:
    """(round, mean, population std) across replicas at every snapshot."""
    if metric not in METRICS:
        raise ContractViolation(f"unknown metric {metric!r}")
    _check_schedules(runs)
    out = []
    for i, snap in enumerate(runs[0].snapshots):
        vals = np.sort([_snapshot_value(run.snapshots[i], metric) for run in runs])
        out.append((snap.round_index, float(vals.mean()), float(vals.std())))
    return out
