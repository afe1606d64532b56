"""The round engine.

One communication round samples clients, runs a local update per client,
aggregates the weighted parameter deltas in ascending client-id order, and
applies the server optimizer. Four local update rules are supported:

- fedavg: E epochs (or exactly K steps) of local SGD, delta = theta_i - theta.
- reptile: exactly K local SGD steps, uniform weighting.
- fedsgd: the single-step special case of reptile.
- fomaml: K adaptation steps, then the update is -beta times the gradient
  evaluated at the adapted parameters on the next held-out batch.

Raw per-step gradients can be recorded (``trace=True``) so that an averaged
round update can later be decomposed exactly into its single-step and
adapted-gradient components.

Randomness is drawn from counter-based substreams keyed by (purpose, round,
client), so per-client work is order-independent and a run is a pure
function of (config, seed, dataset).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset, FederatedDataset
from .errors import ContractViolation, DivergenceError
from .model import Batch, ModelSpec, gradient, init_params, sgd_trajectory
from .optimizers import (
    ClientOptimizerConfig,
    ServerOptimizerState,
    make_client_batches,
    server_apply,
)
from .rng import StreamFactory

ALGORITHMS = ("fedavg", "reptile", "fedsgd", "fomaml")
WEIGHTINGS = ("data_proportional", "uniform")


@dataclass(frozen=True)
class RoundConfig:
    """Per-round behaviour: algorithm, client sampling, local optimization.

    Exactly one of ``epochs``/``steps`` selects the local mode; fedavg
    accepts either, reptile and fomaml are step-counted by definition, and
    fedsgd is pinned to a single step. Non-fedavg algorithms average client
    updates uniformly regardless of local data volume.
    """

    algorithm: str
    clients_per_round: int
    client_cfg: ClientOptimizerConfig
    epochs: int | None = None
    steps: int | None = None
    weighting: str | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractViolation(f"unknown algorithm {self.algorithm!r}")
        if self.clients_per_round < 1:
            raise ContractViolation("clients_per_round must be positive")
        if self.algorithm == "fedsgd":
            if self.epochs is not None or self.steps not in (None, 1):
                raise ContractViolation("fedsgd implies exactly one local step")
            object.__setattr__(self, "steps", 1)
        elif self.algorithm in ("reptile", "fomaml"):
            if self.steps is None or self.epochs is not None:
                raise ContractViolation(f"{self.algorithm} requires steps, not epochs")
        else:
            if (self.epochs is None) == (self.steps is None):
                raise ContractViolation("fedavg requires exactly one of epochs/steps")
        if self.steps is not None and self.steps < 1:
            raise ContractViolation("steps must be positive")
        if self.epochs is not None and self.epochs < 1:
            raise ContractViolation("epochs must be positive")
        if self.weighting is None:
            default = "data_proportional" if self.algorithm == "fedavg" else "uniform"
            object.__setattr__(self, "weighting", default)
        if self.weighting not in WEIGHTINGS:
            raise ContractViolation(f"unknown weighting {self.weighting!r}")
        if self.algorithm != "fedavg" and self.weighting != "uniform":
            raise ContractViolation(f"{self.algorithm} averages uniformly")


@dataclass
class ClientUpdateResult:
    client_id: int
    delta: np.ndarray
    weight: float
    step_gradients: list[np.ndarray] | None = None


@dataclass
class EvalSnapshot:
    round_index: int
    initial_mean: float
    initial_std: float
    personalized_mean: float
    personalized_std: float


@dataclass
class RoundTrace:
    round_index: int
    client_ids: list[int]
    results: list[ClientUpdateResult]
    aggregate: np.ndarray
    snapshot: EvalSnapshot | None = None
    wallclock_ms: float = 0.0


@dataclass
class TrainingRun:
    """Everything produced by one seeded training execution."""

    seed: int
    traces: list[RoundTrace] = field(default_factory=list)
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)
    final_params: np.ndarray | None = None
    stage1_rounds: int = 0

    @property
    def snapshots(self) -> list[EvalSnapshot]:
        return [t.snapshot for t in self.traces if t.snapshot is not None]


def sample_clients(
    train_client_ids, m: int, rng: np.random.Generator
) -> list[int]:
    """M distinct training clients, uniform without replacement, ascending."""
    ids = list(train_client_ids)
    if m > len(ids):
        raise ContractViolation(f"cannot sample {m} of {len(ids)} train clients")
    picked = rng.permutation(len(ids))[:m]
    return sorted(ids[i] for i in picked)


def client_update(
    spec: ModelSpec,
    params: np.ndarray,
    client: ClientDataset,
    epochs: int,
    cfg: ClientOptimizerConfig,
    rng: np.random.Generator,
    weighting: str = "data_proportional",
    trace: bool = False,
    client_id: int = -1,
) -> ClientUpdateResult:
    """E local epochs of SGD; the update is the parameter delta."""
    batches = make_client_batches(client, epochs, cfg, rng)
    final, grads = sgd_trajectory(spec, params, batches, cfg.lr)
    weight = float(client.weight) if weighting == "data_proportional" else 1.0
    return ClientUpdateResult(
        client_id=client_id,
        delta=final - params,
        weight=weight,
        step_gradients=grads if trace else None,
    )


def _step_batches(
    client: ClientDataset, k: int, cfg: ClientOptimizerConfig, rng: np.random.Generator
) -> list[Batch]:
    per_epoch = math.ceil(client.train.n / cfg.batch_size)
    epochs = math.ceil(k / per_epoch)
    return make_client_batches(client, epochs, cfg, rng)[:k]


def inner_loop_reptile(
    spec: ModelSpec,
    params: np.ndarray,
    client: ClientDataset,
    steps: int,
    cfg: ClientOptimizerConfig,
    rng: np.random.Generator,
    trace: bool = False,
    client_id: int = -1,
) -> ClientUpdateResult:
    """Exactly K local SGD steps; always weight 1."""
    if steps < 1:
        raise ContractViolation("steps must be positive")
    batches = _step_batches(client, steps, cfg, rng)
    final, grads = sgd_trajectory(spec, params, batches, cfg.lr)
    return ClientUpdateResult(
        client_id=client_id,
        delta=final - params,
        weight=1.0,
        step_gradients=grads if trace else None,
    )


def _fomaml_client_update(
    spec: ModelSpec,
    params: np.ndarray,
    client: ClientDataset,
    k: int,
    cfg: ClientOptimizerConfig,
    rng: np.random.Generator,
    trace: bool = False,
    client_id: int = -1,
) -> ClientUpdateResult:
    """Adapt for K steps, then contribute -beta times the next gradient."""
    batches = _step_batches(client, k + 1, cfg, rng)
    if k > 0:
        theta, grads = sgd_trajectory(spec, params, batches[:k], cfg.lr)
    else:
        theta, grads = params, []
    g_next = gradient(spec, theta, batches[k])
    return ClientUpdateResult(
        client_id=client_id,
        delta=-cfg.lr * g_next,
        weight=1.0,
        step_gradients=grads + [g_next] if trace else None,
    )


def fomaml_update(
    step_gradient_lists: list[list[np.ndarray]], k: int, beta: float
) -> np.ndarray:
    """Average of -beta times each client's (k+1)th recorded raw gradient.

    With k = 0 this is the single-step baseline update built from each
    client's first gradient.
    """
    if not step_gradient_lists:
        raise ContractViolation("need at least one client trajectory")
    for grads in step_gradient_lists:
        if len(grads) < k + 1:
            raise ContractViolation(
                f"trajectory has {len(grads)} gradients, need at least {k + 1}"
            )
    stacked = np.stack([grads[k] for grads in step_gradient_lists])
    return -beta * stacked.mean(axis=0)


def run_round(
    spec: ModelSpec,
    params: np.ndarray,
    dataset: FederatedDataset,
    cfg: RoundConfig,
    server_state: ServerOptimizerState,
    round_index: int,
    streams: StreamFactory,
    trace: bool = False,
) -> tuple[np.ndarray, ServerOptimizerState, RoundTrace]:
    """One communication round: sample, update, aggregate, apply."""
    started = time.perf_counter()
    sample_rng = streams.stream("round.sample", round_index)
    ids = sample_clients(dataset.train_client_ids, cfg.clients_per_round, sample_rng)

    results = []
    for cid in ids:
        client = dataset.clients[cid]
        rng = streams.stream("round.batch", round_index, cid)
        try:
            if cfg.algorithm == "fomaml":
                res = _fomaml_client_update(
                    spec, params, client, cfg.steps, cfg.client_cfg, rng, trace, cid
                )
            elif cfg.algorithm == "fedavg" and cfg.epochs is not None:
                res = client_update(
                    spec, params, client, cfg.epochs, cfg.client_cfg, rng,
                    weighting=cfg.weighting, trace=trace, client_id=cid,
                )
            else:
                res = inner_loop_reptile(
                    spec, params, client, cfg.steps, cfg.client_cfg, rng, trace, cid
                )
                if cfg.algorithm == "fedavg" and cfg.weighting == "data_proportional":
                    res.weight = float(client.weight)
        except DivergenceError as exc:
            raise DivergenceError(
                f"client {cid} diverged at step {exc.step_index} in round {round_index}",
                step_index=exc.step_index,
                client_id=cid,
                round_index=round_index,
            ) from exc
        results.append(res)

    # Normalize weights before scaling so equal weights reduce to exactly
    # 1/M coefficients regardless of their common magnitude.
    total_weight = sum(r.weight for r in results)
    aggregate = np.zeros_like(params)
    for r in results:
        aggregate += (r.weight / total_weight) * r.delta

    new_params, new_state = server_apply(server_state, params, aggregate)
    trace_record = RoundTrace(
        round_index, ids, results, aggregate,
        wallclock_ms=1000.0 * (time.perf_counter() - started),
    )
    return new_params, new_state, trace_record


@dataclass(frozen=True)
class ServerOptimizerConfig:
    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def create_state(self, dim: int) -> ServerOptimizerState:
        return ServerOptimizerState.create(
            self.kind, dim, self.lr, self.momentum, self.beta1, self.beta2, self.eps
        )


@dataclass(frozen=True)
class StageConfig:
    rounds: int
    round_cfg: RoundConfig | None
    server: ServerOptimizerConfig | None

    def __post_init__(self):
        if self.rounds < 0:
            raise ContractViolation("rounds must be non-negative")
        if self.rounds > 0 and (self.round_cfg is None or self.server is None):
            raise ContractViolation("a non-empty stage needs round and server configs")


@dataclass(frozen=True)
class EvalConfig:
    """Personalization-evaluation schedule during training.

    A snapshot is taken every ``every`` rounds (0 disables periodic
    snapshots) and always at the end of each stage. Snapshots run on the
    held-out evaluation clients.
    """

    personalization: "PersonalizationConfig"
    every: int = 0


def run_personalized_fedavg(
    spec: ModelSpec,
    dataset: FederatedDataset,
    stage1: StageConfig,
    stage2: StageConfig | None,
    eval_cfg: EvalConfig | None,
    seed: int,
    trace: bool = False,
    checkpoint_every: int = 0,
) -> TrainingRun:
    """Two-stage training: averaged-epoch rounds, then step-counted
    fine-tuning continuing from stage-1 parameters with fresh server state.

    Either stage may be empty (rounds=0): stage2=0 is plain first-stage
    training, stage1=0 fine-tunes directly from the random initialization.
    On divergence the partially completed run is attached to the raised
    error as ``partial_run``.
    """
    from .personalization import eval_population  # circular at import time

    streams = StreamFactory(seed)
    params = init_params(spec, streams.stream("init"))
    run = TrainingRun(seed=seed, stage1_rounds=stage1.rounds)

    def snapshot(round_index: int) -> EvalSnapshot:
        report = eval_population(
            spec, params, dataset, "eval_clients",
            eval_cfg.personalization, streams, snapshot_index=round_index,
        )
        return EvalSnapshot(
            round_index=round_index,
            initial_mean=report.mean_initial,
            initial_std=report.std_initial,
            personalized_mean=report.mean_personalized,
            personalized_std=report.std_personalized,
        )

    round_index = 0
    stages = [stage1] + ([stage2] if stage2 is not None else [])
    try:
        for stage in stages:
            if stage.rounds == 0:
                continue
            server_state = stage.server.create_state(spec.param_count)
            for r in range(stage.rounds):
                params, server_state, tr = run_round(
                    spec, params, dataset, stage.round_cfg,
                    server_state, round_index, streams, trace,
                )
                round_index += 1
                stage_end = r == stage.rounds - 1
                if eval_cfg is not None and (
                    stage_end or (eval_cfg.every and round_index % eval_cfg.every == 0)
                ):
                    tr.snapshot = snapshot(round_index)
                run.traces.append(tr)
                if checkpoint_every and round_index % checkpoint_every == 0:
                    run.checkpoints[round_index] = params.copy()
    except DivergenceError as exc:
        run.final_params = None
        exc.partial_run = run
        raise

    run.final_params = params
    return run
