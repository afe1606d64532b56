"""Client and server optimizer state machines.

The server optimizers treat the aggregated client delta as a pseudo-gradient:
plain SGD and momentum add ``lr * delta`` (momentum through a velocity
buffer), while Adam feeds the negated delta through the standard
bias-corrected update. State transitions are pure; ``server_apply`` returns a
new state and never mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation, NumericError
from .model import Batch

SERVER_KINDS = ("sgd", "momentum", "adam")


@dataclass(frozen=True)
class ClientOptimizerConfig:
    """Plain SGD settings used for local client steps."""

    lr: float
    batch_size: int

    def __post_init__(self):
        if self.lr < 0:
            raise ContractViolation("client lr must be non-negative")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be positive")


@dataclass(frozen=True)
class ServerOptimizerState:
    kind: str
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    velocity: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step_count: int = 0

    @classmethod
    def create(
        cls,
        kind: str,
        dim: int,
        lr: float,
        momentum: float = 0.9,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "ServerOptimizerState":
        if kind not in SERVER_KINDS:
            raise ContractViolation(f"unknown server optimizer {kind!r}")
        if lr <= 0:
            raise ContractViolation("server lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ContractViolation("momentum must lie in [0, 1)")
        buffers = {}
        if kind == "momentum":
            buffers["velocity"] = np.zeros(dim)
        elif kind == "adam":
            buffers["m"] = np.zeros(dim)
            buffers["v"] = np.zeros(dim)
        return cls(kind=kind, lr=lr, momentum=momentum, beta1=beta1, beta2=beta2, eps=eps, **buffers)


def server_apply(
    state: ServerOptimizerState, params: np.ndarray, delta: np.ndarray
) -> tuple[np.ndarray, ServerOptimizerState]:
    """Apply one server step to ``params`` given the aggregated delta."""
    params = np.asarray(params, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if params.shape != delta.shape:
        raise ContractViolation("delta shape does not match parameters")
    if not np.all(np.isfinite(delta)):
        raise NumericError("non-finite aggregated delta")

    t = state.step_count + 1
    if state.kind == "sgd":
        return params + state.lr * delta, replace(state, step_count=t)
    if state.kind == "momentum":
        velocity = state.momentum * state.velocity + delta
        return params + state.lr * velocity, replace(state, velocity=velocity, step_count=t)

    g = -delta
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step_count=t)


def make_client_batches(
    client, epochs: int, cfg: ClientOptimizerConfig, rng: np.random.Generator
) -> list[Batch]:
    """Shuffle the client's train split once per epoch and chunk it.

    The final short chunk of each epoch is kept, so an epoch always covers
    every training example exactly once.
    """
    if epochs < 1:
        raise ContractViolation("epochs must be positive")
    train = client.train
    if train.n == 0:
        raise ContractViolation("client has no training data")
    batches = []
    for _ in range(epochs):
        order = rng.permutation(train.n)
        for start in range(0, train.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batches.append(Batch(train.x[idx], train.y[idx]))
    return batches
