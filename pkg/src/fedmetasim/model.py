"""Minimal differentiable MLP core.

Model parameters live in a single flat float64 vector laid out per layer as
the row-major weight matrix followed by the bias. All operations here are
pure functions of their inputs; nothing mutates shared state, so values are
safe to reuse across threads.

A finite-difference oracle for the meta-gradient (loss after K local SGD
steps, differentiated with respect to the starting point) is provided for
small models. It is deliberately independent of backpropagation so the two
can check each other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CapacityError,
    CheckpointError,
    ContractViolation,
    DivergenceError,
    NumericError,
)

ACTIVATIONS = ("identity", "relu", "tanh")
LOSSES = ("softmax_cross_entropy", "quadratic")

CKPT_MAGIC = "fms-ckpt/1"

# The meta-gradient oracle costs two trajectory replays per parameter.
MAML_ORACLE_MAX_DIM = 2000


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a fully connected classifier.

    ``layer_dims`` lists every layer's output width; the last entry is the
    class count. The quadratic loss is restricted to a single identity
    layer, where the whole objective is a quadratic in the parameters and
    closed forms exist for checking optimizers and meta-gradients.
    """

    input_dim: int
    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if self.input_dim < 1:
            raise ContractViolation("input_dim must be positive")
        if not self.layer_dims or any(d < 1 for d in self.layer_dims):
            raise ContractViolation("layer_dims must be non-empty positive integers")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ContractViolation(f"unknown loss {self.loss!r}")
        if self.loss == "quadratic" and (
            len(self.layer_dims) != 1 or self.activation != "identity"
        ):
            raise ContractViolation(
                "quadratic loss requires a single layer with identity activation"
            )

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def param_count(self) -> int:
        count, fan_in = 0, self.input_dim
        for fan_out in self.layer_dims:
            count += (fan_in + 1) * fan_out
            fan_in = fan_out
        return count

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) per layer."""
        shapes, fan_in = [], self.input_dim
        for fan_out in self.layer_dims:
            shapes.append((fan_out, fan_in))
            fan_in = fan_out
        return shapes


@dataclass(frozen=True)
class Batch:
    """A batch of labelled examples.

    ``targets`` is only consulted by the quadratic loss and defaults to the
    one-hot encoding of ``y``; supplying explicit real-valued targets allows
    constructing homogeneous quadratics (zero targets) for closed-form tests.
    """

    x: np.ndarray
    y: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.ascontiguousarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.ascontiguousarray(self.y, dtype=np.int64))
        if self.targets is not None:
            object.__setattr__(
                self, "targets", np.ascontiguousarray(self.targets, dtype=np.float64)
            )

    @property
    def size(self) -> int:
        return self.x.shape[0]


def _check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.param_count:
        raise ContractViolation(
            f"expected {spec.param_count} parameters, got shape {params.shape}"
        )
    return params


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.size == 0:
        raise ContractViolation("batch is empty")
    if batch.x.ndim != 2 or batch.x.shape[1] != spec.input_dim:
        raise ContractViolation(
            f"feature dim {batch.x.shape} does not match input_dim {spec.input_dim}"
        )
    if batch.y.shape != (batch.size,):
        raise ContractViolation("labels must be one per example")
    if batch.y.min() < 0 or batch.y.max() >= spec.num_classes:
        raise ContractViolation("labels must lie in [0, num_classes)")
    if batch.targets is not None and batch.targets.shape != (batch.size, spec.num_classes):
        raise ContractViolation("targets must have shape (batch, num_classes)")


def unflatten_params(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of the flat vector as per-layer (weights, bias). Treat as read-only."""
    params = _check_params(spec, params)
    layers, offset = [], 0
    for fan_out, fan_in in spec.layer_shapes():
        w = params[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def flatten_params(spec: ModelSpec, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers])
    return _check_params(spec, flat)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
    parts = []
    for fan_out, fan_in in spec.layer_shapes():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    if spec.activation == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(spec: ModelSpec, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return (z > 0.0).astype(np.float64)
    if spec.activation == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _forward(spec: ModelSpec, layers, x: np.ndarray):
    """Returns (pre-activations, activations, logits); activations[0] is x."""
    acts, pres = [x], []
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        pres.append(z)
        a = z if i == len(layers) - 1 else _activate(spec, z)
        acts.append(a)
    return pres, acts, acts[-1]


def forward_logits(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Raw class scores for a feature matrix of shape (n, input_dim)."""
    params = _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ContractViolation("feature matrix does not match input_dim")
    _, _, logits = _forward(spec, unflatten_params(spec, params), x)
    return logits


def _loss_targets(spec: ModelSpec, batch: Batch) -> np.ndarray:
    if batch.targets is not None:
        return batch.targets
    onehot = np.zeros((batch.size, spec.num_classes))
    onehot[np.arange(batch.size), batch.y] = 1.0
    return onehot


def forward_loss(spec: ModelSpec, params: np.ndarray, batch: Batch) -> float:
    """Mean loss of the batch under the spec's loss function."""
    params = _check_params(spec, params)
    _check_batch(spec, batch)
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_loss_unchecked(spec, params, batch)


def _forward_loss_unchecked(spec: ModelSpec, params: np.ndarray, batch: Batch) -> float:
    _, _, logits = _forward(spec, unflatten_params(spec, params), batch.x)
    if spec.loss == "softmax_cross_entropy":
        zmax = logits.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
        loss = np.mean(lse - logits[np.arange(batch.size), batch.y])
    else:
        diff = logits - _loss_targets(spec, batch)
        loss = 0.5 * np.mean(np.sum(diff * diff, axis=1))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return float(loss)


def gradient(spec: ModelSpec, params: np.ndarray, batch: Batch) -> np.ndarray:
    """Exact gradient of forward_loss with respect to the flat parameters."""
    params = _check_params(spec, params)
    _check_batch(spec, batch)
    with np.errstate(over="ignore", invalid="ignore"):
        return _gradient_unchecked(spec, params, batch)


def _gradient_unchecked(spec: ModelSpec, params: np.ndarray, batch: Batch) -> np.ndarray:
    layers = unflatten_params(spec, params)
    pres, acts, logits = _forward(spec, layers, batch.x)
    n = batch.size

    if spec.loss == "softmax_cross_entropy":
        zmax = logits.max(axis=1, keepdims=True)
        ez = np.exp(logits - zmax)
        probs = ez / ez.sum(axis=1, keepdims=True)
        dz = probs.copy()
        dz[np.arange(n), batch.y] -= 1.0
        dz /= n
    else:
        dz = (logits - _loss_targets(spec, batch)) / n

    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (dz.T @ acts[i], dz.sum(axis=0))
        if i > 0:
            da = dz @ w
            dz = da * _activate_grad(spec, pres[i - 1], acts[i])

    flat = flatten_params(spec, grads)
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite gradient")
    return flat


def sgd_trajectory(
    spec: ModelSpec,
    params: np.ndarray,
    batches: list[Batch],
    beta: float,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run sequential SGD steps over ``batches`` with step size ``beta``.

    Returns the final parameters and the raw per-step gradients, i.e. the
    gradient evaluated at the parameters *before* each step. The step-size
    scaling is not folded into the recorded gradients.
    """
    params = _check_params(spec, params).copy()
    if beta < 0:
        raise ContractViolation("beta must be non-negative")
    if not batches:
        raise ContractViolation("batches must be non-empty")
    grads = []
    # Overflow here is an anticipated outcome, reported via DivergenceError.
    with np.errstate(over="ignore", invalid="ignore"):
        for j, batch in enumerate(batches):
            g = gradient(spec, params, batch)
            params = params - beta * g
            if not np.all(np.isfinite(params)):
                raise DivergenceError(
                    f"parameters diverged at step {j}", step_index=j
                )
            grads.append(g)
    return params, grads


def _merge_batches(batches: list[Batch]) -> Batch:
    xs = np.concatenate([b.x for b in batches])
    ys = np.concatenate([b.y for b in batches])
    if all(b.targets is not None for b in batches):
        return Batch(xs, ys, np.concatenate([b.targets for b in batches]))
    return Batch(xs, ys)


def maml_gradient_oracle(
    spec: ModelSpec,
    params: np.ndarray,
    batches: list[Batch],
    beta: float,
    eval_batch: Batch | None = None,
    fd_step: float = 1e-5,
) -> np.ndarray:
    """Central finite differences of theta -> loss(adapt(theta), eval_batch).

    ``adapt`` replays the SGD trajectory over ``batches``. One coordinate is
    perturbed at a time, so the cost is two trajectory replays per parameter;
    the dimension is capped accordingly. With no batches (or beta = 0) the
    adaptation is the identity and the result reduces to the plain gradient
    up to finite-difference error.
    """
    params = _check_params(spec, params)
    if spec.param_count > MAML_ORACLE_MAX_DIM:
        raise CapacityError(
            f"oracle capped at {MAML_ORACLE_MAX_DIM} parameters, spec has {spec.param_count}"
        )
    if fd_step <= 0:
        raise ContractViolation("fd_step must be positive")
    if eval_batch is None:
        if not batches:
            raise ContractViolation("eval_batch required when batches is empty")
        eval_batch = _merge_batches(batches)

    def adapted_loss(theta: np.ndarray) -> float:
        for batch in batches:
            theta = theta - beta * gradient(spec, theta, batch)
        return forward_loss(spec, theta, eval_batch)

    out = np.empty(spec.param_count)
    for i in range(spec.param_count):
        bumped = params.copy()
        bumped[i] = params[i] + fd_step
        up = adapted_loss(bumped)
        bumped[i] = params[i] - fd_step
        down = adapted_loss(bumped)
        out[i] = (up - down) / (2.0 * fd_step)
    return out


def save_checkpoint(path, spec: ModelSpec, params: np.ndarray) -> None:
    """Versioned text header describing the spec, then the flat vector as
    a little-endian float64 array with a uint64 length prefix."""
    params = _check_params(spec, params)
    header = "\n".join(
        [
            CKPT_MAGIC,
            f"input_dim={spec.input_dim}",
            "layer_dims=" + ",".join(str(d) for d in spec.layer_dims),
            f"activation={spec.activation}",
            f"loss={spec.loss}",
            "",
            "",
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(struct.pack("<Q", params.shape[0]))
        fh.write(params.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError("missing header terminator")
    try:
        lines = blob[:sep].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise CheckpointError("header is not ASCII") from exc
    if not lines or lines[0] != CKPT_MAGIC:
        raise CheckpointError(f"expected {CKPT_MAGIC} header")
    fields = {}
    for line in lines[1:]:
        key, _, value = line.partition("=")
        fields[key] = value
    try:
        spec = ModelSpec(
            input_dim=int(fields["input_dim"]),
            layer_dims=tuple(int(d) for d in fields["layer_dims"].split(",")),
            activation=fields["activation"],
            loss=fields["loss"],
        )
    except (KeyError, ValueError, ContractViolation) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    payload = blob[sep + 2 :]
    if len(payload) < 8:
        raise CheckpointError("missing length prefix")
    (count,) = struct.unpack("<Q", payload[:8])
    data = payload[8 : 8 + 8 * count]
    if len(data) != 8 * count:
        raise CheckpointError("truncated parameter payload")
    params = np.frombuffer(data, dtype="<f8").astype(np.float64)
    if count != spec.param_count:
        raise CheckpointError(
            f"checkpoint has {count} parameters but spec implies {spec.param_count}"
        )
    return spec, params
