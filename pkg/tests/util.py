"""Independent oracles shared by the test modules.

Everything here deliberately avoids the library's backprop and trajectory
code paths: gradients come from central finite differences on the scalar
loss, and quadratic-model expectations come from explicit matrix algebra
on a Hessian assembled straight from the batch.
"""

from __future__ import annotations

import numpy as np

from fedmetasim import Batch, ModelSpec, forward_loss
from fedmetasim.data import ClientDataset, ExampleSet


def fd_gradient(spec, params, batch, h=1e-5):
    """Central-difference gradient of forward_loss, one coordinate at a time."""
    params = np.asarray(params, dtype=np.float64)
    out = np.empty(params.shape[0])
    for i in range(params.shape[0]):
        bumped = params.copy()
        bumped[i] = params[i] + h
        up = forward_loss(spec, bumped, batch)
        bumped[i] = params[i] - h
        down = forward_loss(spec, bumped, batch)
        out[i] = (up - down) / (2.0 * h)
    return out


def max_relative_error(approx, exact, floor=1e-8):
    """Max |approx-exact|/|exact| over entries with |exact| above the floor."""
    approx = np.asarray(approx)
    exact = np.asarray(exact)
    mask = np.abs(exact) > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(approx[mask] - exact[mask]) / np.abs(exact[mask])))


def quad_hessian(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Hessian of the mean quadratic loss for a single identity layer.

    Assembled from per-example output Jacobians under the flat layout
    (row-major weights, then bias), so the only thing shared with the
    implementation is the layout contract.
    """
    n, d = x.shape
    c = spec.num_classes
    p = spec.param_count
    a = np.zeros((p, p))
    for row in x:
        jac = np.zeros((c, p))
        for k in range(c):
            jac[k, k * d : (k + 1) * d] = row
            jac[k, c * d + k] = 1.0
        a += jac.T @ jac
    return a / n


def quad_linear_term(spec: ModelSpec, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """c such that grad of the mean quadratic loss is A theta - c."""
    n, d = x.shape
    cdim = spec.num_classes
    p = spec.param_count
    out = np.zeros(p)
    for row, t in zip(x, targets):
        jac = np.zeros((cdim, p))
        for k in range(cdim):
            jac[k, k * d : (k + 1) * d] = row
            jac[k, cdim * d + k] = 1.0
        out += jac.T @ t
    return out / n


def quadratic_problem(seed, d=3, c=2, n=8):
    """A homogeneous quadratic: single identity layer, zero targets."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(d, (c,), activation="identity", loss="quadratic")
    x = rng.normal(size=(n, d))
    batch = Batch(x, np.zeros(n, dtype=np.int64), targets=np.zeros((n, c)))
    params = rng.normal(size=spec.param_count)
    return spec, params, batch, quad_hessian(spec, x)


def onehot(y, c):
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), np.asarray(y)] = 1.0
    return out


def make_client(rng, n_train=20, n_test=8, d=4, c=3):
    """A random labelled client with Gaussian class clusters."""
    means = rng.normal(size=(c, d))
    y_tr = rng.integers(0, c, size=n_train)
    y_te = rng.integers(0, c, size=n_test)
    x_tr = means[y_tr] + 0.5 * rng.normal(size=(n_train, d))
    x_te = means[y_te] + 0.5 * rng.normal(size=(n_test, d))
    return ClientDataset(train=ExampleSet(x_tr, y_tr), test=ExampleSet(x_te, y_te))
