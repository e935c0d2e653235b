"""Logistic-regression baseline on temporally averaged features.

Temporal buckets are collapsed to their per-feature means (BMI over
buckets that actually carry a measurement) and concatenated with the
static vector. The model minimizes mean binary cross-entropy plus an L2
penalty on the non-intercept weights with a limited-memory quasi-Newton
iteration; the objective and its analytic gradient are defined here, the
line-search bookkeeping is scipy's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .pipeline import BMI_COL, BMI_OBS_COL, SplitArrays

GRAD_TOL = 1e-6
MAX_ITER = 500
LBFGS_MEMORY = 10


class BaselineError(ValueError):
    pass


@dataclass
class LrModel:
    """weights[0] is the unpenalized intercept."""

    weights: np.ndarray
    l2: float
    converged: bool
    grad_norm: float

    @property
    def n_features(self) -> int:
        return self.weights.size - 1


def aggregate_temporal(buckets: np.ndarray) -> np.ndarray:
    """Mean of each temporal feature over the buckets; the BMI column is
    averaged over observed buckets only (0 when none are observed)."""
    buckets = np.asarray(buckets, dtype=float)
    if buckets.ndim != 2 or buckets.shape[0] < 1:
        raise BaselineError(f"aggregate_temporal: need (T, F) buckets, got {buckets.shape}")
    out = buckets.mean(axis=0)
    observed = buckets[:, BMI_OBS_COL] > 0
    out[BMI_COL] = buckets[observed, BMI_COL].mean() if observed.any() else 0.0
    return out


def flatten_split(split: SplitArrays) -> np.ndarray:
    """Static block plus aggregated temporal block, one row per sample."""
    agg = np.stack([aggregate_temporal(t) for t in split.temporal])
    return np.concatenate([split.static, agg], axis=1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lr_objective(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float):
    """Mean BCE + (l2/2)*||w[1:]||^2 and its gradient. X must not carry an
    intercept column; w[0] is the intercept."""
    z = w[0] + X @ w[1:]
    # log(1+exp(-|z|)) formulation avoids overflow on saturated logits
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(w[1:] @ w[1:])
    residual = _sigmoid(z) - y
    grad = np.empty_like(w)
    grad[0] = residual.mean()
    grad[1:] = X.T @ residual / len(y) + l2 * w[1:]
    return loss, grad


def train_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1.0,
                   w0: np.ndarray | None = None) -> LrModel:
    """Fit by L-BFGS; converged when the gradient norm is at most 1e-6,
    otherwise the best iterate is returned flagged. The objective is
    convex, so the optional start point w0 changes nothing but the path."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise BaselineError(f"train_logistic: X {X.shape} does not match y {y.shape}")
    if len(np.unique(y)) < 2:
        raise BaselineError("train_logistic: need both classes present")
    if l2 < 0:
        raise BaselineError("train_logistic: l2 must be non-negative")
    w0 = np.zeros(X.shape[1] + 1) if w0 is None else np.asarray(w0, dtype=float)
    res = minimize(
        lr_objective, w0, args=(X, y, l2), jac=True, method="L-BFGS-B",
        options={"maxiter": MAX_ITER, "maxcor": LBFGS_MEMORY,
                 "gtol": 1e-9, "ftol": 1e-15},
    )
    _, grad = lr_objective(res.x, X, y, l2)
    grad_norm = float(np.linalg.norm(grad))
    return LrModel(weights=res.x, l2=l2, converged=grad_norm <= GRAD_TOL,
                   grad_norm=grad_norm)


def predict_logistic(model: LrModel, X: np.ndarray) -> np.ndarray:
    """sigmoid(w . [1, x]) per row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise BaselineError(
            f"predict_logistic: {X.shape[1]} features, model has {model.n_features}")
    return _sigmoid(model.weights[0] + X @ model.weights[1:])
