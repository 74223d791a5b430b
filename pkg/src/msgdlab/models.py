"""Loss models: objective, per-datum gradient, data law, and noise factor.

A :class:`LossModel` bundles everything the dynamics need:

* ``objective(theta)`` and its analytic ``grad_objective(theta)``;
* ``sample_data(stream, count)`` drawing iid data as a (count, payload) array;
* ``grad_loss(theta, data)`` mapping a (count, payload) batch to per-datum
  gradients (count, p), unbiased for ``grad_objective``;
* ``noise_factor(theta)``, a p x q matrix ``sigma`` with
  ``sigma sigma^T = Cov(grad_loss(theta, .))``.

Three concrete models are provided: a quadratic with Gaussian data (every
quantity in closed form, the main oracle model), a mean-zero uniform-data
model whose gradient is the datum itself (for error-distribution studies),
and ridge-regularized logistic regression over a fixed dataset resampled
with replacement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .numerics import RngStream


@dataclass(frozen=True)
class LossModel:
    name: str
    dim: int
    noise_dim: int
    objective: Callable[[np.ndarray], float]
    grad_objective: Callable[[np.ndarray], np.ndarray]
    sample_data: Callable[[RngStream, int], np.ndarray]
    grad_loss: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_factor: Callable[[np.ndarray], np.ndarray]
    lipschitz_grad: float                    # L: Lipschitz modulus of grad_objective
    lipschitz_noise: float                   # L1: Lipschitz modulus of noise_factor, spectral norm
    strong_convexity: Optional[float] = None # lambda, when g is strongly convex
    e_h1_sq: Optional[float] = None          # E[h1(u)^2] for the per-datum gradient modulus
    minimizer: Optional[np.ndarray] = None   # known argmin of the objective, if any

    def sample_datum(self, stream: RngStream) -> np.ndarray:
        return self.sample_data(stream, 1)[0]

    def grad_loss_one(self, theta: np.ndarray, datum: np.ndarray) -> np.ndarray:
        return self.grad_loss(theta, np.asarray(datum, dtype=float)[None, :])[0]

    def noise_trace(self, theta: np.ndarray) -> float:
        """Tr sigma^2(theta) = ||sigma(theta)||_F^2."""
        factor = self.noise_factor(np.asarray(theta, dtype=float))
        return float(np.sum(factor * factor))


def make_quadratic_model(p: int, theta_star, s: float) -> LossModel:
    """Quadratic oracle model: l(theta, u) = |theta - u|^2 / 2, u ~ N(theta*, s^2 I).

    Then g(theta) = |theta - theta*|^2 / 2 + p s^2 / 2, grad_loss is
    theta - u, and the noise factor is the constant s*I, so L = lambda = 1,
    L1 = 0, and h1 = 1 identically.
    """
    if not s > 0:
        raise ValueError(f"noise scale s must be positive, got {s}")
    theta_star = np.asarray(theta_star, dtype=float)
    if theta_star.shape != (p,):
        raise ValueError(f"theta_star must have shape ({p},), got {theta_star.shape}")
    const = 0.5 * p * s * s

    def objective(theta):
        d = np.asarray(theta, dtype=float) - theta_star
        return 0.5 * float(d @ d) + const

    def grad_objective(theta):
        return np.asarray(theta, dtype=float) - theta_star

    def sample_data(stream, count):
        return theta_star + s * stream.generator.standard_normal((count, p))

    def grad_loss(theta, data):
        return np.asarray(theta, dtype=float)[None, :] - data

    def noise_factor(theta):
        return s * np.eye(p)

    return LossModel(
        name="quadratic",
        dim=p,
        noise_dim=p,
        objective=objective,
        grad_objective=grad_objective,
        sample_data=sample_data,
        grad_loss=grad_loss,
        noise_factor=noise_factor,
        lipschitz_grad=1.0,
        lipschitz_noise=0.0,
        strong_convexity=1.0,
        e_h1_sq=1.0,
        minimizer=theta_star,
    )


def make_uniform_clt_model(p: int) -> LossModel:
    """Flat model with grad_loss(theta, u) = u, u ~ Unif(-1,1)^p.

    The objective is identically zero and the per-datum gradient is the
    datum itself, so the gradient noise has covariance (1/3) I at every
    theta.  Useful for studying the weighted-error distribution in
    isolation from any drift.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    factor = np.eye(p) / np.sqrt(3.0)

    def objective(theta):
        return 0.0

    def grad_objective(theta):
        return np.zeros(p)

    def sample_data(stream, count):
        return stream.generator.uniform(-1.0, 1.0, size=(count, p))

    def grad_loss(theta, data):
        return np.asarray(data, dtype=float)

    def noise_factor(theta):
        return factor

    return LossModel(
        name="uniform_clt",
        dim=p,
        noise_dim=p,
        objective=objective,
        grad_objective=grad_objective,
        sample_data=sample_data,
        grad_loss=grad_loss,
        noise_factor=noise_factor,
        lipschitz_grad=0.0,
        lipschitz_noise=0.0,
        strong_convexity=None,
        e_h1_sq=0.0,
        minimizer=None,
    )


@dataclass(frozen=True)
class LogisticDataset:
    """Fixed binary-response dataset with a ridge penalty kappa > 0."""

    labels: np.ndarray    # (t,) in {0, 1}
    covariates: np.ndarray  # (t, p)
    kappa: float

    def __post_init__(self):
        if self.labels.ndim != 1 or self.covariates.ndim != 2:
            raise ValueError("labels must be 1-D and covariates 2-D")
        if self.labels.shape[0] != self.covariates.shape[0]:
            raise ValueError("labels and covariates disagree on dataset size")
        if self.labels.shape[0] < 1:
            raise ValueError("dataset must contain at least one point")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0/1")
        if not self.kappa > 0:
            raise ValueError(f"ridge penalty kappa must be positive, got {self.kappa}")

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.covariates.shape[1]


def generate_logistic_dataset(stream: RngStream, p: int, t: int, kappa: float) -> LogisticDataset:
    """y_i ~ Bernoulli(1/2) iid, x_i ~ N(0, I_p); labels independent of x."""
    if p < 1 or t < 1:
        raise ValueError(f"need p >= 1 and t >= 1, got p={p}, t={t}")
    gen = stream.generator
    labels = gen.integers(0, 2, size=t).astype(float)
    covariates = gen.standard_normal((t, p))
    return LogisticDataset(labels=labels, covariates=covariates, kappa=kappa)


def save_logistic_dataset(dataset: LogisticDataset, path) -> None:
    """Write the dataset as CSV with header y, x1..xp (kappa is not data)."""
    p = dataset.dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["y"] + [f"x{j + 1}" for j in range(p)])
        for yi, xi in zip(dataset.labels, dataset.covariates):
            writer.writerow([f"{yi:.17g}"] + [f"{v:.17g}" for v in xi])


def load_logistic_dataset(path, kappa: float) -> LogisticDataset:
    """Read a dataset written by :func:`save_logistic_dataset`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "y":
            raise ValueError(f"unexpected header in {Path(path).name}: {header!r}")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows, dtype=float)
    return LogisticDataset(labels=data[:, 0], covariates=data[:, 1:], kappa=kappa)


def top_eigenvalue(matrix: np.ndarray, rel_tol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    matrix = np.asarray(matrix, dtype=float)
    p = matrix.shape[0]
    v = np.ones(p) / np.sqrt(p)
    value = 0.0
    for _ in range(max_iter):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_value = float(v @ (matrix @ v))
        if abs(new_value - value) <= rel_tol * max(abs(new_value), 1e-300):
            return new_value
        value = new_value
    return value


def logistic_lipschitz_constants(dataset: LogisticDataset) -> tuple[float, float]:
    """(tight, loose) Lipschitz bounds for the logistic objective gradient.

    The tight bound uses the 1/4 cap on the sigmoid derivative:
    lambda_max(X X^T) / (4t) + 2 kappa.  The loose variant drops the 1/4
    and is retained for comparison.
    """
    x = dataset.covariates
    lam_max = top_eigenvalue(x.T @ x)  # = lambda_max(X X^T)
    t = dataset.size
    tight = lam_max / (4.0 * t) + 2.0 * dataset.kappa
    loose = lam_max / t + 2.0 * dataset.kappa
    return tight, loose


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def make_logistic_model(dataset: LogisticDataset) -> LossModel:
    """Ridge-logistic model over a fixed dataset, resampled with replacement.

    Data are payloads ``[y, x_1..x_p]`` drawn uniformly from the dataset,
    refreshed at every iteration by the dynamics.  The noise factor is the
    p x t matrix with columns ``(grad_loss(beta, z_i) - grad_objective(beta)) / sqrt(t)``,
    an exact square root of the gradient covariance over the data law.
    """
    y = dataset.labels
    x = dataset.covariates
    t = dataset.size
    p = dataset.dim
    kappa = dataset.kappa
    lipschitz_tight, _ = logistic_lipschitz_constants(dataset)

    def objective(beta):
        beta = np.asarray(beta, dtype=float)
        z = x @ beta
        nll = -float(y @ z) + float(np.sum(np.logaddexp(0.0, z)))
        return nll / t + kappa * float(beta @ beta)

    def grad_objective(beta):
        beta = np.asarray(beta, dtype=float)
        resid = _sigmoid(x @ beta) - y
        return (x.T @ resid) / t + 2.0 * kappa * beta

    def sample_data(stream, count):
        idx = stream.generator.integers(0, t, size=count)
        return np.column_stack([y[idx], x[idx]])

    def grad_loss(beta, data):
        beta = np.asarray(beta, dtype=float)
        yd = data[:, 0]
        xd = data[:, 1:]
        resid = _sigmoid(xd @ beta) - yd
        return resid[:, None] * xd + 2.0 * kappa * beta

    def per_datum_gradients(beta):
        resid = _sigmoid(x @ beta) - y
        return resid[:, None] * x + 2.0 * kappa * beta

    def noise_factor(beta):
        beta = np.asarray(beta, dtype=float)
        grads = per_datum_gradients(beta)
        return (grads - grad_objective(beta)).T / np.sqrt(t)

    # h1(z_i) = |x_i|^2 / 4 + 2 kappa bounds the per-datum gradient modulus;
    # each noise-factor column moves at most (h1 + L)/sqrt(t), giving a
    # Frobenius (hence spectral) bound on the factor's modulus.
    h1 = np.sum(x * x, axis=1) / 4.0 + 2.0 * kappa
    lipschitz_noise = float(np.sqrt(np.mean((h1 + lipschitz_tight) ** 2)))

    return LossModel(
        name="logistic",
        dim=p,
        noise_dim=t,
        objective=objective,
        grad_objective=grad_objective,
        sample_data=sample_data,
        grad_loss=grad_loss,
        noise_factor=noise_factor,
        lipschitz_grad=lipschitz_tight,
        lipschitz_noise=lipschitz_noise,
        strong_convexity=2.0 * kappa,
        e_h1_sq=float(np.mean(h1**2)),
        minimizer=None,
    )
