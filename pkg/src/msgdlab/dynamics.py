"""The five processes under comparison and their interpolants.

Discrete iterations on the grid k*gamma, k = 0..K:

* ``run_gd``            x_{k+1} = x_k - gamma * grad g(x_k)
* ``run_gaussian_sgd``  adds (gamma/sqrt(m)) * sigma(x_k) * xi_{k+1}
* ``run_msgd``          x_{k+1} = x_k - gamma * sum_i w_i grad l(x_k, u_i)
                        with fresh data and a fresh weight vector each step

Continuous-time references:

* ``run_ode``           dX = -grad g(X) dt, classical 4th-order one-step method
* ``run_diffusion_em``  dX = -grad g(X) dt + sqrt(gamma/m) sigma(X) dB,
                        Euler-Maruyama with substeps gamma/R

Trajectories retain what exact interpolation needs: M-SGD keeps each
step's aggregate drift, Gaussian SGD keeps each step's realized noise
increment so interior times can be filled in with a Brownian bridge
conditioned on the path that was actually taken.

Any non-finite or absurdly large state aborts with the offending
iteration index instead of propagating NaNs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import LossModel
from .numerics import RngStream
from .weights import WeightScheme, sample_weights

DIVERGENCE_LIMIT = 1e150


class DivergenceError(ArithmeticError):
    """A trajectory left the representable range."""

    def __init__(self, process: str, iteration: int):
        self.process = process
        self.iteration = iteration
        super().__init__(f"{process} diverged at iteration {iteration}")


@dataclass(frozen=True)
class RunConfig:
    """Shared run parameters: step size, iteration count, and (n, m).

    The horizon is T = num_steps * gamma.  All processes given the same
    config start at the same x0.
    """

    gamma: float
    num_steps: int
    m: int
    n: int
    x0: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"step size must satisfy 0 < gamma < 1, got {self.gamma}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if not 1 <= self.m <= self.n:
            raise ValueError(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))

    @property
    def horizon(self) -> float:
        return self.num_steps * self.gamma


@dataclass
class Trajectory:
    """States x_0..x_K on the grid, plus per-step records for interpolation."""

    kind: str
    states: np.ndarray                      # (K+1, p)
    config: RunConfig
    model: LossModel
    scheme: Optional[WeightScheme] = None
    drift_record: Optional[np.ndarray] = None   # (K, p): aggregate drift per step
    noise_record: Optional[np.ndarray] = None   # (K, p): realized noise increment per step
    step_size: Optional[float] = None           # grid spacing when it differs from config.gamma

    @property
    def grid(self) -> float:
        return self.step_size if self.step_size is not None else self.config.gamma

    @property
    def horizon(self) -> float:
        return (self.states.shape[0] - 1) * self.grid

    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.grid

    def state_at_time(self, t: float) -> np.ndarray:
        """State at a grid time; raises if t does not sit on the grid."""
        ratio = t / self.grid
        k = int(round(ratio))
        if not 0 <= k < self.states.shape[0] or abs(ratio - k) > 1e-9:
            raise ValueError(f"t={t} is not on the grid of spacing {self.grid}")
        return self.states[k]


def _checked(x: np.ndarray, kind: str, iteration: int) -> np.ndarray:
    if not np.all(np.isfinite(x)) or np.any(np.abs(x) > DIVERGENCE_LIMIT):
        raise DivergenceError(kind, iteration)
    return x


def run_gd(model: LossModel, config: RunConfig) -> Trajectory:
    """Deterministic gradient descent."""
    states = np.empty((config.num_steps + 1, model.dim))
    states[0] = _checked(config.x0, "gd", 0)
    x = config.x0
    for k in range(config.num_steps):
        x = x - config.gamma * model.grad_objective(x)
        states[k + 1] = _checked(x, "gd", k + 1)
    return Trajectory(kind="gd", states=states, config=config, model=model)


def run_gaussian_sgd(model: LossModel, config: RunConfig, stream: RngStream) -> Trajectory:
    """Gradient descent plus scaled Gaussian noise (gamma/sqrt(m)) sigma(x) xi."""
    gen = stream.generator
    scale = config.gamma / math.sqrt(config.m)
    states = np.empty((config.num_steps + 1, model.dim))
    noise_record = np.empty((config.num_steps, model.dim))
    states[0] = _checked(config.x0, "gaussian_sgd", 0)
    x = config.x0
    for k in range(config.num_steps):
        xi = gen.standard_normal(model.noise_dim)
        noise = scale * (model.noise_factor(x) @ xi)
        noise_record[k] = noise
        x = x - config.gamma * model.grad_objective(x) + noise
        states[k + 1] = _checked(x, "gaussian_sgd", k + 1)
    return Trajectory(
        kind="gaussian_sgd",
        states=states,
        config=config,
        model=model,
        noise_record=noise_record,
    )


def run_msgd(
    model: LossModel, scheme: WeightScheme, config: RunConfig, stream: RngStream
) -> Trajectory:
    """Weighted-gradient descent with fresh data and weights every step."""
    if scheme.n != config.n or scheme.m != config.m:
        raise ValueError(
            f"scheme (n={scheme.n}, m={scheme.m}) disagrees with "
            f"config (n={config.n}, m={config.m})"
        )
    states = np.empty((config.num_steps + 1, model.dim))
    drift_record = np.empty((config.num_steps, model.dim))
    states[0] = _checked(config.x0, "msgd", 0)
    x = config.x0
    for k in range(config.num_steps):
        data = model.sample_data(stream, config.n)
        w = sample_weights(stream, scheme).values
        drift = w @ model.grad_loss(x, data)
        drift_record[k] = drift
        x = x - config.gamma * drift
        states[k + 1] = _checked(x, "msgd", k + 1)
    return Trajectory(
        kind="msgd",
        states=states,
        config=config,
        model=model,
        scheme=scheme,
        drift_record=drift_record,
    )


def run_ode(model: LossModel, x0, h: float, horizon: float) -> Trajectory:
    """Gradient flow dX = -grad g(X) dt by the classical 4th-order method.

    The grid spacing h must divide the horizon.  Callers comparing against
    a discrete process with step gamma should choose h <= gamma / 10 so the
    integration error is negligible next to the effects under study.
    """
    if not h > 0:
        raise ValueError(f"inner step h must be positive, got {h}")
    steps_float = horizon / h
    steps = int(round(steps_float))
    if steps < 1 or abs(steps_float - steps) > 1e-9 * max(steps, 1):
        raise ValueError(f"h={h} does not divide the horizon {horizon}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    config = RunConfig(gamma=min(h, 0.5), num_steps=steps, m=1, n=1, x0=x0)

    def rhs(x):
        return -model.grad_objective(x)

    states = np.empty((steps + 1, model.dim))
    states[0] = _checked(x0, "ode", 0)
    x = x0
    for k in range(steps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        states[k + 1] = _checked(x, "ode", k + 1)
    return Trajectory(kind="ode", states=states, config=config, model=model, step_size=h)


def run_diffusion_em(
    model: LossModel, config: RunConfig, substeps: int, stream: RngStream
) -> Trajectory:
    """Euler-Maruyama for dX = -grad g(X) dt + sqrt(gamma/m) sigma(X) dB.

    Integrates with inner step h = gamma/substeps and records states at
    multiples of gamma only, so the output grid matches the discrete
    processes.
    """
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    gen = stream.generator
    h = config.gamma / substeps
    sqrt_h = math.sqrt(h)
    diffusion_scale = math.sqrt(config.gamma / config.m)
    states = np.empty((config.num_steps + 1, model.dim))
    states[0] = _checked(config.x0, "diffusion_em", 0)
    x = config.x0
    for k in range(config.num_steps):
        for _ in range(substeps):
            z = gen.standard_normal(model.noise_dim)
            x = (
                x
                - h * model.grad_objective(x)
                + diffusion_scale * sqrt_h * (model.noise_factor(x) @ z)
            )
        states[k + 1] = _checked(x, "diffusion_em", k + 1)
    return Trajectory(kind="diffusion_em", states=states, config=config, model=model)


def _locate(trajectory: Trajectory, t: float) -> tuple[int, float]:
    """Map t in [0, T] to (step index k, offset s in [0, gamma)); s = 0 on grid."""
    gamma = trajectory.grid
    horizon = trajectory.horizon
    if not 0.0 <= t <= horizon * (1.0 + 1e-12):
        raise ValueError(f"t={t} outside [0, {horizon}]")
    ratio = t / gamma
    nearest = int(round(ratio))
    if abs(ratio - nearest) <= 1e-9:
        return nearest, 0.0
    k = int(math.floor(ratio))
    return k, t - k * gamma


def interpolate_msgd(trajectory: Trajectory, t: float) -> np.ndarray:
    """Piecewise-linear interpolant along the recorded per-step drifts.

    Exactly reproduces the discrete iterates at grid times.
    """
    if trajectory.kind != "msgd" or trajectory.drift_record is None:
        raise ValueError("expected an msgd trajectory with a drift record")
    k, s = _locate(trajectory, t)
    if s == 0.0:
        return trajectory.states[k].copy()
    return trajectory.states[k] - s * trajectory.drift_record[k]


def interpolate_gaussian_piece(trajectory: Trajectory, t: float, stream: RngStream) -> np.ndarray:
    """Interior value of the piecewise Gaussian interpolant.

    On [k*gamma, (k+1)*gamma] the interpolant follows the frozen drift
    -grad g(x_k) plus sigma(x_k) times the Brownian path.  Conditioned on
    the stored full-step increment, the interior Brownian value is the
    bridge: mean (s/gamma) * (full increment), variance s*(gamma-s)/gamma
    per coordinate.  Grid times return the discrete iterate exactly.
    """
    if trajectory.kind != "gaussian_sgd" or trajectory.noise_record is None:
        raise ValueError("expected a gaussian_sgd trajectory with a noise record")
    k, s = _locate(trajectory, t)
    if s == 0.0:
        return trajectory.states[k].copy()
    config = trajectory.config
    model = trajectory.model
    gamma = config.gamma
    x_k = trajectory.states[k]
    mean_part = (
        x_k - s * model.grad_objective(x_k) + (s / gamma) * trajectory.noise_record[k]
    )
    bridge_sd = math.sqrt(s * (gamma - s) / gamma)
    eta = stream.generator.standard_normal(model.noise_dim)
    bridge = math.sqrt(gamma / config.m) * bridge_sd * (model.noise_factor(x_k) @ eta)
    return mean_part + bridge


def trajectory_to_csv(trajectory: Trajectory, path) -> None:
    """Write the grid states as CSV with columns k, t, x1..xp."""
    p = trajectory.states.shape[1]
    grid = trajectory.grid
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "t"] + [f"x{j + 1}" for j in range(p)])
        for k, row in enumerate(trajectory.states):
            writer.writerow([k, f"{k * grid:.17g}"] + [f"{v:.17g}" for v in row])
