"""Continuous-time plant simulation and excitation-signal generation.

Plants are immutable descriptions of an ODE ``x' = f(x, u, p)`` together
with input bounds. Integration is fixed-step classical RK4 (deterministic,
adequate for smooth kinetics at the sampling periods used here); data
collection adds clipped Gaussian process noise on top of the integrated
states.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrationDiverged, ShapeError

RK4_SUBSTEPS = 10


@dataclass(frozen=True)
class PlantModel:
    """Nonlinear plant ``x' = rhs(x, u, p)`` with box input bounds."""

    state_dim: int
    input_dim: int
    disturbance_dim: int
    rhs: callable
    input_lower: np.ndarray
    input_upper: np.ndarray
    parameter_set_name: str = "unnamed"

    def __post_init__(self):
        object.__setattr__(self, "input_lower", np.asarray(self.input_lower, dtype=float))
        object.__setattr__(self, "input_upper", np.asarray(self.input_upper, dtype=float))
        if self.state_dim < 1 or self.input_dim < 1 or self.disturbance_dim < 0:
            raise ConfigError("plant dimensions must be positive (disturbances non-negative)")
        if self.input_lower.shape != (self.input_dim,) or self.input_upper.shape != (self.input_dim,):
            raise ConfigError("input bounds must have shape (input_dim,)")
        if np.any(self.input_lower > self.input_upper):
            raise ConfigError("input_lower exceeds input_upper")


@dataclass(frozen=True)
class ExcitationConfig:
    """Persistently exciting open-loop input signal.

    ``step_hold``: uniform draws within the input box, redrawn every
    ``hold_steps``, plus per-step Gaussian noise clipped back to bounds.
    ``sine_wave``: per-channel sine mean (random frequency from
    ``omega_range``, random phase unless given), sampled and held every
    ``hold_steps``, plus the same noise treatment.
    """

    kind: str  # "step_hold" | "sine_wave"
    hold_steps: int
    noise_std: np.ndarray
    seed: int
    amplitude: np.ndarray | None = None
    bias: np.ndarray | None = None
    omega_range: tuple = ()
    phase: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("step_hold", "sine_wave"):
            raise ConfigError(f"unknown excitation kind '{self.kind}'")
        if self.hold_steps < 1:
            raise ConfigError("hold_steps must be a positive integer")
        object.__setattr__(self, "noise_std", np.asarray(self.noise_std, dtype=float))
        if np.any(self.noise_std < 0):
            raise ConfigError("noise_std must be non-negative")
        if self.kind == "sine_wave":
            if self.amplitude is None or self.bias is None or len(self.omega_range) != 2:
                raise ConfigError("sine_wave needs amplitude, bias and omega_range")
            object.__setattr__(self, "amplitude", np.asarray(self.amplitude, dtype=float))
            object.__setattr__(self, "bias", np.asarray(self.bias, dtype=float))
            if self.phase is not None:
                object.__setattr__(self, "phase", np.asarray(self.phase, dtype=float))


@dataclass(frozen=True)
class ProcessNoiseConfig:
    """Additive state noise, clipped to ``[-clip_abs, clip_abs]`` per channel."""

    std: np.ndarray
    clip_abs: float = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "std", np.asarray(self.std, dtype=float))
        if np.any(self.std < 0) or self.clip_abs < 0:
            raise ConfigError("noise std and clip_abs must be non-negative")


def _check_vector(name, v, dim):
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise ShapeError(f"{name} has shape {v.shape}, expected ({dim},)")
    if not np.all(np.isfinite(v)):
        raise ShapeError(f"{name} contains non-finite values")
    return v


def integrate_step(model, x, u, p, dt, substeps=RK4_SUBSTEPS):
    """Advance the plant one sampling period with classical RK4.

    The input and disturbance are held constant over the period
    (zero-order hold). Raises :class:`IntegrationDiverged` naming the
    first non-finite state channel.
    """
    x = _check_vector("state", x, model.state_dim)
    u = _check_vector("input", u, model.input_dim)
    if model.disturbance_dim:
        p = _check_vector("disturbance", p, model.disturbance_dim)
    else:
        p = np.zeros(0)
    h = float(dt) / substeps
    for _ in range(substeps):
        k1 = model.rhs(x, u, p)
        k2 = model.rhs(x + 0.5 * h * k1, u, p)
        k3 = model.rhs(x + 0.5 * h * k2, u, p)
        k4 = model.rhs(x + h * k3, u, p)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bad = ~np.isfinite(x)
    if np.any(bad):
        ch = int(np.argmax(bad))
        raise IntegrationDiverged(f"integration diverged in state channel {ch}", channel=ch)
    return x


def simulate(model, x0, inputs, disturbances=None, dt=1.0, noise=None, substeps=RK4_SUBSTEPS):
    """Simulate ``L`` sampling periods; returns ``L + 1`` states.

    Process noise (when configured) is drawn from the config's own seeded
    generator, clipped per channel, and added to each integrated state,
    so repeated calls are bit-identical.
    """
    x0 = _check_vector("x0", x0, model.state_dim)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float)) if len(inputs) else np.zeros((0, model.input_dim))
    L = inputs.shape[0]
    if disturbances is None:
        disturbances = np.zeros((L, model.disturbance_dim))
    disturbances = np.asarray(disturbances, dtype=float).reshape(L, model.disturbance_dim)
    if inputs.shape != (L, model.input_dim):
        raise ShapeError(f"inputs have shape {inputs.shape}, expected ({L}, {model.input_dim})")

    rng = np.random.default_rng(noise.seed) if noise is not None else None
    states = np.empty((L + 1, model.state_dim))
    states[0] = x0
    x = x0
    for k in range(L):
        try:
            x = integrate_step(model, x, inputs[k], disturbances[k], dt, substeps=substeps)
        except IntegrationDiverged as err:
            raise IntegrationDiverged(f"{err} (at step {k})", channel=err.channel, step=k) from None
        if rng is not None:
            eps = rng.normal(0.0, 1.0, size=model.state_dim) * noise.std
            x = x + np.clip(eps, -noise.clip_abs, noise.clip_abs)
        states[k + 1] = x
    return states


def generate_excitation(cfg, model, length):
    """Generate an open-loop excitation input sequence of the given length."""
    if length < 1:
        raise ConfigError("excitation length must be >= 1")
    lo, hi = model.input_lower, model.input_upper
    m = model.input_dim
    if cfg.noise_std.shape != (m,):
        raise ConfigError(f"noise_std must have shape ({m},)")
    rng = np.random.default_rng(cfg.seed)
    n_blocks = int(np.ceil(length / cfg.hold_steps))

    if cfg.kind == "step_hold":
        levels = rng.uniform(lo, hi, size=(n_blocks, m))
    else:
        A, B = cfg.amplitude, cfg.bias
        if A.shape != (m,) or B.shape != (m,):
            raise ConfigError(f"amplitude/bias must have shape ({m},)")
        if np.any(B + A > hi) or np.any(B - A < lo):
            raise ConfigError("sine wave bias +/- amplitude violates the input bounds")
        omega = rng.uniform(cfg.omega_range[0], cfg.omega_range[1], size=m)
        phase = cfg.phase if cfg.phase is not None else rng.uniform(0.0, 2.0 * np.pi, size=m)
        # sine evaluated at each hold boundary, held constant in between
        ks = (np.arange(n_blocks) * cfg.hold_steps)[:, None]
        levels = A * np.sin(omega * ks + phase) + B

    means = np.repeat(levels, cfg.hold_steps, axis=0)[:length]
    noise = rng.normal(0.0, 1.0, size=(length, m)) * cfg.noise_std
    return np.clip(means + noise, lo, hi)


def export_trajectory_csv(path, dt, states, inputs, disturbances=None):
    """Write a trajectory as CSV with header ``t, x1..xn, u1..um, p1..pp``.

    One row per sample k = 0..L-1 (the state at k paired with the input
    applied over [k, k+1)); a trailing final state is not written.
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    L, m = inputs.shape
    n = states.shape[1]
    if disturbances is None:
        disturbances = np.zeros((L, 0))
    disturbances = np.asarray(disturbances, dtype=float)
    p = disturbances.shape[1]
    header = (["t"] + [f"x{i + 1}" for i in range(n)]
              + [f"u{i + 1}" for i in range(m)] + [f"p{i + 1}" for i in range(p)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(L):
            row = [repr(k * dt)]
            row += [repr(v) for v in states[k]]
            row += [repr(v) for v in inputs[k]]
            row += [repr(v) for v in disturbances[k]]
            writer.writerow(row)


def read_trajectory_csv(path, state_dim, input_dim, disturbance_dim=0):
    """Read a trajectory written by :func:`export_trajectory_csv`."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    data = np.array(rows[1:], dtype=float)
    expected = 1 + state_dim + input_dim + disturbance_dim
    if data.shape[1] != expected:
        raise ConfigError(f"trajectory file has {data.shape[1]} columns, expected {expected}")
    t = data[:, 0]
    X = data[:, 1:1 + state_dim]
    U = data[:, 1 + state_dim:1 + state_dim + input_dim]
    P = data[:, 1 + state_dim + input_dim:]
    return t, X, U, P


def load_parameter_file(path):
    """Parse a ``name = value`` parameter file ('#' starts a comment)."""
    params = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'name = value'")
            name, value = (part.strip() for part in line.split("=", 1))
            try:
                params[name] = float(value)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: '{value}' is not a number") from None
    return params
