"""Iterative convex MPC on a lifted model with a nonlinear input channel.

Each sampling instant solves a short sequence of box QPs: the nonlinear
input-channel term is frozen along the previous iterate's trajectory
(the full nonlinear model rolled out under the previous input sequence),
the remaining affine dynamics are condensed, and the QP optimizer
becomes the next iterate. The first input of the final iterate is
applied. Warm starting shifts the previous instant's final sequence by
one step and repeats its last element.

The controller works in normalized units throughout and denormalizes
only the applied input (with a final clip to the raw bounds, so every
applied input is feasible exactly).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import qp
from .errors import ConfigError, ControlError, RolloutDiverged, ShapeError
from .plant import integrate_step

DEFAULT_QP_TOL = 1e-8
DEFAULT_QP_MAX_ITER = 20000


def _check_weight(name, W, dim, definite):
    W = np.asarray(W, dtype=float)
    if W.shape != (dim, dim):
        raise ConfigError(f"{name} has shape {W.shape}, expected ({dim}, {dim})")
    if np.max(np.abs(W - W.T)) > 1e-10:
        raise ConfigError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(W)
    if definite and eigs.min() <= 0:
        raise ConfigError(f"{name} must be positive definite")
    if not definite and eigs.min() < -1e-12:
        raise ConfigError(f"{name} must be positive semidefinite")
    return W


@dataclass
class MpcProblem:
    """Weights, horizon, iteration budget, set-points and bounds.

    ``Q`` and ``R`` weight *normalized* state/input deviations (the same
    units the model is trained in); set-points and bounds are raw units.
    ``stop_tol`` enables the optional early exit on the distance between
    consecutive iterates (disabled by default: the iteration always runs
    the full budget, matching fixed-l_max operation).
    """

    model: object
    Q: np.ndarray
    R: np.ndarray
    horizon: int
    l_max: int
    x_s: np.ndarray
    u_s: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray
    state_bounds: tuple | None = None
    state_penalty_weight: float = 0.0
    stop_tol: float | None = None
    qp_tol: float = DEFAULT_QP_TOL
    qp_max_iter: int = DEFAULT_QP_MAX_ITER

    def __post_init__(self):
        m = self.model
        self.Q = _check_weight("Q", self.Q, m.n, definite=True)
        self.R = _check_weight("R", self.R, m.m, definite=False)
        if self.horizon < 1 or self.l_max < 1:
            raise ConfigError("horizon and l_max must be >= 1")
        self.x_s = np.asarray(self.x_s, dtype=float)
        self.u_s = np.asarray(self.u_s, dtype=float)
        self.input_lower = np.asarray(self.input_lower, dtype=float)
        self.input_upper = np.asarray(self.input_upper, dtype=float)
        if self.x_s.shape != (m.n,) or self.u_s.shape != (m.m,):
            raise ConfigError("set-point dimensions do not match the model")
        if self.input_lower.shape != (m.m,) or self.input_upper.shape != (m.m,):
            raise ConfigError("input bound dimensions do not match the model")
        if np.any(self.input_lower > self.input_upper):
            raise ConfigError("input_lower exceeds input_upper")
        norm = m.normalizer
        self._x_s_n = norm.normalize_x(self.x_s)
        self._u_s_n = norm.normalize_u(self.u_s)
        self._lo_n = norm.normalize_u(self.input_lower)
        self._hi_n = norm.normalize_u(self.input_upper)
        self._state_bounds_n = None
        if self.state_bounds is not None:
            x_lo, x_hi = self.state_bounds
            self._state_bounds_n = (norm.normalize_x(np.asarray(x_lo, dtype=float)),
                                    norm.normalize_x(np.asarray(x_hi, dtype=float)))


@dataclass
class ControllerState:
    """Warm-start memory: the final iterate of the previous instant."""

    prev_sequence: np.ndarray | None = None  # (N, m), normalized units
    time_index: int = 0


@dataclass
class IterationTrace:
    """Per-iteration record of one control step."""

    input_sequences: list = field(default_factory=list)    # normalized (N, m)
    state_sequences: list = field(default_factory=list)    # lifted (N+1, N_lift)
    qp_objectives: list = field(default_factory=list)
    qp_iterations: list = field(default_factory=list)
    qp_statuses: list = field(default_factory=list)
    iterate_distances: list = field(default_factory=list)  # ||u^[l] - u^[l-1]||_2

    def __len__(self):
        return len(self.input_sequences)


def warm_start(problem, state):
    """Initial input sequence u^[0] for the current instant (normalized).

    Shift-by-one of the stored previous solution with the final element
    repeated; at the first instant, the steady input replicated and
    clipped to bounds.
    """
    N = problem.horizon
    if state.prev_sequence is None:
        u0 = np.tile(np.clip(problem._u_s_n, problem._lo_n, problem._hi_n), (N, 1))
        return u0
    prev = state.prev_sequence
    if prev.shape != (N, problem.model.m):
        raise ShapeError(f"stored sequence has shape {prev.shape}, expected ({N}, {problem.model.m})")
    return np.vstack([prev[1:], prev[-1:]])


def _propagate_nonlinear(model, z0, U_n, P_n):
    """Roll the full lifted model under a fixed input sequence (normalized)."""
    N = U_n.shape[0]
    Z = np.empty((N + 1, model.N))
    Z[0] = z0
    for j in range(N):
        z_next = model.A @ Z[j] + model.B_u @ U_n[j] + model.B_p @ P_n[j]
        if model.phi is not None:
            xhat = model.C @ Z[j]
            z_next = z_next + model.B_phi @ model.phi.forward(
                np.concatenate([xhat, U_n[j], P_n[j]]))
        Z[j + 1] = z_next
    if not np.all(np.isfinite(Z)):
        raise RolloutDiverged("lifted rollout diverged during control")
    return Z


def _frozen_offsets(model, Z_prev, U_prev, P_n):
    """d_j = B_p p_j + B_phi phi(C z_j, u_j, p_j) along the previous iterate."""
    N = U_prev.shape[0]
    offsets = []
    for j in range(N):
        d = model.B_p @ P_n[j]
        if model.phi is not None:
            xhat = model.C @ Z_prev[j]
            d = d + model.B_phi @ model.phi.forward(
                np.concatenate([xhat, U_prev[j], P_n[j]]))
        offsets.append(d)
    return offsets


def iterate_once(problem, x_k, p_forecast, u_prev):
    """One convexification iteration: freeze, condense, solve.

    ``u_prev`` is the previous iterate (normalized (N, m)); returns the
    new sequence, the predicted lifted states consistent with the frozen
    affine model under the new inputs, and QP diagnostics.
    """
    model = problem.model
    N = problem.horizon
    norm = model.normalizer
    P_n = norm.normalize_p(np.asarray(p_forecast, dtype=float).reshape(-1, model.p)[:N])
    if P_n.shape[0] < N:
        raise ConfigError(f"disturbance forecast covers {P_n.shape[0]} steps, horizon needs {N}")
    z0 = model.psi.forward(norm.normalize_x(np.asarray(x_k, dtype=float)))

    try:
        Z_prev = _propagate_nonlinear(model, z0, u_prev, P_n)
    except RolloutDiverged as err:
        raise ControlError(f"previous-iterate rollout diverged: {err}") from None
    offsets = _frozen_offsets(model, Z_prev, u_prev, P_n)

    qp_problem = qp.condense(
        model, z0, offsets, problem.Q, problem.R, problem._x_s_n, problem._u_s_n,
        N, problem._lo_n, problem._hi_n,
        state_bounds=problem._state_bounds_n,
        state_penalty_weight=problem.state_penalty_weight,
    )
    sol = qp.solve(qp_problem, warm_start=u_prev.ravel(),
                   tol=problem.qp_tol, max_iter=problem.qp_max_iter)
    u_new = sol.U.reshape(N, model.m)

    Z_new = np.empty((N + 1, model.N))
    Z_new[0] = z0
    for j in range(N):
        Z_new[j + 1] = model.A @ Z_new[j] + model.B_u @ u_new[j] + offsets[j]

    diagnostics = {"objective": sol.objective, "iterations": sol.iterations,
                   "status": sol.status, "residual": sol.residual}
    return u_new, Z_new, diagnostics


def control_step(problem, state, x_k, p_forecast):
    """Run the full iteration budget and apply the first input.

    Returns ``(u_applied, new_state, trace)`` with ``u_applied`` in raw
    units, clipped to the raw bounds as the final operation.
    """
    u_prev = warm_start(problem, state)
    trace = IterationTrace()
    for _ in range(problem.l_max):
        u_new, Z_new, diag = iterate_once(problem, x_k, p_forecast, u_prev)
        dist = float(np.linalg.norm(u_new - u_prev))
        trace.input_sequences.append(u_new)
        trace.state_sequences.append(Z_new)
        trace.qp_objectives.append(diag["objective"])
        trace.qp_iterations.append(diag["iterations"])
        trace.qp_statuses.append(diag["status"])
        trace.iterate_distances.append(dist)
        u_prev = u_new
        if problem.stop_tol is not None and dist < problem.stop_tol:
            break
    new_state = ControllerState(prev_sequence=u_prev, time_index=state.time_index + 1)
    u_applied = problem.model.normalizer.denormalize_u(u_prev[0])
    u_applied = np.clip(u_applied, problem.input_lower, problem.input_upper)
    return u_applied, new_state, trace


@dataclass
class ClosedLoopLog:
    """Everything the metrics layer needs from one closed-loop run."""

    dt: float
    states: np.ndarray          # (steps+1, n) raw
    inputs: np.ndarray          # (steps, m) raw
    disturbances: np.ndarray    # (steps, p) raw
    rmse: np.ndarray            # (steps+1,) normalized RMSE to x_s
    qp_iterations: np.ndarray   # (steps,) summed over inner iterations
    mpc_iterations: np.ndarray  # (steps,) inner iterations used
    x_s: np.ndarray
    traces: list = field(default_factory=list, repr=False)


def normalized_rmse(x, x_s, std_x):
    """sqrt(mean over channels of ((x - x_s)/std)^2); rows of x if 2-D."""
    d = (np.asarray(x, dtype=float) - x_s) / std_x
    return np.sqrt(np.mean(d * d, axis=-1))


def run_closed_loop(problem, plant, x0, disturbances, steps, dt, noise=None,
                    keep_traces=False):
    """Alternate control steps and plant integration for ``steps`` periods.

    The disturbance trajectory must cover ``steps + horizon`` samples so
    the controller always sees a full forecast (the true future values:
    disturbances are assumed known). Plant process noise is off unless a
    config is supplied.
    """
    model = problem.model
    if plant.state_dim != model.n or plant.input_dim != model.m:
        raise ConfigError("plant dimensions do not match the model")
    disturbances = np.asarray(disturbances, dtype=float).reshape(-1, model.p)
    if disturbances.shape[0] < steps + problem.horizon:
        raise ConfigError(
            f"disturbance trajectory has {disturbances.shape[0]} samples; "
            f"{steps + problem.horizon} needed for the forecast window"
        )
    rng = np.random.default_rng(noise.seed) if noise is not None else None
    std_x = model.normalizer.std_x

    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((steps + 1, model.n))
    inputs = np.empty((steps, model.m))
    rmse = np.empty(steps + 1)
    qp_iters = np.empty(steps, dtype=int)
    mpc_iters = np.empty(steps, dtype=int)
    traces = []
    states[0] = x
    rmse[0] = normalized_rmse(x, problem.x_s, std_x)

    state = ControllerState()
    for k in range(steps):
        try:
            u, state, trace = control_step(problem, state, x, disturbances[k:k + problem.horizon])
        except (ControlError, RolloutDiverged) as err:
            raise ControlError(f"control failed at step {k}: {err}", step=k) from None
        x = integrate_step(plant, x, u, disturbances[k], dt)
        if rng is not None:
            eps = rng.normal(0.0, 1.0, size=plant.state_dim) * noise.std
            x = x + np.clip(eps, -noise.clip_abs, noise.clip_abs)
        inputs[k] = u
        states[k + 1] = x
        rmse[k + 1] = normalized_rmse(x, problem.x_s, std_x)
        qp_iters[k] = sum(trace.qp_iterations)
        mpc_iters[k] = len(trace)
        if keep_traces:
            traces.append(trace)

    return ClosedLoopLog(dt=dt, states=states, inputs=inputs,
                         disturbances=disturbances[:steps], rmse=rmse,
                         qp_iterations=qp_iters, mpc_iterations=mpc_iters,
                         x_s=problem.x_s.copy(), traces=traces)


def export_closed_loop_csv(log, path):
    """Write ``k, t, x1..xn, u1..um, p1..pp, rmse_k, qp_iters, mpc_iters``.

    Row k holds the state at instant k and the input applied over
    [k, k+1); the final state appears on the last row with empty input
    and iteration fields.
    """
    steps, n = log.inputs.shape[0], log.states.shape[1]
    m, p = log.inputs.shape[1], log.disturbances.shape[1]
    header = (["k", "t"] + [f"x{i + 1}" for i in range(n)]
              + [f"u{i + 1}" for i in range(m)] + [f"p{i + 1}" for i in range(p)]
              + ["rmse_k", "qp_iters", "mpc_iters"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(steps):
            row = [k, repr(k * log.dt)]
            row += [repr(v) for v in log.states[k]]
            row += [repr(v) for v in log.inputs[k]]
            row += [repr(v) for v in log.disturbances[k]]
            row += [repr(log.rmse[k]), int(log.qp_iterations[k]), int(log.mpc_iterations[k])]
            writer.writerow(row)
        row = [steps, repr(steps * log.dt)]
        row += [repr(v) for v in log.states[steps]]
        row += [""] * (m + p) + [repr(log.rmse[steps]), "", ""]
        writer.writerow(row)
