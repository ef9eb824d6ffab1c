"""Condensed box-constrained quadratic programs for the iterative MPC.

The predicted lifted states are eliminated, leaving a dense QP over the
stacked input sequence U = [u_0; ...; u_{N-1}] subject to box bounds
only. The solver is a monotone accelerated projected-gradient method
with gradient restart; it is dependency-free and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class StatePenalty:
    """Optional soft penalty ``weight * sum(hinge(G U + offset)^2)`` on
    predicted-output bound violations. Keeps the constraint set a box."""

    G: np.ndarray
    offset: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    weight: float

    def value(self, U):
        y = self.G @ U + self.offset
        viol = np.maximum(y - self.upper, 0.0) + np.maximum(self.lower - y, 0.0)
        return self.weight * float(viol @ viol)

    def gradient(self, U):
        y = self.G @ U + self.offset
        g = np.maximum(y - self.upper, 0.0) - np.maximum(self.lower - y, 0.0)
        return 2.0 * self.weight * (self.G.T @ g)


@dataclass
class QpProblem:
    """Dense strongly structured box QP: min 0.5 U'HU + g'U + const, lower <= U <= upper."""

    H: np.ndarray
    g: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    const: float = 0.0
    state_penalty: StatePenalty | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        d = self.g.shape[0]
        if self.H.shape != (d, d):
            raise ShapeError(f"H has shape {self.H.shape}, expected ({d}, {d})")
        if self.lower.shape != (d,) or self.upper.shape != (d,):
            raise ShapeError("bounds must match the decision dimension")
        if not np.all(np.isfinite(self.H)) or not np.all(np.isfinite(self.g)):
            raise ShapeError("QP data contains non-finite entries")
        asym = np.max(np.abs(self.H - self.H.T)) if d else 0.0
        if asym > 1e-10:
            raise ShapeError(f"H is not symmetric (max asymmetry {asym:.3e})")
        if d and np.linalg.eigvalsh(self.H).min() < -1e-8:
            raise ShapeError("H is not positive semidefinite up to round-off")
        if np.any(self.lower > self.upper):
            raise ShapeError("lower bound exceeds upper bound")

    @property
    def dim(self):
        return self.g.shape[0]

    def objective(self, U):
        val = 0.5 * float(U @ (self.H @ U)) + float(self.g @ U) + self.const
        if self.state_penalty is not None:
            val += self.state_penalty.value(U)
        return val

    def gradient(self, U):
        grad = self.H @ U + self.g
        if self.state_penalty is not None:
            grad = grad + self.state_penalty.gradient(U)
        return grad

    def project(self, U):
        return np.clip(U, self.lower, self.upper)

    def dump_csv(self, path_prefix):
        """Debug dump of the dense data for cross-checks with external solvers."""
        np.savetxt(f"{path_prefix}_H.csv", self.H, delimiter=",")
        np.savetxt(f"{path_prefix}_g.csv", self.g, delimiter=",")
        np.savetxt(
            f"{path_prefix}_bounds.csv",
            np.column_stack([self.lower, self.upper]),
            delimiter=",",
            header="lower,upper",
        )


@dataclass
class QpSolution:
    U: np.ndarray
    objective: float
    iterations: int
    status: str  # "Converged" or "MaxIter"
    residual: float
    objective_history: list = field(default_factory=list, repr=False)


def _power_method_norm(M, iters=60):
    """Deterministic largest-eigenvalue estimate for a symmetric PSD matrix."""
    d = M.shape[0]
    if d == 0:
        return 0.0
    v = np.ones(d) / np.sqrt(d)
    lam = 0.0
    for _ in range(iters):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam = float(v @ (M @ v))
    return lam


def _lipschitz_bound(problem):
    L = _power_method_norm(problem.H)
    pen = problem.state_penalty
    if pen is not None:
        L += 2.0 * pen.weight * _power_method_norm(pen.G.T @ pen.G)
    # power iteration approaches the norm from below; pad for safety
    return 1.1 * L


def solve(problem, warm_start=None, tol=1e-8, max_iter=20000):
    """Solve a box QP with monotone accelerated projected gradient + restart.

    Terminates when the projected-gradient residual
    ``||U - P(U - grad f(U))||_inf`` drops below ``tol``, checking the
    starting point first so a warm start at the optimum returns
    immediately. Returns the best feasible iterate found; hitting
    ``max_iter`` is reported via ``status`` rather than raised.
    """
    if warm_start is not None:
        x = problem.project(np.asarray(warm_start, dtype=float).copy())
    else:
        x = problem.project(np.zeros(problem.dim))

    fx = problem.objective(x)
    history = [fx]
    resid = float(np.max(np.abs(x - problem.project(x - problem.gradient(x))), initial=0.0))
    if resid < tol:
        return QpSolution(x, fx, 0, "Converged", resid, history)

    L = max(_lipschitz_bound(problem), 1e-12)
    step = 1.0 / L
    y = x.copy()
    theta = 1.0
    x_prev = x.copy()

    for it in range(1, max_iter + 1):
        grad_y = problem.gradient(y)
        z = problem.project(y - step * grad_y)
        fz = problem.objective(z)
        # monotone variant: never let the tracked iterate get worse
        if fz <= fx:
            x_new, fx_new = z, fz
        else:
            x_new, fx_new = x, fx
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        y = x_new + (theta / theta_new) * (z - x_new) + ((theta - 1.0) / theta_new) * (x_new - x_prev)
        # gradient restart: kill momentum when it points uphill
        if float(grad_y @ (z - x_prev)) > 0.0:
            theta_new = 1.0
            y = x_new.copy()
        x_prev = x_new
        x, fx = x_new, fx_new
        theta = theta_new
        history.append(fx)
        resid = float(np.max(np.abs(x - problem.project(x - problem.gradient(x)))))
        if resid < tol:
            return QpSolution(x, fx, it, "Converged", resid, history)

    return QpSolution(x, fx, max_iter, "MaxIter", resid, history)


def condense(model, z0, offsets, Q, R, x_s, u_s, horizon, lower, upper,
             state_bounds=None, state_penalty_weight=0.0):
    """Condense N steps of the frozen-offset lifted dynamics into a box QP.

    The dynamics ``z_{j+1} = A z_j + B_u u_j + d_j`` (with ``d_j`` the
    per-step frozen constants) are substituted into the tracking cost

        sum_{j=1..N} ||C z_j - x_s||^2_Q  +  sum_{j=0..N-1} ||u_j - u_s||^2_R

    yielding ``0.5 U'HU + g'U + c`` over ``U = [u_0; ...; u_{N-1}]``. All
    quantities are expected in the model's internal (normalized) units.
    ``model`` only needs attributes ``A``, ``B_u`` and ``C``.
    """
    A, Bu, C = model.A, model.B_u, model.C
    N_l = A.shape[0]
    n = C.shape[0]
    m = Bu.shape[1]
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (N_l,):
        raise ShapeError(f"z0 has shape {z0.shape}, expected ({N_l},)")
    if len(offsets) != horizon:
        raise ShapeError(f"{len(offsets)} offsets supplied for horizon {horizon}")
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if Q.shape != (n, n) or R.shape != (m, m):
        raise ShapeError("Q/R dimensions do not match the model outputs/inputs")
    x_s = np.asarray(x_s, dtype=float)
    u_s = np.asarray(u_s, dtype=float)
    if x_s.shape != (n,) or u_s.shape != (m,):
        raise ShapeError("set-point dimensions do not match the model")

    # free response under U = 0: s_{j+1} = A s_j + d_j
    s = np.empty((horizon + 1, N_l))
    s[0] = z0
    for j in range(horizon):
        s[j + 1] = A @ s[j] + offsets[j]

    # input-to-output maps M_k = C A^k B_u, k = 0..N-1
    M = np.empty((horizon, n, m))
    Ak_Bu = Bu.copy()
    for k in range(horizon):
        M[k] = C @ Ak_Bu
        if k + 1 < horizon:
            Ak_Bu = A @ Ak_Bu

    G = np.zeros((horizon * n, horizon * m))
    b = np.empty(horizon * n)
    for j in range(1, horizon + 1):
        row = slice((j - 1) * n, j * n)
        b[row] = C @ s[j] - x_s
        for i in range(j):
            G[row, i * m:(i + 1) * m] = M[j - 1 - i]

    Qbar = np.kron(np.eye(horizon), Q)
    Rbar = np.kron(np.eye(horizon), R)
    GtQ = G.T @ Qbar
    H = 2.0 * (GtQ @ G + Rbar)
    H = 0.5 * (H + H.T)
    Us = np.tile(u_s, horizon)
    g = 2.0 * (GtQ @ b) - 2.0 * (Rbar @ Us)
    c = float(b @ (Qbar @ b)) + float(Us @ (Rbar @ Us))

    if not np.all(np.isfinite(H)) or not np.all(np.isfinite(g)):
        raise ShapeError("condensation produced non-finite data")

    penalty = None
    if state_bounds is not None and state_penalty_weight > 0.0:
        x_lo, x_hi = state_bounds
        penalty = StatePenalty(
            G=G,
            offset=b + np.tile(x_s, horizon),
            lower=np.tile(np.asarray(x_lo, dtype=float), horizon),
            upper=np.tile(np.asarray(x_hi, dtype=float), horizon),
            weight=float(state_penalty_weight),
        )

    return QpProblem(
        H=H,
        g=g,
        lower=np.tile(np.asarray(lower, dtype=float), horizon),
        upper=np.tile(np.asarray(upper, dtype=float), horizon),
        const=c,
        state_penalty=penalty,
    )
