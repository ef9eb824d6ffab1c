"""Lifted linear models with learned observables and nonlinear input lifting.

Two variants share one code path:

* ``dkoia`` — the input-augmented model. The state is lifted by a network
  ``psi``; the input enters through ``B_u u + B_p p`` plus a learned
  nonlinear channel ``B_phi phi(x_hat, u, p)`` whose state argument is the
  *decoded prediction* ``C z``, both during training rollouts and control.
* ``dko`` — the baseline: identical except the nonlinear input channel is
  absent (``M = 0``).

All internal arithmetic is in normalized units; the public prediction
APIs accept and return raw units through the embedded normalizer.
Training minimizes the multi-step prediction error

    mean over windows, sum over j = 0..H of ||x_hat_j - x_j||^2

with full backpropagation through the H-step recursion (including the
dependence of phi on the decoded predictions), plus an optional L2
penalty on the network weights and the A/B matrices (not biases, not C).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import Normalizer, batch_iterator, batches_per_epoch, make_windows
from .errors import ConfigError, RolloutDiverged, ShapeError, TrainingError
from .neuralnet import AdamState, LiftingNetwork, adam_step

MODEL_FORMAT_TAG = "koopmanmpc-model-v1"
VARIANTS = ("dkoia", "dko")


@dataclass
class TrainingConfig:
    """Hyperparameters for one training run."""

    horizon: int = 40
    epochs: int = 400
    batch_size: int = 128
    learning_rate: float = 1e-3
    l2: float = 0.1
    seed: int = 0
    lift_dim: int = 13
    aug_dim: int = 6
    psi_hidden: tuple = (32, 64, 32)
    phi_hidden: tuple = (16, 32, 16)

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigError("learning_rate must be positive and l2 non-negative")
        if self.lift_dim < 1 or self.aug_dim < 0:
            raise ConfigError("lift_dim must be >= 1 and aug_dim >= 0")


class KoopmanModel:
    """Matrices (A, B_u, B_p, B_phi, C), the lifting networks and the normalizer."""

    def __init__(self, A, B_u, B_p, B_phi, C, psi, phi, normalizer, variant):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{variant}'")
        self.A = np.asarray(A, dtype=float)
        self.B_u = np.asarray(B_u, dtype=float)
        self.B_p = np.asarray(B_p, dtype=float)
        self.B_phi = np.asarray(B_phi, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.psi = psi
        self.phi = phi
        self.normalizer = normalizer
        self.variant = variant
        self._audit_shapes()

    def _audit_shapes(self):
        N = self.A.shape[0]
        if self.A.shape != (N, N):
            raise ShapeError(f"A must be square, got {self.A.shape}")
        n = self.C.shape[0]
        if self.C.shape != (n, N):
            raise ShapeError(f"C has shape {self.C.shape}, expected ({n}, {N})")
        m = self.B_u.shape[1]
        p = self.B_p.shape[1]
        M = self.B_phi.shape[1]
        for name, mat in (("B_u", self.B_u), ("B_p", self.B_p), ("B_phi", self.B_phi)):
            if mat.shape[0] != N:
                raise ShapeError(f"{name} has {mat.shape[0]} rows, expected {N}")
        if self.psi.input_dim != n or self.psi.output_dim != N:
            raise ShapeError(
                f"psi maps {self.psi.input_dim}->{self.psi.output_dim}, expected {n}->{N}"
            )
        if self.variant == "dko":
            if M != 0 or self.phi is not None:
                raise ShapeError("dko variant must have M = 0 and no phi network")
        else:
            if self.phi is None:
                raise ShapeError("dkoia variant requires a phi network")
            if self.phi.input_dim != n + m + p or self.phi.output_dim != M:
                raise ShapeError(
                    f"phi maps {self.phi.input_dim}->{self.phi.output_dim}, "
                    f"expected {n + m + p}->{M}"
                )
        for name in ("A", "B_u", "B_p", "B_phi", "C"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeError(f"{name} contains non-finite entries")
        self.n, self.m, self.p = n, m, p
        self.N, self.M = N, M

    # --- public raw-unit prediction API -------------------------------

    def lift(self, x):
        """z = psi(normalize(x)) for a raw-unit state."""
        return self.psi.forward(self.normalizer.normalize_x(x))

    def lift_input(self, x, u, p=None):
        """Augmented input [u; p; phi(x, u, p)] in normalized units."""
        u_n = self.normalizer.normalize_u(u)
        p_n = self.normalizer.normalize_p(np.zeros(self.p) if p is None else p)
        if self.phi is None:
            return np.concatenate([u_n, p_n])
        x_n = self.normalizer.normalize_x(x)
        return np.concatenate([u_n, p_n, self.phi.forward(np.concatenate([x_n, u_n, p_n]))])

    def predict_one(self, z, x_hat, u, p=None):
        """One lifted step: z+ = A z + B_u u + B_p p + B_phi phi(x_hat, u, p).

        ``x_hat`` is the decoded prediction in raw units (the phi argument);
        ``u`` and ``p`` are raw-unit inputs; ``z`` stays in lifted space.
        """
        z = np.asarray(z, dtype=float)
        if z.shape != (self.N,):
            raise ShapeError(f"z has shape {z.shape}, expected ({self.N},)")
        lifted_in = self.lift_input(x_hat, u, p)
        B = np.concatenate([self.B_u, self.B_p, self.B_phi], axis=1)
        return self.A @ z + B @ lifted_in

    def decode(self, z):
        """Raw-unit decoded state C z (denormalized)."""
        return self.normalizer.denormalize_x(np.asarray(z, dtype=float) @ self.C.T)

    def rollout(self, x0, inputs, disturbances=None):
        """Predict x_hat_{0..H} (raw units) from x0 under the given inputs.

        ``x_hat_0`` is the decoded lift C psi(x0), not x0 itself — the
        autoencoding residual is part of the training loss.
        """
        inputs = np.asarray(inputs, dtype=float).reshape(-1, self.m)
        H = inputs.shape[0]
        if disturbances is None:
            disturbances = np.zeros((H, self.p))
        disturbances = np.asarray(disturbances, dtype=float).reshape(H, self.p)
        Xn = self.normalizer.normalize_x(np.asarray(x0, dtype=float))[None, None, :]
        Un = self.normalizer.normalize_u(inputs)[None]
        Pn = self.normalizer.normalize_p(disturbances)[None]
        xhat_n = _rollout_batch(self, Xn[:, 0], Un, Pn)
        return self.normalizer.denormalize_x(xhat_n[0])

    # --- parameter plumbing -------------------------------------------

    def params(self):
        """Live references to every trainable array."""
        out = {"A": self.A, "B_u": self.B_u, "B_p": self.B_p, "B_phi": self.B_phi, "C": self.C}
        out.update(self.psi.params("psi."))
        if self.phi is not None:
            out.update(self.phi.params("phi."))
        return out

    def copy(self):
        return KoopmanModel(
            self.A.copy(), self.B_u.copy(), self.B_p.copy(), self.B_phi.copy(),
            self.C.copy(), self.psi.copy(),
            self.phi.copy() if self.phi is not None else None,
            self.normalizer, self.variant,
        )


def initialize_model(variant, dims, config, normalizer, rng):
    """Fresh model: A = identity, B and C small random, seeded networks."""
    n, m, p = dims
    N, M = config.lift_dim, (config.aug_dim if variant == "dkoia" else 0)
    psi = LiftingNetwork.initialize([n, *config.psi_hidden, N], rng)
    phi = None
    if variant == "dkoia":
        if M < 1:
            raise ConfigError("dkoia requires aug_dim >= 1")
        phi = LiftingNetwork.initialize([n + m + p, *config.phi_hidden, M], rng)
    scale = 0.1
    A = np.eye(N)
    B_u = rng.normal(0.0, scale, size=(N, m))
    B_p = rng.normal(0.0, scale, size=(N, p))
    B_phi = rng.normal(0.0, scale, size=(N, M))
    C = rng.normal(0.0, scale, size=(n, N))
    return KoopmanModel(A, B_u, B_p, B_phi, C, psi, phi, normalizer, variant)


# --- batched normalized-unit rollout and loss -------------------------


def _rollout_batch(model, x0_n, Un, Pn):
    """Normalized rollout for a batch: x0_n (B,n), Un (B,H,m), Pn (B,H,p)
    -> decoded predictions (B, H+1, n). Raises on divergence."""
    B, H = Un.shape[0], Un.shape[1]
    z = model.psi.forward(x0_n)
    xhats = np.empty((B, H + 1, model.n))
    for j in range(H):
        xhat = z @ model.C.T
        xhats[:, j] = xhat
        z_next = z @ model.A.T + Un[:, j] @ model.B_u.T + Pn[:, j] @ model.B_p.T
        if model.phi is not None:
            phi_out = model.phi.forward(np.concatenate([xhat, Un[:, j], Pn[:, j]], axis=1))
            z_next = z_next + phi_out @ model.B_phi.T
        z = z_next
        if not np.all(np.isfinite(z)):
            raise RolloutDiverged(f"rollout diverged at step {j + 1}", step=j + 1)
    xhats[:, H] = z @ model.C.T
    return xhats


def _l2_params(model):
    keys = ["A", "B_u", "B_p", "B_phi"]
    keys += [f"psi.W{i}" for i in range(model.psi.n_layers)]
    if model.phi is not None:
        keys += [f"phi.W{i}" for i in range(model.phi.n_layers)]
    return keys


def loss_and_grads(model, Xn, Un, Pn, l2=0.0):
    """Training objective and exact gradients for one window batch.

    ``Xn`` is (B, H+1, n) of normalized states, ``Un``/(``Pn``) the
    normalized inputs/disturbances. Returns ``(loss, grads)`` where
    ``grads`` matches :meth:`KoopmanModel.params`. The data term is the
    batch mean of the horizon-summed squared prediction error; gradients
    flow through the full recursion, including phi's dependence on the
    decoded predictions.
    """
    B, H = Un.shape[0], Un.shape[1]
    A, Bu, Bp, Bphi, C = model.A, model.B_u, model.B_p, model.B_phi, model.C

    # forward with caches
    z0, psi_cache = model.psi.forward_cached(Xn[:, 0])
    Z = np.empty((H + 1, B, model.N))
    Z[0] = z0
    phi_caches = [None] * H
    Phi = np.empty((H, B, model.M))
    for j in range(H):
        xhat = Z[j] @ C.T
        z_next = Z[j] @ A.T + Un[:, j] @ Bu.T + Pn[:, j] @ Bp.T
        if model.phi is not None:
            phi_out, phi_caches[j] = model.phi.forward_cached(
                np.concatenate([xhat, Un[:, j], Pn[:, j]], axis=1))
            Phi[j] = phi_out
            z_next = z_next + phi_out @ Bphi.T
        Z[j + 1] = z_next

    E = Z @ C.T - np.swapaxes(Xn, 0, 1)  # (H+1, B, n) residuals
    data_loss = float(np.sum(E * E)) / B

    grads = {k: np.zeros_like(v) for k, v in model.params().items()}

    # reverse pass: gz carries dL/dZ_{j+1}
    gxhat = (2.0 / B) * E[H]
    grads["C"] += gxhat.T @ Z[H]
    gz = gxhat @ C
    for j in range(H - 1, -1, -1):
        # through the dynamics z_{j+1} = A z_j + B_u u_j + B_p p_j + B_phi phi_j
        grads["A"] += gz.T @ Z[j]
        grads["B_u"] += gz.T @ Un[:, j]
        grads["B_p"] += gz.T @ Pn[:, j]
        gxhat = (2.0 / B) * E[j]
        if model.phi is not None:
            grads["B_phi"] += gz.T @ Phi[j]
            pgrads, gin = model.phi.backward(gz @ Bphi, phi_caches[j])
            for k, v in pgrads.items():
                grads[f"phi.{k}"] += v
            gxhat = gxhat + gin[:, :model.n]
        grads["C"] += gxhat.T @ Z[j]
        gz = gz @ A + gxhat @ C
    psi_grads, _ = model.psi.backward(gz, psi_cache)
    for k, v in psi_grads.items():
        grads[f"psi.{k}"] += v

    total = data_loss
    if l2 > 0.0:
        params = model.params()
        for key in _l2_params(model):
            w = params[key]
            total += l2 * float(np.sum(w * w))
            grads[key] += 2.0 * l2 * w
    if not np.isfinite(total):
        raise TrainingError("loss is non-finite")
    return total, grads


def loss(model, window, l2=0.0):
    """Objective and gradients for a single normalized rollout window."""
    Xn = window.states[None]
    Un = window.inputs[None]
    Pn = window.disturbances[None]
    return loss_and_grads(model, Xn, Un, Pn, l2=l2)


def data_loss_batch(model, Xn, Un, Pn):
    """Horizon-summed squared error, batch mean (no penalty, no grads)."""
    xhats = _rollout_batch(model, Xn[:, 0], Un, Pn)
    E = xhats - Xn
    return float(np.sum(E * E)) / Xn.shape[0]


def _split_loss(model, window_set, chunk=1024):
    total, count = 0.0, 0
    for lo in range(0, len(window_set), chunk):
        idx = np.arange(lo, min(lo + chunk, len(window_set)))
        Xn, Un, Pn = window_set.gather(idx)
        total += data_loss_batch(model, Xn, Un, Pn) * len(idx)
        count += len(idx)
    return total / count


def train(variant, dataset, config, initial_model=None):
    """Adam-train a model on the dataset's training split.

    Records per-epoch train/validation data losses (penalty excluded from
    the recorded values; included in the optimized objective) and returns
    the parameters of the best-validation epoch::

        model, history = train("dkoia", dataset, TrainingConfig(...))

    ``history`` has keys "train", "validation" (per-epoch lists) and
    "best_epoch" (1-based; 0 when epochs == 0).
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}'")
    if dataset.normalizer is None:
        raise ConfigError("dataset has no normalizer; call fit_normalizer first")
    windows = make_windows(dataset, config.horizon, splits=("train", "validation"))
    train_ws, val_ws = windows["train"], windows["validation"]

    rng = np.random.default_rng(config.seed)
    model = initial_model if initial_model is not None else initialize_model(
        variant, (dataset.state_dim, dataset.input_dim, dataset.disturbance_dim),
        config, dataset.normalizer, rng)
    if model.variant != variant:
        raise ConfigError(f"initial model variant '{model.variant}' != requested '{variant}'")

    params = model.params()
    adam = AdamState(params, learning_rate=config.learning_rate)
    batches = batch_iterator(train_ws, config.batch_size, config.seed + 1)
    n_batches = batches_per_epoch(len(train_ws), config.batch_size)

    history = {"train": [], "validation": [], "best_epoch": 0}
    best_val = np.inf
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, config.epochs + 1):
        train_total = 0.0
        for _ in range(n_batches):
            idx = next(batches)
            Xn, Un, Pn = train_ws.gather(idx)
            try:
                batch_loss, grads = loss_and_grads(model, Xn, Un, Pn, l2=config.l2)
            except (TrainingError, RolloutDiverged) as err:
                raise TrainingError(f"training diverged at epoch {epoch}: {err}",
                                    epoch=epoch) from None
            adam_step(adam, params, grads)
            train_total += batch_loss * len(idx)
        train_loss = train_total / len(train_ws)
        val_loss = _split_loss(model, val_ws)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        history["train"].append(train_loss)
        history["validation"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            history["best_epoch"] = epoch
            best_params = {k: v.copy() for k, v in params.items()}

    for k, v in params.items():
        v[...] = best_params[k]
    return model, history


def evaluate(model, dataset, split, horizon):
    """Average per-step prediction error on one split.

    Per window: squared error summed over channels and the H+1 steps,
    divided by H+1; averaged over all stride-1 windows of the split.
    """
    ws = make_windows(dataset, horizon, splits=(split,))[split]
    return _split_loss(model, ws) / (horizon + 1)


# --- serialization -----------------------------------------------------


def save_model(model, path):
    """Single-file npz artifact with a format tag; round-trips exactly."""
    spec = {
        "variant": model.variant,
        "dims": [model.n, model.m, model.p, model.N, model.M],
        "psi_layers": model.psi.layer_sizes,
        "phi_layers": model.phi.layer_sizes if model.phi is not None else [],
    }
    arrays = {
        "A": model.A, "B_u": model.B_u, "B_p": model.B_p,
        "B_phi": model.B_phi, "C": model.C,
    }
    for i in range(model.psi.n_layers):
        arrays[f"psi_W{i}"] = model.psi.weights[i]
        arrays[f"psi_b{i}"] = model.psi.biases[i]
    if model.phi is not None:
        for i in range(model.phi.n_layers):
            arrays[f"phi_W{i}"] = model.phi.weights[i]
            arrays[f"phi_b{i}"] = model.phi.biases[i]
    for k, v in model.normalizer.to_dict().items():
        arrays[f"norm_{k}"] = np.asarray(v, dtype=float)
    np.savez(path, format_tag=MODEL_FORMAT_TAG, spec=json.dumps(spec, sort_keys=True),
             **arrays)


def load_model(path):
    """Load a model file, auditing the format tag and every matrix shape."""
    with np.load(path, allow_pickle=False) as data:
        tag = str(data["format_tag"])
        if tag != MODEL_FORMAT_TAG:
            raise ConfigError(f"unsupported model format '{tag}'")
        spec = json.loads(str(data["spec"]))
        n, m, p, N, M = spec["dims"]
        psi = LiftingNetwork(
            spec["psi_layers"],
            [data[f"psi_W{i}"] for i in range(len(spec["psi_layers"]) - 1)],
            [data[f"psi_b{i}"] for i in range(len(spec["psi_layers"]) - 1)],
        )
        phi = None
        if spec["phi_layers"]:
            phi = LiftingNetwork(
                spec["phi_layers"],
                [data[f"phi_W{i}"] for i in range(len(spec["phi_layers"]) - 1)],
                [data[f"phi_b{i}"] for i in range(len(spec["phi_layers"]) - 1)],
            )
        normalizer = Normalizer.from_dict(
            {k: data[f"norm_{k}"] for k in
             ("mean_x", "std_x", "mean_u", "std_u", "mean_p", "std_p")})
        model = KoopmanModel(data["A"], data["B_u"], data["B_p"], data["B_phi"],
                             data["C"], psi, phi, normalizer, spec["variant"])
    if [model.n, model.m, model.p, model.N, model.M] != [n, m, p, N, M]:
        raise ShapeError("model file dims are inconsistent with its matrices")
    return model
