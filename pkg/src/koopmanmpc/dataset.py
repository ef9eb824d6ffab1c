"""Trajectory datasets: normalization, windowing and batching.

A dataset holds the raw samples (x_k, u_k, p_k) with contiguous
train/validation/test splits, plus a per-channel normalizer fitted on
the training split only. Training consumes overlapping rollout windows
of H+1 states and H inputs in normalized units.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .plant import export_trajectory_csv, read_trajectory_csv

STD_FLOOR = 1e-8

# split proportions: 9000/1000/2000 of 12000
SPLIT_FRACTIONS = (0.75, 1.0 / 12.0, 1.0 / 6.0)


@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine map to zero mean, unit (population) std."""

    mean_x: np.ndarray
    std_x: np.ndarray
    mean_u: np.ndarray
    std_u: np.ndarray
    mean_p: np.ndarray
    std_p: np.ndarray

    def __post_init__(self):
        for name in ("std_x", "std_u", "std_p"):
            if np.any(getattr(self, name) <= 0):
                raise ConfigError(f"{name} must be strictly positive")

    @classmethod
    def identity(cls, n, m, p=0):
        return cls(np.zeros(n), np.ones(n), np.zeros(m), np.ones(m), np.zeros(p), np.ones(p))

    def normalize_x(self, x):
        return (np.asarray(x, dtype=float) - self.mean_x) / self.std_x

    def denormalize_x(self, x):
        return np.asarray(x, dtype=float) * self.std_x + self.mean_x

    def normalize_u(self, u):
        return (np.asarray(u, dtype=float) - self.mean_u) / self.std_u

    def denormalize_u(self, u):
        return np.asarray(u, dtype=float) * self.std_u + self.mean_u

    def normalize_p(self, p):
        if self.mean_p.size == 0:
            return np.zeros(np.shape(p)[:-1] + (0,)) if np.ndim(p) else np.zeros(0)
        return (np.asarray(p, dtype=float) - self.mean_p) / self.std_p

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("mean_x", "std_x", "mean_u", "std_u", "mean_p", "std_p")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass
class TrajectoryDataset:
    """Time-indexed samples (x_k, u_k, p_k) with contiguous splits."""

    states: np.ndarray        # (L, n)
    inputs: np.ndarray        # (L, m)
    disturbances: np.ndarray  # (L, p)
    dt: float
    split_bounds: tuple       # (train_end, val_end); test runs to L
    source_seed: int = 0
    normalizer: Normalizer | None = field(default=None)

    def __post_init__(self):
        L = self.states.shape[0]
        if self.inputs.shape[0] != L or self.disturbances.shape[0] != L:
            raise ShapeError("states, inputs and disturbances must have equal length")
        t_end, v_end = self.split_bounds
        if not (0 < t_end < v_end < L):
            raise ConfigError(
                f"split bounds {self.split_bounds} do not define ordered non-empty "
                f"train/validation/test ranges within {L} samples"
            )

    @property
    def n_samples(self):
        return self.states.shape[0]

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    @property
    def disturbance_dim(self):
        return self.disturbances.shape[1]

    def split_range(self, split):
        t_end, v_end = self.split_bounds
        ranges = {"train": (0, t_end), "validation": (t_end, v_end), "test": (v_end, self.n_samples)}
        if split not in ranges:
            raise ConfigError(f"unknown split '{split}'")
        return ranges[split]


def default_split_bounds(n_samples):
    """Contiguous train/validation/test boundaries at the 9:1:2 proportions."""
    t_end = int(round(n_samples * SPLIT_FRACTIONS[0]))
    v_end = t_end + int(round(n_samples * SPLIT_FRACTIONS[1]))
    if not (0 < t_end < v_end < n_samples):
        raise ConfigError(f"{n_samples} samples are too few to split")
    return (t_end, v_end)


def fit_normalizer(dataset):
    """Per-channel mean/std over the training split (population convention).

    Constant channels are floored to ``STD_FLOOR`` with a warning rather
    than rejected.
    """
    t_end, _ = dataset.split_bounds
    if t_end < 1:
        raise ConfigError("training split is empty")

    def stats(arr, label):
        if arr.shape[1] == 0:
            return np.zeros(0), np.ones(0)
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)  # population (1/n) convention
        degenerate = std < STD_FLOOR
        if np.any(degenerate):
            warnings.warn(
                f"degenerate {label} channel(s) {np.flatnonzero(degenerate).tolist()}: "
                f"std floored to {STD_FLOOR}",
                stacklevel=2,
            )
            std = np.where(degenerate, STD_FLOOR, std)
        return mean, std

    mean_x, std_x = stats(dataset.states[:t_end], "state")
    mean_u, std_u = stats(dataset.inputs[:t_end], "input")
    mean_p, std_p = stats(dataset.disturbances[:t_end], "disturbance")
    return Normalizer(mean_x, std_x, mean_u, std_u, mean_p, std_p)


@dataclass(frozen=True)
class RolloutWindow:
    """Normalized views of x_{k..k+H}, u_{k..k+H-1}, p_{k..k+H-1}."""

    start: int
    horizon: int
    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray


class WindowSet:
    """All stride-1 rollout windows of one split, in normalized units."""

    def __init__(self, dataset, split, horizon):
        if dataset.normalizer is None:
            raise ConfigError("dataset has no normalizer; call fit_normalizer first")
        lo, hi = dataset.split_range(split)
        length = hi - lo
        if length < horizon + 1:
            raise ConfigError(
                f"split '{split}' has {length} samples, too short for horizon {horizon}"
            )
        norm = dataset.normalizer
        self.split = split
        self.horizon = horizon
        self.starts = np.arange(lo, hi - horizon)
        self.states = norm.normalize_x(dataset.states[lo:hi])
        self.inputs = norm.normalize_u(dataset.inputs[lo:hi])
        self.disturbances = norm.normalize_p(dataset.disturbances[lo:hi])
        self._lo = lo

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, i):
        k = self.starts[i] - self._lo
        H = self.horizon
        return RolloutWindow(
            start=int(self.starts[i]),
            horizon=H,
            states=self.states[k:k + H + 1],
            inputs=self.inputs[k:k + H],
            disturbances=self.disturbances[k:k + H],
        )

    def gather(self, indices):
        """Stack windows ``indices`` into (B, H+1, n), (B, H, m), (B, H, p)."""
        idx = np.asarray(indices, dtype=int)
        k = self.starts[idx] - self._lo
        H = self.horizon
        offs_x = k[:, None] + np.arange(H + 1)[None, :]
        offs_u = k[:, None] + np.arange(H)[None, :]
        return self.states[offs_x], self.inputs[offs_u], self.disturbances[offs_u]


def make_windows(dataset, horizon, splits=("train", "validation", "test")):
    """One :class:`WindowSet` per requested split (stride-1 overlap)."""
    return {split: WindowSet(dataset, split, horizon) for split in splits}


def batch_iterator(windows, batch_size, seed):
    """Yield window batches (as index arrays) forever, reshuffling at
    every epoch boundary.

    ``windows`` is a :class:`WindowSet` (or a window count); pass a batch
    to :meth:`WindowSet.gather` to materialize the stacked arrays. Each
    epoch covers every window exactly once; the final partial batch is
    retained. Identical seeds give identical batch streams.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n_windows = windows if isinstance(windows, int) else len(windows)
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n_windows)
        for i in range(0, n_windows, batch_size):
            yield order[i:i + batch_size]


def batches_per_epoch(n_windows, batch_size):
    return int(np.ceil(n_windows / batch_size))


def save_dataset(dataset, csv_path, meta_path):
    """Persist as the plant CSV format plus a small JSON metadata file."""
    export_trajectory_csv(csv_path, dataset.dt, dataset.states, dataset.inputs,
                          dataset.disturbances)
    meta = {
        "dt": dataset.dt,
        "split_bounds": list(dataset.split_bounds),
        "source_seed": dataset.source_seed,
        "state_dim": dataset.state_dim,
        "input_dim": dataset.input_dim,
        "disturbance_dim": dataset.disturbance_dim,
    }
    if dataset.normalizer is not None:
        meta["normalizer"] = dataset.normalizer.to_dict()
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(csv_path, meta_path):
    with open(meta_path) as fh:
        meta = json.load(fh)
    _, X, U, P = read_trajectory_csv(csv_path, meta["state_dim"], meta["input_dim"],
                                     meta["disturbance_dim"])
    normalizer = Normalizer.from_dict(meta["normalizer"]) if "normalizer" in meta else None
    return TrajectoryDataset(
        states=X, inputs=U, disturbances=P, dt=meta["dt"],
        split_bounds=tuple(meta["split_bounds"]), source_seed=meta["source_seed"],
        normalizer=normalizer,
    )
