"""Minimal feedforward-network stack used for the observable functions.

Everything is plain float64 numpy: forward pass, exact reverse-mode
gradients, and an Adam optimizer over a flat dict of parameter arrays.
The lifted-model training loop composes these pieces; nothing here knows
about Koopman matrices.
"""

from __future__ import annotations

import numpy as np

from .errors import OptimizerError, ShapeError, UsageError


class LiftingNetwork:
    """Fully connected network with ReLU hidden layers and a linear output.

    Weights are stored as ``weights[i]`` of shape ``(layer_sizes[i+1],
    layer_sizes[i])`` and biases as ``biases[i]`` of shape
    ``(layer_sizes[i+1],)``. ``forward`` accepts a single vector ``(d,)``
    or a batch ``(B, d)`` and returns the matching shape.
    """

    def __init__(self, layer_sizes, weights, biases):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2:
            raise ShapeError("network needs at least an input and an output layer")
        if len(weights) != len(layer_sizes) - 1 or len(biases) != len(layer_sizes) - 1:
            raise ShapeError("one weight/bias pair required per layer transition")
        for i, (w, b) in enumerate(zip(weights, biases)):
            expected = (layer_sizes[i + 1], layer_sizes[i])
            if w.shape != expected:
                raise ShapeError(f"weight {i} has shape {w.shape}, expected {expected}")
            if b.shape != (layer_sizes[i + 1],):
                raise ShapeError(f"bias {i} has shape {b.shape}, expected ({layer_sizes[i + 1]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {i} has non-finite parameters")
        self.layer_sizes = layer_sizes
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]

    @classmethod
    def initialize(cls, layer_sizes, rng):
        """He-style uniform init, scale sqrt(6/fan_in), zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(layer_sizes, weights, biases)

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self, prefix=""):
        """Live views of the parameter arrays, keyed ``W0, b0, W1, ...``."""
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}W{i}"] = self.weights[i]
            out[f"{prefix}b{i}"] = self.biases[i]
        return out

    def forward(self, v):
        out, _ = self.forward_cached(v)
        return out

    def forward_cached(self, v):
        """Forward pass returning the cache needed by :meth:`backward`."""
        v = np.asarray(v, dtype=float)
        single = v.ndim == 1
        h = v.reshape(1, -1) if single else v
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(
                f"input has trailing dimension {v.shape[-1] if v.ndim else 0}, "
                f"expected {self.input_dim}"
            )
        inputs = [h]
        preacts = []
        for i in range(self.n_layers):
            z = h @ self.weights[i].T + self.biases[i]
            preacts.append(z)
            h = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
            inputs.append(h)
        cache = {"inputs": inputs, "preacts": preacts, "single": single}
        return (h[0] if single else h), cache

    def backward(self, upstream, cache):
        """Exact reverse-mode gradients for a cached forward pass.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` uses the
        same keys as :meth:`params`. ReLU subgradient at 0 is taken as 0.
        """
        if cache is None:
            raise UsageError("backward requires the cache from forward_cached")
        upstream = np.asarray(upstream, dtype=float)
        if cache["single"]:
            upstream = upstream.reshape(1, -1)
        if upstream.shape != cache["inputs"][-1].shape:
            raise ShapeError(
                f"upstream gradient shape {upstream.shape} does not match "
                f"output shape {cache['inputs'][-1].shape}"
            )
        grads = {}
        g = upstream
        for i in reversed(range(self.n_layers)):
            gz = g if i == self.n_layers - 1 else g * (cache["preacts"][i] > 0.0)
            grads[f"W{i}"] = gz.T @ cache["inputs"][i]
            grads[f"b{i}"] = gz.sum(axis=0)
            g = gz @ self.weights[i]
        input_grad = g[0] if cache["single"] else g
        return grads, input_grad

    def copy(self):
        return LiftingNetwork(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


class AdamState:
    """Adam accumulators for a dict of parameter arrays."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(state, params, grads):
    """One Adam update with bias correction, applied in place.

    ``params`` and ``grads`` are dicts of congruent arrays. Returns
    ``(params, state)``. A non-finite gradient raises
    :class:`OptimizerError` naming the offending parameter.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter '{name}'", param_name=name)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
