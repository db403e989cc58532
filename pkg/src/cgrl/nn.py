"""Dense neural-network kernels shared by every learned agent.

Pure functions over explicit float64 arrays: fixed-topology MLPs with
analytic backprop, numerically stable softmax, scaled dot-product
attention scores, and Adam.  No autograd and no GPU -- every network in
this project is desk-scale, so 64-bit precision is cheaper than chasing
drift.

All functions are deterministic and side-effect free; callers own their
parameter copies (optimizer state is single-writer by convention).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


class DimensionError(ValueError):
    """Input shape does not match the declared network topology."""


class NonFiniteGradientError(ValueError):
    """An update was rejected because a gradient tensor is not finite."""

    def __init__(self, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(f"non-finite gradient in tensor '{tensor_name}'")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_deriv(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # a is the already-computed activation of z; reused for tanh.
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Mlp:
    """A fully-connected network: weights[l] has shape (sizes[l+1], sizes[l])."""

    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    @classmethod
    def create(cls, sizes: list[int], activations: list[str] | None = None,
               rng: np.random.Generator | None = None) -> "Mlp":
        """Build a seeded network.

        Weights are uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
        Default activations: relu on hidden layers, linear on the output.
        """
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise DimensionError(f"invalid layer sizes {sizes}")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["linear"]
        if len(activations) != n_layers:
            raise DimensionError("one activation per layer required")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation '{a}'")
        rng = rng if rng is not None else np.random.default_rng(0)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(sizes), weights, biases, list(activations))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Composed affine+activation pass; accepts a vector or a batch of rows."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise DimensionError(
                f"input dimension {h.shape[-1]} != first layer size {self.in_dim}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _act(act, h @ w.T + b)
        return h[0] if single else h

    def gradient(self, x: np.ndarray, upstream: np.ndarray):
        """Backprop of (upstream . output) summed over the batch.

        Returns (weight_grads, bias_grads, input_grad).  Weight and bias
        grads are summed over batch rows; input_grad keeps per-row shape.
        """
        x = np.asarray(x, dtype=np.float64)
        upstream = np.asarray(upstream, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        g = upstream[None, :] if single else upstream
        if h.shape[1] != self.in_dim:
            raise DimensionError(
                f"input dimension {h.shape[1]} != first layer size {self.in_dim}")
        if g.shape != (h.shape[0], self.out_dim):
            raise DimensionError(
                f"upstream shape {g.shape} != ({h.shape[0]}, {self.out_dim})")

        pre, post = [], [h]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = post[-1] @ w.T + b
            pre.append(z)
            post.append(_act(act, z))

        w_grads = [np.empty_like(w) for w in self.weights]
        b_grads = [np.empty_like(b) for b in self.biases]
        delta = g
        for l in range(len(self.weights) - 1, -1, -1):
            delta = delta * _act_deriv(self.activations[l], pre[l], post[l + 1])
            w_grads[l] = delta.T @ post[l]
            b_grads[l] = delta.sum(axis=0)
            delta = delta @ self.weights[l]
        input_grad = delta[0] if single else delta
        return w_grads, b_grads, input_grad

    def copy(self) -> "Mlp":
        return Mlp(list(self.sizes), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], list(self.activations))

    def named_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        """Flat name->array view used for checkpointing and Adam."""
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def load_tensors(self, prefix: str, tensors: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            for attr, key in ((self.weights, f"{prefix}.w{i}"), (self.biases, f"{prefix}.b{i}")):
                arr = np.asarray(tensors[key], dtype=np.float64)
                if arr.shape != attr[i].shape:
                    raise DimensionError(
                        f"tensor '{key}' shape {arr.shape} != expected {attr[i].shape}")
                attr[i] = arr.copy()


@dataclass
class AdamState:
    """Per-tensor first/second moments keyed by tensor name."""

    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update over a dict of named tensors.

    Returns fresh arrays and a fresh state; inputs are left untouched.
    Raises NonFiniteGradientError (naming the tensor) before touching any
    state if a gradient contains NaN or inf.
    """
    for name in tensors:
        g = grads[name]
        if g.shape != tensors[name].shape:
            raise DimensionError(f"gradient shape mismatch for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    t = state.step_count + 1
    new_m, new_v, new_params = {}, {}, {}
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in tensors.items():
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = state.beta1 * (m if m is not None else 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * (v if v is not None else 0.0) + (1.0 - state.beta2) * g * g
        new_m[name] = m
        new_v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(state.learning_rate, state.beta1, state.beta2,
                          state.epsilon, t, new_m, new_v)
    return new_params, new_state


def softmax(scores: np.ndarray) -> np.ndarray:
    """Shift-stable softmax of a nonempty finite vector."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DimensionError("softmax requires a nonempty 1-D score vector")
    if not np.all(np.isfinite(s)):
        raise DimensionError("softmax scores must be finite")
    e = np.exp(s - s.max())
    return e / e.sum()


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise shift-stable softmax for batched training code."""
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def attention_scores(query: np.ndarray, keys: np.ndarray, d_s: int) -> np.ndarray:
    """Scaled dot-product attention weights of one query against key rows.

    Returns softmax(keys @ query / sqrt(d_s)): one probability per key row.
    """
    if d_s <= 0:
        raise DimensionError("identifier dimension must be positive")
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] == 0:
        raise DimensionError("keys must be a nonempty matrix of rows")
    if q.shape != (d_s,) or k.shape[1] != d_s:
        raise DimensionError(
            f"query length {q.shape} and key width {k.shape[1]} must equal d_s={d_s}")
    return softmax(k @ q / math.sqrt(d_s))
