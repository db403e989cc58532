"""Which configuration space does this state belong to?

The learned variant is an attention classifier: an encoder maps the
observation to a query against the fixed node identifier matrix, and the
softmax over scaled dot products is the per-node membership probability.
Only the encoder trains -- identifiers belong to the graph.  The oracle
variant wraps the environment's deterministic contact oracle and returns
one-hot probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .graph import ConfigGraph
from .nn import AdamState, Mlp, adam_step, softmax_rows


@dataclass
class LabelledStateSet:
    states: np.ndarray        # (n, obs_dim)
    labels: np.ndarray        # (n,) node ids
    split_fraction: float = 0.2

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.states.shape[0] != self.labels.shape[0]:
            raise ValueError("states and labels disagree on sample count")

    def save(self, path: str):
        checkpoint.save_container(path, {"kind": "labelled-states",
                                         "split_fraction": self.split_fraction},
                                  {"states": self.states,
                                   "labels": self.labels.astype(np.float64)})

    @classmethod
    def load(cls, path: str) -> "LabelledStateSet":
        meta, tensors = checkpoint.load_container(path)
        if meta.get("kind") != "labelled-states":
            raise ValueError(f"{path} is not a labelled-state file")
        return cls(tensors["states"], tensors["labels"].astype(np.int64),
                   meta["split_fraction"])


def collect_labelled_states(env, n: int, rng: np.random.Generator,
                            split_fraction: float = 0.2) -> LabelledStateSet:
    """Random resets plus random-action rollouts, oracle-labelled."""
    if n < 1:
        raise ValueError("need at least one state")
    states, labels = [], []
    while len(states) < n:
        s = env.reset(rng)
        states.append(env.observe(s))
        labels.append(env.contact_label(s))
        while len(states) < n:
            res = env.step(rng.uniform(-1.0, 1.0))
            states.append(env.observe(res.next_state))
            labels.append(res.config_label)
            if res.done:
                break
    return LabelledStateSet(np.array(states), np.array(labels), split_fraction)


class SelectorModel:
    def __init__(self, graph: ConfigGraph, mode: str = "learned",
                 encoder: Mlp | None = None, label_fn=None,
                 hidden=(64, 64), rng: np.random.Generator | None = None):
        if mode not in ("learned", "oracle"):
            raise ValueError(f"unknown selector mode '{mode}'")
        if mode == "oracle" and label_fn is None:
            raise ValueError("oracle mode needs the environment label function")
        self.graph = graph
        self.mode = mode
        self.label_fn = label_fn
        self.identifiers = graph.identifier_matrix()
        self.d_s = graph.identifier_dim
        self.encoder = encoder
        self._hidden = tuple(hidden)
        self._rng = rng

    def ensure_encoder(self, obs_dim: int):
        if self.encoder is None:
            rng = self._rng or np.random.default_rng()
            self.encoder = Mlp.create([obs_dim, *self._hidden, self.d_s], rng=rng)

    def probabilities(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if self.mode == "oracle":
            single = obs.ndim == 1
            rows = obs.reshape(1, -1) if single else obs
            out = np.zeros((rows.shape[0], self.graph.n_nodes))
            for i, row in enumerate(rows):
                out[i, int(self.label_fn(row))] = 1.0
            return out[0] if single else out
        self.ensure_encoder(obs.shape[-1])
        encoded = self.encoder.forward(obs)
        scores = encoded @ self.identifiers.T / np.sqrt(self.d_s)
        if scores.ndim == 1:
            scores = scores.reshape(1, -1)
            return softmax_rows(scores)[0]
        return softmax_rows(scores)

    def predict(self, obs: np.ndarray):
        """(label, probability vector); ties break toward the lowest id."""
        probs = self.probabilities(obs)
        label = int(np.argmax(probs, axis=-1)) if probs.ndim == 1 \
            else np.argmax(probs, axis=-1)
        return label, probs

    def accuracy(self, states: np.ndarray, labels: np.ndarray) -> float:
        pred, _ = self.predict(states)
        return float(np.mean(pred == np.asarray(labels)))

    def named_tensors(self, prefix: str = "selector") -> dict:
        if self.encoder is None:
            return {}
        return self.encoder.named_tensors(prefix)

    def load_tensors(self, prefix: str, tensors: dict):
        sizes_known = any(k.startswith(f"{prefix}.") for k in tensors)
        if not sizes_known:
            return
        first = tensors[f"{prefix}.w0"]
        self.ensure_encoder(first.shape[1])
        self.encoder.load_tensors(prefix, tensors)


@dataclass
class SelectorTrainConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    stop_at_val_acc: float | None = None


@dataclass
class SelectorTrainReport:
    train_acc: float
    val_acc: float
    epochs_run: int
    losses: list = field(default_factory=list)


def selector_train(model: SelectorModel, data: LabelledStateSet,
                   config: SelectorTrainConfig | None = None) -> SelectorTrainReport:
    """Cross-entropy on attention probabilities against one-hot labels."""
    if model.mode != "learned":
        raise ValueError("only learned selectors train")
    config = config or SelectorTrainConfig()
    classes, counts = np.unique(data.labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, got counts "
                         f"{dict(zip(classes.tolist(), counts.tolist()))}")

    rng = np.random.default_rng(config.seed)
    n = data.states.shape[0]
    perm = rng.permutation(n)
    n_val = int(round(data.split_fraction * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    model.ensure_encoder(data.states.shape[1])

    ident = model.identifiers
    scale = 1.0 / np.sqrt(model.d_s)
    opt = AdamState(learning_rate=config.learning_rate)
    losses = []
    epochs_run = 0
    for _ in range(config.epochs):
        epochs_run += 1
        order = rng.permutation(train_idx)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = data.states[idx]
            y = data.labels[idx]
            encoded = model.encoder.forward(x)
            probs = softmax_rows(encoded @ ident.T * scale)
            picked = probs[np.arange(len(idx)), y]
            losses.append(float(-np.mean(np.log(picked + 1e-12))))
            grad_scores = probs.copy()
            grad_scores[np.arange(len(idx)), y] -= 1.0
            upstream = grad_scores @ ident * (scale / len(idx))
            w_grads, b_grads, _ = model.encoder.gradient(x, upstream)
            grads = {}
            for i, g in enumerate(w_grads):
                grads[f"enc.w{i}"] = g
            for i, g in enumerate(b_grads):
                grads[f"enc.b{i}"] = g
            new, opt = adam_step(model.encoder.named_tensors("enc"), grads, opt)
            model.encoder.load_tensors("enc", new)
        if config.stop_at_val_acc is not None and len(val_idx):
            if model.accuracy(data.states[val_idx], data.labels[val_idx]) \
                    >= config.stop_at_val_acc:
                break

    train_acc = model.accuracy(data.states[train_idx], data.labels[train_idx])
    val_acc = model.accuracy(data.states[val_idx], data.labels[val_idx]) \
        if len(val_idx) else float("nan")
    return SelectorTrainReport(train_acc, val_acc, epochs_run, losses)
