"""Meta-controller that scores candidate configuration spaces.

A single encoder maps the observation to two query vectors.  Dotting them
against the node identifiers (scaled by 1/sqrt(d_s)) gives a mean head,
softmax-normalized into a preference distribution, and a log-std head whose
exponential drives exploration noise.  A separate critic network values
(observation, identifier) pairs and is trained by semi-Markov Q-learning on
option transitions: each option of length T emits T transitions whose tail
reward sums are bootstrapped with weight gamma**T_remaining.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .graph import ConfigGraph
from .nn import AdamState, Mlp, NonFiniteGradientError, adam_step, softmax
from .sac import _grad_dict

STD_FLOOR = 1e-3
RESIDUAL_FLOOR = 1e-3


@dataclass(frozen=True)
class OptionTransition:
    """One semi-Markov learning tuple extracted from an executed option.

    ``reward_sum`` is the undiscounted tail sum of rewards from ``s_start``
    to the option end; ``t_remaining`` counts the steps in that tail.
    """

    s_start: np.ndarray
    choice: int
    s_end: np.ndarray
    reward_sum: float
    t_remaining: int
    delta: bool
    start_node: int | None = None
    end_node: int | None = None


def build_option_transitions(states, choice: int, rewards, delta: bool,
                             start_node: int | None = None,
                             end_node: int | None = None):
    """Expand one executed option into its T semi-Markov transitions.

    ``states`` holds the T+1 observations seen while the option ran; the
    k-th transition starts at states[k] and carries the tail reward sum
    from step k onward.  All transitions share the endpoint and the
    episode-termination flag.
    """
    rewards = [float(r) for r in rewards]
    horizon = len(rewards)
    if horizon == 0:
        raise ValueError("option segment is empty")
    if len(states) != horizon + 1:
        raise ValueError(f"need {horizon + 1} states for {horizon} rewards, "
                         f"got {len(states)}")
    tails = np.cumsum(rewards[::-1])[::-1]
    end = np.asarray(states[horizon], dtype=float)
    return [OptionTransition(np.asarray(states[k], dtype=float), int(choice),
                             end, float(tails[k]), horizon - k, bool(delta),
                             start_node, end_node)
            for k in range(horizon)]


class OptionMemory:
    """Bounded FIFO store of option transitions with uniform sampling."""

    def __init__(self, capacity: int):
        self._items: deque = deque(maxlen=int(capacity))

    @property
    def size(self) -> int:
        return len(self._items)

    def push(self, transition: OptionTransition):
        self._items.append(transition)

    def extend(self, transitions):
        for tr in transitions:
            self.push(tr)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if batch_size > self.size:
            raise ValueError(f"batch_size {batch_size} exceeds stored "
                             f"{self.size} transitions")
        picks = rng.integers(0, self.size, size=batch_size)
        return [self._items[int(i)] for i in picks]


@dataclass
class EvaluatorUpdateReport:
    critic_loss: float
    actor_loss: float
    std_loss: float
    skipped: bool = False


@dataclass
class EvaluatorModel:
    graph: ConfigGraph
    encoder: Mlp
    critic: Mlp
    encoder_opt: AdamState = field(default_factory=AdamState)
    critic_opt: AdamState = field(default_factory=AdamState)
    gamma: float = 0.99
    temperature: float = 1.0
    reward_scale: float = 1.0   # critic learns values of (reward_scale * r)

    @classmethod
    def create(cls, graph: ConfigGraph, obs_dim: int, hidden=(64, 64),
               gamma: float = 0.99, temperature: float = 1.0,
               learning_rate: float = 1e-3, reward_scale: float = 1.0,
               rng: np.random.Generator | None = None) -> "EvaluatorModel":
        rng = rng if rng is not None else np.random.default_rng()
        d_s = graph.identifier_dim
        encoder = Mlp.create([obs_dim, *hidden, 2 * d_s], rng=rng)
        critic = Mlp.create([obs_dim + d_s, *hidden, 1], rng=rng)
        return cls(graph, encoder, critic,
                   AdamState(learning_rate=learning_rate),
                   AdamState(learning_rate=learning_rate),
                   gamma, temperature, reward_scale)

    # -- scoring -----------------------------------------------------------

    def _queries(self, s: np.ndarray):
        encoded = self.encoder.forward(np.asarray(s, dtype=float)[None])[0]
        d_s = self.graph.identifier_dim
        return encoded[:d_s], encoded[d_s:]

    def critic_values(self, s: np.ndarray, candidates) -> np.ndarray:
        """Critic value of every candidate at observation ``s``."""
        s = np.asarray(s, dtype=float)
        idents = self.graph.identifier_matrix(candidates)
        rows = np.concatenate(
            [np.repeat(s[None], len(candidates), axis=0), idents], axis=1)
        return self.critic.forward(rows)[:, 0]


def evaluator_scores(model: EvaluatorModel, s, candidates):
    """Attention over candidate identifiers: (alpha_mean, alpha_std)."""
    candidates = sorted(int(c) for c in candidates)
    if not candidates:
        raise ValueError("candidate set is empty")
    q_mean, q_raw = model._queries(s)
    idents = model.graph.identifier_matrix(candidates)
    scale = 1.0 / math.sqrt(model.graph.identifier_dim)
    alpha_mean = softmax(idents @ q_mean * scale)
    alpha_std = np.maximum(np.exp(idents @ q_raw * scale), STD_FLOOR)
    return alpha_mean, alpha_std


def evaluator_choose(model: EvaluatorModel, s, candidates, mode: str,
                     rng: np.random.Generator | None = None) -> int:
    """Pick a candidate node: greedy argmax or Gaussian-perturbed argmax."""
    candidates = sorted(int(c) for c in candidates)
    alpha_mean, alpha_std = evaluator_scores(model, s, candidates)
    if mode == "greedy":
        return candidates[int(np.argmax(alpha_mean))]
    if mode == "explore":
        if rng is None:
            raise ValueError("explore mode needs a random generator")
        draws = rng.normal(alpha_mean, alpha_std)
        return candidates[int(np.argmax(draws))]
    raise ValueError(f"unknown choice mode {mode!r}")


def evaluator_update(model: EvaluatorModel,
                     batch: list[OptionTransition]) -> EvaluatorUpdateReport:
    """One gradient step of semi-Markov Q-learning plus attention heads.

    The critic regresses toward reward_sum + gamma**T_remaining * (1-delta)
    * max over the end node's candidates.  The mean head is pulled toward a
    temperature-scaled softmax of the critic's values so the greedy choice
    tracks the critic's argmax; the log-std head regresses toward the log
    absolute TD residual, so exploration noise dies out as the critic fits.
    """
    if not batch:
        raise ValueError("empty evaluator batch")
    n = len(batch)
    graph = model.graph
    d_s = graph.identifier_dim
    scale = 1.0 / math.sqrt(d_s)
    all_nodes = list(range(graph.n_nodes))

    # Bootstrap terms in one batched critic pass: gather every
    # (end observation, candidate identifier) row, forward once, then take
    # the per-transition max over its slice.
    targets = np.empty(n)
    boot_blocks, boot_spans, total = [], [], 0
    for i, tr in enumerate(batch):
        targets[i] = model.reward_scale * tr.reward_sum
        if tr.delta:
            continue
        cands = (graph.candidate_set(tr.end_node)
                 if tr.end_node is not None else all_nodes)
        idents = graph.identifier_matrix(cands)
        s_end = np.asarray(tr.s_end, dtype=float)
        boot_blocks.append(np.concatenate(
            [np.repeat(s_end[None], len(cands), axis=0), idents], axis=1))
        boot_spans.append((i, total, total + len(cands)))
        total += len(cands)
    if boot_blocks:
        boot_vals = model.critic.forward(np.concatenate(boot_blocks))[:, 0]
        for i, lo, hi in boot_spans:
            targets[i] += (model.gamma ** batch[i].t_remaining
                           * float(np.max(boot_vals[lo:hi])))
    if not np.all(np.isfinite(targets)):
        return EvaluatorUpdateReport(float("nan"), float("nan"),
                                     float("nan"), skipped=True)

    # critic regression on the chosen candidate
    x_critic = np.stack([np.concatenate([tr.s_start,
                                         graph.nodes[tr.choice].identifier])
                         for tr in batch])
    q_pred = model.critic.forward(x_critic)[:, 0]
    residual = q_pred - targets
    critic_loss = float(np.mean(residual ** 2))
    cw, cb, _ = model.critic.gradient(x_critic,
                                      (2.0 * residual / n)[:, None])

    # attention heads on the start observations
    x_start = np.stack([np.asarray(tr.s_start, dtype=float) for tr in batch])
    encoded = model.encoder.forward(x_start)

    # critic preferences for every row's start candidates, again batched
    pref_blocks, pref_spans, cand_lists, total = [], [], [], 0
    for i, tr in enumerate(batch):
        cands = (graph.candidate_set(tr.start_node)
                 if tr.start_node is not None else all_nodes)
        idents = graph.identifier_matrix(cands)
        pref_blocks.append(np.concatenate(
            [np.repeat(x_start[i][None], len(cands), axis=0), idents],
            axis=1))
        pref_spans.append((total, total + len(cands)))
        cand_lists.append(cands)
        total += len(cands)
    pref_vals = model.critic.forward(np.concatenate(pref_blocks))[:, 0]

    upstream = np.zeros_like(encoded)
    actor_loss = 0.0
    std_loss = 0.0
    for i, tr in enumerate(batch):
        lo, hi = pref_spans[i]
        idents = graph.identifier_matrix(cand_lists[i])
        alpha = softmax(idents @ encoded[i, :d_s] * scale)
        prefer = softmax(pref_vals[lo:hi] / model.temperature)
        actor_loss -= float(prefer @ np.log(alpha + 1e-12)) / n
        upstream[i, :d_s] = (alpha - prefer) @ idents * (scale / n)

        ident_c = graph.nodes[tr.choice].identifier
        raw = float(ident_c @ encoded[i, d_s:] * scale)
        want = math.log(abs(residual[i]) + RESIDUAL_FLOOR)
        std_loss += 0.5 * (raw - want) ** 2 / n
        upstream[i, d_s:] = (raw - want) * ident_c * (scale / n)
    ew, eb, _ = model.encoder.gradient(x_start, upstream)

    try:
        tensors = model.critic.named_tensors("critic")
        new_critic, model.critic_opt = adam_step(
            tensors, _grad_dict({"critic": (cw, cb)}), model.critic_opt)
        tensors = model.encoder.named_tensors("encoder")
        new_encoder, model.encoder_opt = adam_step(
            tensors, _grad_dict({"encoder": (ew, eb)}), model.encoder_opt)
    except NonFiniteGradientError:
        return EvaluatorUpdateReport(critic_loss, actor_loss, std_loss,
                                     skipped=True)
    model.critic.load_tensors("critic", new_critic)
    model.encoder.load_tensors("encoder", new_encoder)
    return EvaluatorUpdateReport(critic_loss, actor_loss, std_loss)


def evaluator_named_tensors(model: EvaluatorModel, prefix: str = "evaluator"):
    p = f"{prefix}." if prefix else ""
    out = model.encoder.named_tensors(f"{p}encoder")
    out.update(model.critic.named_tensors(f"{p}critic"))
    return out


def evaluator_load_tensors(model: EvaluatorModel, tensors: dict,
                           prefix: str = "evaluator"):
    p = f"{prefix}." if prefix else ""
    model.encoder.load_tensors(f"{p}encoder", tensors)
    model.critic.load_tensors(f"{p}critic", tensors)
