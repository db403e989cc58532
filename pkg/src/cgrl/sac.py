"""Soft actor-critic for continuous actions, and the shared replay buffer.

The policy outputs a mean and log-std per action dimension and squashes
Gaussian samples through tanh.  Critics are trained on clipped-double-Q
targets with an entropy bonus; all gradients are taken analytically through
the same dense kernels the rest of the package uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, Mlp, NonFiniteGradientError, adam_step

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
SQUASH_EPS = 1e-6


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer over named fixed-shape arrays.

    The schema maps field name -> (shape, dtype); scalars use shape ().
    Sampling is uniform with replacement.
    """

    def __init__(self, capacity: int, schema: dict):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.schema = {name: (tuple(shape), np.dtype(dtype))
                       for name, (shape, dtype) in schema.items()}
        self._data = {name: np.zeros((capacity, *shape), dtype=dtype)
                      for name, (shape, dtype) in self.schema.items()}
        self._count = 0

    @classmethod
    def for_transitions(cls, capacity: int, obs_dim: int, action_dim: int,
                        extra: dict | None = None) -> "ReplayBuffer":
        schema = {"s": ((obs_dim,), np.float64),
                  "a": ((action_dim,), np.float64),
                  "r": ((), np.float64),
                  "s_next": ((obs_dim,), np.float64),
                  "done": ((), np.float64)}
        schema.update(extra or {})
        return cls(capacity, schema)

    @property
    def size(self) -> int:
        return min(self._count, self.capacity)

    def push(self, **fields):
        if set(fields) != set(self.schema):
            raise ValueError(f"fields {sorted(fields)} do not match schema "
                             f"{sorted(self.schema)}")
        slot = self._count % self.capacity
        for name, value in fields.items():
            self._data[name][slot] = value
        self._count += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if batch_size > self.size:
            raise ValueError(f"buffer holds {self.size} < batch {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return {name: arr[idx].copy() for name, arr in self._data.items()}


@dataclass
class UpdateReport:
    critic_loss: float = math.nan
    policy_loss: float = math.nan
    entropy: float = math.nan
    skipped: bool = False
    boundary_dropped: int = 0


@dataclass
class SacAgent:
    obs_dim: int
    action_dim: int
    policy: Mlp
    q1: Mlp
    q2: Mlp
    q1_target: Mlp
    q2_target: Mlp
    rng: np.random.Generator
    gamma: float = 0.99
    polyak: float = 0.005          # weight given to the live critics
    entropy_coef: float = 0.2
    reward_scale: float = 1.0      # critics learn Q of (reward_scale * r)
    critic_opt: AdamState = field(default_factory=AdamState)
    policy_opt: AdamState = field(default_factory=AdamState)

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, hidden=(64, 64),
               gamma: float = 0.99, polyak: float = 0.005,
               entropy_coef: float = 0.2, learning_rate: float = 3e-4,
               reward_scale: float = 1.0,
               rng: np.random.Generator | None = None) -> "SacAgent":
        rng = rng or np.random.default_rng()
        policy = Mlp.create([obs_dim, *hidden, 2 * action_dim], rng=rng)
        q1 = Mlp.create([obs_dim + action_dim, *hidden, 1], rng=rng)
        q2 = Mlp.create([obs_dim + action_dim, *hidden, 1], rng=rng)
        return cls(obs_dim, action_dim, policy, q1, q2, q1.copy(), q2.copy(),
                   rng, gamma, polyak, entropy_coef, reward_scale,
                   AdamState(learning_rate=learning_rate),
                   AdamState(learning_rate=learning_rate))

    # -- acting ------------------------------------------------------------

    def _policy_stats(self, obs, net: Mlp | None = None):
        out = (net or self.policy).forward(obs)
        mean = out[..., :self.action_dim]
        raw = out[..., self.action_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        clip_mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(float)
        return mean, log_std, clip_mask

    @staticmethod
    def _squash(mean, log_std, eps):
        z = mean + np.exp(log_std) * eps
        a = np.tanh(z)
        log_prob = np.sum(-0.5 * eps ** 2 - log_std - 0.5 * math.log(2 * math.pi)
                          - np.log(1.0 - a ** 2 + SQUASH_EPS), axis=-1)
        return a, log_prob

    def act(self, obs, deterministic: bool = False) -> np.ndarray:
        mean, log_std, _ = self._policy_stats(np.asarray(obs, dtype=float))
        if deterministic:
            return np.tanh(mean)
        eps = self.rng.standard_normal(mean.shape)
        a, _ = self._squash(mean, log_std, eps)
        return a

    def sample_with_log_prob(self, obs):
        """Stochastic action and its log-probability (both returned)."""
        mean, log_std, _ = self._policy_stats(np.asarray(obs, dtype=float))
        eps = self.rng.standard_normal(mean.shape)
        return self._squash(mean, log_std, eps)

    # -- learning ----------------------------------------------------------

    def update(self, batch: dict) -> UpdateReport:
        """One critic step, one policy step, one polyak step."""
        return self._update(batch, boundary_groups={}, neighbors={})

    def _update(self, batch: dict, boundary_groups: dict, neighbors: dict) -> UpdateReport:
        s = np.atleast_2d(batch["s"])
        a = np.atleast_2d(batch["a"])
        r = np.asarray(batch["r"], dtype=float).reshape(-1)
        s_next = np.atleast_2d(batch["s_next"])
        done = np.asarray(batch["done"], dtype=float).reshape(-1)
        n = s.shape[0]

        # Critic targets.  The noise for the next-state action is drawn for
        # the whole batch up front; boundary rows (handled by subclasses of
        # this routine) re-use the same rows of noise with the neighbouring
        # agent's networks, so a batch without boundary rows reduces to the
        # plain update bit for bit.
        eps_next = self.rng.standard_normal((n, self.action_dim))
        mean_n, log_std_n, _ = self._policy_stats(s_next)
        a_next, log_prob_next = self._squash(mean_n, log_std_n, eps_next)
        sa_next = np.concatenate([s_next, a_next], axis=1)
        q_next = np.minimum(self.q1_target.forward(sa_next),
                            self.q2_target.forward(sa_next)).reshape(-1)
        boot = q_next - self.entropy_coef * log_prob_next
        for j in sorted(boundary_groups):
            rows = boundary_groups[j]
            other = neighbors[j]
            mean_j, log_std_j, _ = other._policy_stats(s_next[rows])
            a_j, log_prob_j = other._squash(mean_j, log_std_j, eps_next[rows])
            sa_j = np.concatenate([s_next[rows], a_j], axis=1)
            q_j = np.minimum(other.q1_target.forward(sa_j),
                             other.q2_target.forward(sa_j)).reshape(-1)
            boot[rows] = q_j - other.entropy_coef * log_prob_j
        y = self.reward_scale * r + self.gamma * (1.0 - done) * boot

        sa = np.concatenate([s, a], axis=1)
        q1_pred = self.q1.forward(sa).reshape(-1)
        q2_pred = self.q2.forward(sa).reshape(-1)
        critic_loss = float(np.mean((q1_pred - y) ** 2) + np.mean((q2_pred - y) ** 2))
        up1 = (2.0 * (q1_pred - y) / n).reshape(-1, 1)
        up2 = (2.0 * (q2_pred - y) / n).reshape(-1, 1)
        q1_w, q1_b, _ = self.q1.gradient(sa, up1)
        q2_w, q2_b, _ = self.q2.gradient(sa, up2)

        # Policy step (critics held fixed, fresh noise).
        eps = self.rng.standard_normal((n, self.action_dim))
        mean, log_std, clip_mask = self._policy_stats(s)
        a_new, log_prob = self._squash(mean, log_std, eps)
        sa_new = np.concatenate([s, a_new], axis=1)
        q1_new = self.q1.forward(sa_new).reshape(-1)
        q2_new = self.q2.forward(sa_new).reshape(-1)
        policy_loss = float(np.mean(self.entropy_coef * log_prob
                                    - np.minimum(q1_new, q2_new)))
        pick1 = (q1_new <= q2_new).astype(float).reshape(-1, 1)
        _, _, in1 = self.q1.gradient(sa_new, pick1 / n)
        _, _, in2 = self.q2.gradient(sa_new, (1.0 - pick1) / n)
        dq_da = (in1 + in2)[:, self.obs_dim:]

        tanh_sq = a_new ** 2
        dl_da = (self.entropy_coef / n) * 2.0 * a_new / (1.0 - tanh_sq + SQUASH_EPS) - dq_da
        dl_dz = dl_da * (1.0 - tanh_sq)
        dl_dmean = dl_dz
        dl_dlogstd = (dl_dz * eps * np.exp(log_std)
                      - self.entropy_coef / n) * clip_mask
        upstream = np.concatenate([dl_dmean, dl_dlogstd], axis=1)
        pol_w, pol_b, _ = self.policy.gradient(s, upstream)

        if not (math.isfinite(critic_loss) and math.isfinite(policy_loss)):
            return UpdateReport(critic_loss, policy_loss, skipped=True)

        critic_grads = _grad_dict({"q1": (q1_w, q1_b), "q2": (q2_w, q2_b)})
        policy_grads = _grad_dict({"policy": (pol_w, pol_b)})
        try:
            tensors = {**self.q1.named_tensors("q1"), **self.q2.named_tensors("q2")}
            new_tensors, self.critic_opt = adam_step(tensors, critic_grads, self.critic_opt)
            tensors = self.policy.named_tensors("policy")
            new_policy, self.policy_opt = adam_step(tensors, policy_grads, self.policy_opt)
        except NonFiniteGradientError:
            return UpdateReport(critic_loss, policy_loss, skipped=True)
        self.q1.load_tensors("q1", new_tensors)
        self.q2.load_tensors("q2", new_tensors)
        self.policy.load_tensors("policy", new_policy)

        for target, live in ((self.q1_target, self.q1), (self.q2_target, self.q2)):
            for lt, ll in zip(target.weights + target.biases,
                              live.weights + live.biases):
                lt *= 1.0 - self.polyak
                lt += self.polyak * ll

        entropy = float(-np.mean(log_prob))
        return UpdateReport(critic_loss, policy_loss, entropy)

    # -- persistence -------------------------------------------------------

    def named_tensors(self, prefix: str = "") -> dict:
        p = f"{prefix}." if prefix else ""
        out = {}
        for name, net in (("policy", self.policy), ("q1", self.q1),
                          ("q2", self.q2), ("q1_target", self.q1_target),
                          ("q2_target", self.q2_target)):
            out.update(net.named_tensors(f"{p}{name}"))
        return out

    def load_tensors(self, prefix: str, tensors: dict):
        p = f"{prefix}." if prefix else ""
        for name, net in (("policy", self.policy), ("q1", self.q1),
                          ("q2", self.q2), ("q1_target", self.q1_target),
                          ("q2_target", self.q2_target)):
            net.load_tensors(f"{p}{name}", tensors)


def _grad_dict(groups: dict) -> dict:
    out = {}
    for prefix, (w_grads, b_grads) in groups.items():
        for i, g in enumerate(w_grads):
            out[f"{prefix}.w{i}"] = g
        for i, g in enumerate(b_grads):
            out[f"{prefix}.b{i}"] = g
    return out
