"""Node-switching options.

The learned external agent is a single goal-conditioned SAC policy over the
observation concatenated with the identifier of the commanded target node.
Because an option that reaches node i is simultaneously a failure to reach
every other neighbour, each completed option is relabelled in hindsight
into one positive track and one negative track per alternative target,
sharing the same state-action pairs.

Expert options wrap hand-written scripts that drive the environment
directly; they never learn and never read the task goal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import ConfigGraph
from .sac import ReplayBuffer, SacAgent, Transition, UpdateReport


class OptionUnavailableError(ValueError):
    """Option invoked from outside its starting set."""


@dataclass(frozen=True)
class OptionSpec:
    starting_nodes: frozenset
    target: int | None          # None: target chosen at runtime / any neighbour
    t_max: int

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")


@dataclass
class OptionOutcome:
    observations: list          # T+1 vectors, start state included
    actions: list               # T entries; None for privileged script steps
    rewards: list               # T primitive rewards, no penalties
    labels: list                # T+1 node labels
    start_node: int
    reached_node: int
    terminated_by: str          # node_change | t_max | episode_end
    done: bool                  # environment termination flag at the end

    @property
    def steps(self) -> int:
        return len(self.rewards)


class ExternalAgent:
    def __init__(self, kind: str, spec: OptionSpec, sac: SacAgent | None = None,
                 buffer: ReplayBuffer | None = None, script=None,
                 script_name: str = "", identifier_dim: int = 0):
        if kind not in ("learned", "expert"):
            raise ValueError(f"unknown external agent kind '{kind}'")
        if kind == "learned" and (sac is None or buffer is None):
            raise ValueError("learned external agent needs a SacAgent and buffer")
        if kind == "expert" and script is None:
            raise ValueError("expert external agent needs a script")
        self.kind = kind
        self.spec = spec
        self.sac = sac
        self.buffer = buffer
        self.script = script
        self.script_name = script_name
        self.identifier_dim = identifier_dim

    @classmethod
    def learned(cls, obs_dim: int, identifier_dim: int, action_dim: int,
                capacity: int, spec: OptionSpec, rng: np.random.Generator,
                **sac_kw) -> "ExternalAgent":
        sac = SacAgent.create(obs_dim + identifier_dim, action_dim, rng=rng,
                              **sac_kw)
        buffer = ReplayBuffer.for_transitions(capacity, obs_dim + identifier_dim,
                                              action_dim)
        return cls("learned", spec, sac=sac, buffer=buffer,
                   identifier_dim=identifier_dim)

    @classmethod
    def expert(cls, script, name: str, spec: OptionSpec) -> "ExternalAgent":
        return cls("expert", spec, script=script, script_name=name)

    def act(self, obs: np.ndarray, target_identifier: np.ndarray,
            deterministic: bool = False) -> np.ndarray:
        if self.kind != "learned":
            raise ValueError("expert agents act through their script")
        target_identifier = np.asarray(target_identifier, dtype=float)
        if target_identifier.shape != (self.identifier_dim,):
            raise ValueError(f"identifier shape {target_identifier.shape} "
                             f"does not match d_s={self.identifier_dim}")
        augmented = np.concatenate([np.asarray(obs, dtype=float),
                                    target_identifier])
        return self.sac.act(augmented, deterministic=deterministic)


def run_option(agent: ExternalAgent, env, graph: ConfigGraph,
               target: int | None = None, deterministic: bool = False,
               label_fn=None) -> OptionOutcome:
    """Run one option to node change, step cap, or episode end.

    Node labels come from the environment oracle unless label_fn overrides
    them (learned-Selector routing).  A node change on the final allowed
    step still counts as node_change; the environment's done flag rides
    along either way.
    """
    state = env.state
    obs = env.observe(state)
    start = int(label_fn(obs)) if label_fn else env.contact_label(state)
    if start not in agent.spec.starting_nodes:
        raise OptionUnavailableError(
            f"option starts from {sorted(agent.spec.starting_nodes)}, "
            f"current node is {start}")

    if agent.kind == "expert":
        pairs = agent.script(env)
        observations = [obs]
        actions, rewards, labels = [], [], [start]
        done = False
        for res in pairs:
            observations.append(env.observe(res.next_state))
            actions.append(None)
            rewards.append(res.reward)
            labels.append(int(label_fn(observations[-1])) if label_fn
                          else res.config_label)
            done = res.done
        if len(rewards) > agent.spec.t_max:
            raise ValueError(f"script ran {len(rewards)} steps, "
                             f"t_max={agent.spec.t_max}")
        reached = labels[-1]
        if reached != start:
            terminated_by = "node_change"
        elif done:
            terminated_by = "episode_end"
        else:
            terminated_by = "t_max"
        return OptionOutcome(observations, actions, rewards, labels, start,
                             reached, terminated_by, done)

    if target is None:
        raise ValueError("learned option needs a commanded target node")
    ident = graph.nodes[target].identifier
    observations = [obs]
    actions, rewards, labels = [], [], [start]
    terminated_by = "t_max"
    done = False
    for _ in range(agent.spec.t_max):
        a = agent.act(observations[-1], ident, deterministic=deterministic)
        res = env.step(float(a[0]) if a.shape == (1,) else a)
        nxt_obs = env.observe(res.next_state)
        label = int(label_fn(nxt_obs)) if label_fn else res.config_label
        observations.append(nxt_obs)
        actions.append(np.atleast_1d(a))
        rewards.append(res.reward)
        labels.append(label)
        done = res.done
        if label != start:
            terminated_by = "node_change"
            break
        if done:
            terminated_by = "episode_end"
            break
    return OptionOutcome(observations, actions, rewards, labels, start,
                         labels[-1], terminated_by, done)


def her_relabel(outcome: OptionOutcome, graph: ConfigGraph) -> list[Transition]:
    """Hindsight tracks over every candidate target of the start node."""
    if outcome.terminated_by != "node_change":
        return []
    reached = outcome.reached_node
    negatives = sorted(graph.neighbors(outcome.start_node) - {reached})
    h_reached = graph.nodes[reached].identifier
    out = []
    T = outcome.steps
    for t in range(T):
        s, s_next = outcome.observations[t], outcome.observations[t + 1]
        a = outcome.actions[t]
        final = t == T - 1
        out.append(Transition(np.concatenate([s, h_reached]), a,
                              1.0 if final else 0.0,
                              np.concatenate([s_next, h_reached]), final))
        for j in negatives:
            h_j = graph.nodes[j].identifier
            out.append(Transition(np.concatenate([s, h_j]), a,
                                  -1.0 if final else 0.0,
                                  np.concatenate([s_next, h_j]), final))
    return out


def external_update(agent: ExternalAgent, batch: dict) -> UpdateReport:
    if agent.kind != "learned":
        raise ValueError("expert agents do not update")
    return agent.sac.update(batch)
