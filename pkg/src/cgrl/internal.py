"""Per-node task solvers working in primitive actions.

Each configuration-space node owns one internal agent: either a SAC learner
or, for the cart task, a closed-form convex solver exploiting the per-region
affine tip map.  Learned agents bootstrap transitions that cross into a
neighbouring space from the *neighbour's* target critics, so value flows
backwards across the graph without any agent ever acting outside its node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs.cartstem import CartStemParams, CartStemState, FREE, LEFT, RIGHT, effective_half_width
from .graph import ConfigGraph, UnknownNodeError
from .sac import ReplayBuffer, SacAgent, Transition, UpdateReport

NODE_FIELDS = {"from_node": ((), np.int64), "to_node": ((), np.int64)}


class NodeMismatchError(ValueError):
    """An internal agent was asked to act outside its own node."""


@dataclass(frozen=True)
class RoutedTransition:
    transition: Transition
    from_node: int
    to_node: int

    @property
    def boundary(self) -> bool:
        return self.from_node != self.to_node


def route_transitions(steps, graph: ConfigGraph) -> dict[int, list[RoutedTransition]]:
    """Assign each (transition, from_node, to_node) to its from-node agent.

    Cross-node steps keep their tags and become boundary transitions; a
    label outside the graph, or a jump between non-neighbours, is a bug in
    the caller and is rejected.
    """
    batches: dict[int, list[RoutedTransition]] = {}
    for transition, from_node, to_node in steps:
        for node in (from_node, to_node):
            if not (0 <= node < graph.n_nodes):
                raise UnknownNodeError(node)
        if from_node != to_node and to_node not in graph.neighbors(from_node):
            raise ValueError(f"transition jumps between non-neighbours "
                             f"{from_node} -> {to_node}")
        batches.setdefault(from_node, []).append(
            RoutedTransition(transition, from_node, to_node))
    return batches


# -- convex solver for the cart task ---------------------------------------

def convex_target(state: CartStemState, node: int, params: CartStemParams) -> float:
    """Cart position minimizing |x_tips - x_goal| within the node's region.

    The tip map is affine on each region, so the unconstrained minimizer is
    the exact inverse of the lever model, clamped to the region.  A goal
    that the region cannot reach clamps to the region edge closest to it in
    tip space, which for contact nodes is the pivot.
    """
    d = effective_half_width(state.l_x, state.l_z)
    p_left, p_right = state.x_left + d, state.x_right - d
    goal = state.x_goal
    kappa = params.kappa
    if node == FREE:
        return min(p_right, max(p_left, goal))
    if node == LEFT:
        return min(p_left, max(params.x_min, p_left - (goal - p_left) / kappa))
    if node == RIGHT:
        return min(params.x_max, max(p_right, p_right - (goal - p_right) / kappa))
    raise UnknownNodeError(node)


def convex_action(state: CartStemState, node: int, params: CartStemParams) -> np.ndarray:
    """Encode the region-optimal cart position as a rail-target action."""
    x_star = convex_target(state, node, params)
    span = params.x_max - params.x_min
    a = 2.0 * (x_star - params.x_min) / span - 1.0
    return np.array([min(1.0, max(-1.0, a))])


# -- agent container -------------------------------------------------------

class InternalAgent:
    """kind 'learned' owns a SacAgent and a buffer; 'convex' is stateless."""

    def __init__(self, node: int, kind: str, sac: SacAgent | None = None,
                 buffer: ReplayBuffer | None = None,
                 cart_params: CartStemParams | None = None):
        if kind not in ("learned", "convex"):
            raise ValueError(f"unknown internal agent kind '{kind}'")
        if kind == "learned" and (sac is None or buffer is None):
            raise ValueError("learned internal agent needs a SacAgent and buffer")
        if kind == "convex" and cart_params is None:
            raise ValueError("convex internal agent needs the cart geometry")
        self.node = node
        self.kind = kind
        self.sac = sac
        self.buffer = buffer
        self.cart_params = cart_params

    @classmethod
    def learned(cls, node: int, obs_dim: int, action_dim: int,
                capacity: int, rng: np.random.Generator, **sac_kw) -> "InternalAgent":
        sac = SacAgent.create(obs_dim, action_dim, rng=rng, **sac_kw)
        buffer = ReplayBuffer.for_transitions(capacity, obs_dim, action_dim,
                                              extra=NODE_FIELDS)
        return cls(node, "learned", sac=sac, buffer=buffer)

    @classmethod
    def convex(cls, node: int, cart_params: CartStemParams) -> "InternalAgent":
        return cls(node, "convex", cart_params=cart_params)

    def act(self, state, obs, label: int, deterministic: bool = False) -> np.ndarray:
        if label != self.node:
            raise NodeMismatchError(
                f"agent of node {self.node} asked to act in node {label}")
        if self.kind == "convex":
            return convex_action(state, self.node, self.cart_params)
        return self.sac.act(obs, deterministic=deterministic)

    def store(self, routed: RoutedTransition):
        if routed.from_node != self.node:
            raise NodeMismatchError(
                f"transition from node {routed.from_node} routed to agent "
                f"{self.node}")
        t = routed.transition
        self.buffer.push(s=t.s, a=t.a, r=t.r, s_next=t.s_next,
                         done=float(t.done), from_node=routed.from_node,
                         to_node=routed.to_node)


def internal_update(agent: InternalAgent, batch: dict, neighbors: dict) -> UpdateReport:
    """SAC update with neighbour bootstrap on boundary rows.

    Rows whose to_node has no learned neighbour agent available are dropped
    and counted.  A batch with no boundary rows reduces to the plain SAC
    update exactly.
    """
    if agent.kind != "learned":
        raise ValueError("only learned internal agents update")
    to_node = np.asarray(batch["to_node"], dtype=int).reshape(-1)
    sacs = {}
    for j, other in neighbors.items():
        other_sac = other.sac if isinstance(other, InternalAgent) else other
        if other_sac is not None:
            sacs[j] = other_sac
    keep = (to_node == agent.node) | np.isin(to_node, list(sacs))
    dropped = int(len(to_node) - keep.sum())
    core = {name: np.asarray(batch[name])[keep]
            for name in ("s", "a", "r", "s_next", "done")}
    if core["s"].shape[0] == 0:
        return UpdateReport(skipped=True, boundary_dropped=dropped)
    kept_to = to_node[keep]
    groups = {int(j): np.nonzero(kept_to == j)[0]
              for j in np.unique(kept_to) if j != agent.node}
    report = agent.sac._update(core, groups, sacs)
    report.boundary_dropped = dropped
    return report
