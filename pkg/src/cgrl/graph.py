"""The knowledge graph of configuration spaces.

Nodes are configuration spaces (one contact configuration each) carrying a
fixed identifier vector; undirected edges mark spaces that are directly
reachable from one another without crossing a third space.  Graphs are
immutable after construction and freely shared.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class UnknownNodeError(KeyError):
    """A node id that is not part of the graph."""


@dataclass(frozen=True)
class ConfigSpace:
    """One node: a set of robot states sharing a contact configuration."""

    id: int
    name: str
    identifier: np.ndarray
    is_gathered: bool = False  # catch-all node for configurations not worth modelling


@dataclass
class ConfigGraph:
    nodes: list[ConfigSpace]
    edges: set[frozenset[int]] = field(default_factory=set)
    _ident_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, names: list[str], edge_pairs: list[tuple[str, str]],
              identifier_dim: int | None = None,
              identifiers: dict[str, np.ndarray] | None = None,
              gathered: set[str] | None = None) -> "ConfigGraph":
        """Construct a graph from node names and name pairs.

        Identifiers default to one-hot vectors of length max(N, 4); the
        attention machinery only needs them pairwise distinct.
        """
        n = len(names)
        d_s = identifier_dim if identifier_dim else max(n, 4)
        gathered = gathered or set()
        nodes = []
        for i, name in enumerate(names):
            if identifiers and name in identifiers:
                h = np.asarray(identifiers[name], dtype=np.float64)
            else:
                h = np.zeros(d_s)
                if i < d_s:
                    h[i] = 1.0
            nodes.append(ConfigSpace(i, name, h, name in gathered))
        by_name = {nd.name: nd.id for nd in nodes}
        edges = set()
        for a, b in edge_pairs:
            if a not in by_name or b not in by_name:
                raise UnknownNodeError(f"edge references unknown node '{a if a not in by_name else b}'")
            edges.add(frozenset((by_name[a], by_name[b])))
        return cls(nodes, edges)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def identifier_dim(self) -> int:
        return int(self.nodes[0].identifier.shape[0]) if self.nodes else 0

    def node_id(self, name: str) -> int:
        for nd in self.nodes:
            if nd.name == name:
                return nd.id
        raise UnknownNodeError(name)

    def identifier_matrix(self, ids: list[int] | None = None) -> np.ndarray:
        """Identifier row per node id (all nodes when ids is None).

        Rows are cached per id tuple (this runs once per candidate per
        decision) and returned read-only.
        """
        key = None if ids is None else tuple(int(i) for i in ids)
        cached = self._ident_cache.get(key)
        if cached is None:
            sel = self.nodes if key is None else [self._node(i) for i in key]
            cached = np.stack([nd.identifier for nd in sel])
            cached.flags.writeable = False
            self._ident_cache[key] = cached
        return cached

    def _node(self, node_id: int) -> ConfigSpace:
        if not (0 <= node_id < len(self.nodes)):
            raise UnknownNodeError(node_id)
        return self.nodes[node_id]

    def neighbors(self, node_id: int) -> set[int]:
        """The neighbourhood of a node, excluding the node itself."""
        self._node(node_id)
        out = set()
        for e in self.edges:
            if node_id in e:
                out.update(e - {node_id})
        return out

    def candidate_set(self, node_id: int) -> list[int]:
        """Neighbourhood plus the node itself, in ascending id order.

        The ordering is what keeps attention key matrices stable across
        calls, so it must never depend on edge insertion order.
        """
        return sorted(self.neighbors(node_id) | {node_id})

    def validate(self) -> list[str]:
        """Return every structural violation (empty list means ok)."""
        violations = []
        ids = [nd.id for nd in self.nodes]
        if ids != list(range(len(self.nodes))):
            violations.append(f"node ids not contiguous from 0: {ids}")
        names = [nd.name for nd in self.nodes]
        if len(set(names)) != len(names):
            violations.append("duplicate node names")
        for i, a in enumerate(self.nodes):
            for b in self.nodes[i + 1:]:
                if a.identifier.shape == b.identifier.shape and np.array_equal(a.identifier, b.identifier):
                    violations.append(f"duplicate identifier: nodes {a.name} and {b.name}")
        for e in self.edges:
            if len(e) != 2:
                violations.append(f"self-loop or malformed edge {set(e)}")
            for v in e:
                if not (0 <= v < len(self.nodes)):
                    violations.append(f"edge endpoint {v} is not a node")
        # connectivity over well-formed edges
        if self.nodes:
            seen = {0}
            frontier = [0]
            while frontier:
                cur = frontier.pop()
                for e in self.edges:
                    if cur in e and len(e) == 2:
                        for v in e - {cur}:
                            if 0 <= v < len(self.nodes) and v not in seen:
                                seen.add(v)
                                frontier.append(v)
            if len(seen) != len(self.nodes):
                missing = sorted(set(range(len(self.nodes))) - seen)
                violations.append(f"graph not connected; unreachable nodes {missing}")
        return violations

    def fingerprint(self) -> str:
        """Stable digest of the graph structure, enforced at checkpoint load."""
        h = hashlib.sha256()
        for nd in self.nodes:
            h.update(f"{nd.id}:{nd.name}:{int(nd.is_gathered)}:".encode())
            h.update(np.ascontiguousarray(nd.identifier, dtype=np.float64).tobytes())
        for e in sorted(tuple(sorted(e)) for e in self.edges):
            h.update(f"e{e[0]}-{e[1]};".encode())
        return h.hexdigest()


def cartstem_graph() -> ConfigGraph:
    """LEFT -- FREE -- RIGHT chain used by the cart-and-beam task."""
    return ConfigGraph.build(["LEFT", "FREE", "RIGHT"],
                             [("LEFT", "FREE"), ("FREE", "RIGHT")])


def rod_graph() -> ConfigGraph:
    """FREE -- HOLD pair used by the rod rotation task."""
    return ConfigGraph.build(["FREE", "HOLD"], [("FREE", "HOLD")],
                             gathered={"FREE"})
