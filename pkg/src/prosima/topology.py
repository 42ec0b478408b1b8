"""Scale-free overlay generation, role assignment, and shard placement.

Nodes are integers 0..N-1. Graphs come from Barabási–Albert preferential
attachment seeded with an m0-clique, so every run with the same (N, m0, m,
seed) reproduces the same edge list. Placement policies trade replication
for locality:

  full_ledger    every node holds every shard
  random_dup(d)  d seeded-random distinct holders per shard
  gft_locality   home node = shard key mod N, plus the nearest leader
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from collections import deque
from pathlib import Path

from .errors import InvalidParams, InvalidPolicyParam, LedgerFormatError

LEADER_FRACTION_DEFAULT = 0.1


@dataclass(frozen=True)
class OverlayGraph:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    seed: int
    m0: int
    m: int
    degrees: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        deg = [0] * self.node_count
        seen = set()
        for u, v in self.edges:
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            deg[u] += 1
            deg[v] += 1
        object.__setattr__(self, "degrees", tuple(deg))

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj


def generate_scale_free(N: int, m0: int, m: int, seed: int) -> OverlayGraph:
    """Barabási–Albert graph: m0-clique core, then degree-proportional attachment."""
    if not (1 <= m <= m0 < N):
        raise InvalidParams(f"need 1 <= m <= m0 < N, got N={N} m0={m0} m={m}")
    rng = random.Random(seed)
    edges: list[tuple[int, int]] = []
    # repeated-node bag: each endpoint appearance weights future attachment
    bag: list[int] = []
    for u in range(m0):
        for v in range(u + 1, m0):
            edges.append((u, v))
            bag.append(u)
            bag.append(v)
    if m0 == 1:
        bag.append(0)  # lone seed node must still be attachable

    for new in range(m0, N):
        targets: set[int] = set()
        while len(targets) < m:
            targets.add(rng.choice(bag))
        for t in sorted(targets):
            edges.append((t, new))
        bag.extend(sorted(targets))
        bag.extend([new] * m)

    return OverlayGraph(node_count=N, edges=tuple(edges), seed=seed, m0=m0, m=m)


@dataclass(frozen=True)
class PlacementMap:
    assignments: dict[bytes, frozenset[int]]
    leaders: tuple[int, ...]

    def copies(self) -> int:
        return sum(len(s) for s in self.assignments.values())


def leader_set(graph: OverlayGraph, leader_fraction: float = LEADER_FRACTION_DEFAULT) -> tuple[int, ...]:
    """Top ceil(fraction*N) nodes by degree, degree ties to the lower id."""
    if not (0 < leader_fraction <= 1):
        raise InvalidParams(f"leader_fraction must be in (0, 1], got {leader_fraction}")
    k = math.ceil(graph.node_count * leader_fraction)
    order = sorted(range(graph.node_count), key=lambda n: (-graph.degrees[n], n))
    return tuple(sorted(order[:k]))


def assign_roles(graph: OverlayGraph, leader_fraction: float = LEADER_FRACTION_DEFAULT) -> PlacementMap:
    return PlacementMap(assignments={}, leaders=leader_set(graph, leader_fraction))


def _nearest_leaders(graph: OverlayGraph, leaders: tuple[int, ...]) -> list[int]:
    """For each node, the closest leader by hops; ties to the lower leader id.

    One multi-source BFS: start all leaders at distance 0, in ascending id
    order so the first visit wins exactly the tie-break we want.
    """
    adj = graph.neighbors()
    best = [-1] * graph.node_count
    q = deque()
    for l in sorted(leaders):
        best[l] = l
        q.append(l)
    while q:
        u = q.popleft()
        for v in adj[u]:
            if best[v] == -1:
                best[v] = best[u]
                q.append(v)
    return best


def place_shards(
    graph: OverlayGraph,
    shard_keys: list[bytes],
    policy: str,
    *,
    d: int | None = None,
    seed: int = 0,
    leader_fraction: float = LEADER_FRACTION_DEFAULT,
) -> PlacementMap:
    """Map every shard key to its holder set under the named policy."""
    if graph.node_count < 1 or not shard_keys:
        raise InvalidParams("placement needs a nonempty graph and key set")
    N = graph.node_count
    leaders = leader_set(graph, leader_fraction)
    assignments: dict[bytes, frozenset[int]] = {}

    if policy == "full_ledger":
        everyone = frozenset(range(N))
        for k in shard_keys:
            assignments[k] = everyone
    elif policy == "random_dup":
        if d is None or not (1 <= d <= N):
            raise InvalidPolicyParam(f"random_dup needs 1 <= d <= N, got {d}")
        rng = random.Random(seed)
        for k in shard_keys:
            assignments[k] = frozenset(rng.sample(range(N), d))
    elif policy == "gft_locality":
        nearest = _nearest_leaders(graph, leaders)
        for k in shard_keys:
            home = int.from_bytes(k, "big") % N
            assignments[k] = frozenset({home, nearest[home]})
    else:
        raise InvalidPolicyParam(f"unknown placement policy {policy!r}")

    return PlacementMap(assignments=assignments, leaders=leaders)


def replication_factor(pmap: PlacementMap) -> float:
    if not pmap.assignments:
        raise InvalidParams("empty placement map")
    return pmap.copies() / len(pmap.assignments)


def storage_per_node(pmap: PlacementMap, shard_bytes: dict[bytes, int]) -> dict[int, int]:
    """Bytes held per node: sum of sizes of all shard copies it stores."""
    if not pmap.assignments:
        raise InvalidParams("empty placement map")
    totals: dict[int, int] = {}
    for key, holders in pmap.assignments.items():
        size = shard_bytes[key]
        for n in holders:
            totals[n] = totals.get(n, 0) + size
    return totals


# --- edge-list export / import ------------------------------------------------

def write_topology(graph: OverlayGraph, path: str | Path) -> None:
    lines = [f"{graph.node_count} {graph.m0} {graph.m} {graph.seed}"]
    lines += [f"{u} {v}" for u, v in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_topology(path: str | Path) -> OverlayGraph:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise LedgerFormatError("empty topology file")
    head = lines[0].split()
    if len(head) != 4:
        raise LedgerFormatError("topology header must be 'N m0 m seed'")
    try:
        N, m0, m, seed = (int(x) for x in head)
        edges = []
        for ln in lines[1:]:
            u, v = ln.split()
            edges.append((int(u), int(v)))
    except ValueError as exc:
        raise LedgerFormatError("malformed topology line") from exc
    for u, v in edges:
        if not (0 <= u < N and 0 <= v < N):
            raise LedgerFormatError(f"edge ({u}, {v}) references unknown node")
    try:
        return OverlayGraph(node_count=N, edges=tuple(edges), seed=seed, m0=m0, m=m)
    except ValueError as exc:
        raise LedgerFormatError(str(exc)) from exc


def is_connected(graph: OverlayGraph) -> bool:
    if graph.node_count == 0:
        return False
    adj = graph.neighbors()
    seen = {0}
    q = deque([0])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                q.append(v)
    return len(seen) == graph.node_count
