"""Directed communication graphs and the mixing weights defined on them.

Agents are numbered 0..m-1 and an edge (i, j) means agent i can send to
agent j.  Communication is directed: (i, j) in the edge set does not imply
(j, i).  Every construction here guarantees strong connectivity by laying
down a Hamiltonian base cycle first, and the mixing weights always give
each agent a positive share of its own state, so no self-loops are ever
stored explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

STOCHASTICITY_TOL = 1e-12


class NotStronglyConnectedError(ValueError):
    """The operation needs a strongly connected digraph and got one that is not."""


class Digraph:
    """Immutable directed graph on m agents."""

    def __init__(self, m: int, edges):
        if m < 1:
            raise ValueError(f"agent count must be positive, got {m}")
        normalized = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop ({i},{i}) is not allowed")
            if not (0 <= i < m and 0 <= j < m):
                raise ValueError(f"edge ({i},{j}) out of range for m={m}")
            normalized.add((i, j))
        self.m = int(m)
        self.edges = frozenset(normalized)
        self._out = [[] for _ in range(self.m)]
        self._in = [[] for _ in range(self.m)]
        for i, j in sorted(self.edges):
            self._out[i].append(j)
            self._in[j].append(i)

    def out_neighbors(self, i: int) -> list[int]:
        return list(self._out[i])

    def in_neighbors(self, i: int) -> list[int]:
        return list(self._in[i])

    def __eq__(self, other):
        return (
            isinstance(other, Digraph)
            and self.m == other.m
            and self.edges == other.edges
        )

    def __hash__(self):
        return hash((self.m, self.edges))

    def __repr__(self):
        return f"Digraph(m={self.m}, edges={len(self.edges)})"

    # -- plain-text edge-list serialization ---------------------------------

    def to_edge_list(self) -> str:
        lines = [f"m={self.m}"]
        lines.extend(f"{i} {j}" for i, j in sorted(self.edges))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list(cls, text: str) -> "Digraph":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("m="):
            raise ValueError("edge list must start with an 'm=<count>' line")
        m = int(lines[0][2:])
        edges = []
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 2:
                raise ValueError(f"bad edge line: {ln!r}")
            edges.append((int(parts[0]), int(parts[1])))
        return cls(m, edges)

    def save(self, path) -> None:
        Path(path).write_text(self.to_edge_list())

    @classmethod
    def load(cls, path) -> "Digraph":
        return cls.from_edge_list(Path(path).read_text())


def is_strongly_connected(g: Digraph) -> bool:
    """True iff every agent reaches every other along edge directions.

    One forward and one reverse BFS from node 0: node 0 reaches all and all
    reach node 0 iff the graph is strongly connected.
    """
    if g.m == 1:
        return True

    def reaches_all(adj):
        seen = [False] * g.m
        seen[0] = True
        frontier = [0]
        count = 1
        while frontier:
            nxt = []
            for u in frontier:
                for w in adj[u]:
                    if not seen[w]:
                        seen[w] = True
                        count += 1
                        nxt.append(w)
            frontier = nxt
        return count == g.m

    return reaches_all(g._out) and reaches_all(g._in)


def generate_ring_plus_random(m: int, extra: int, seed: int) -> Digraph:
    """Directed cycle 0->1->...->m-1->0 plus `extra` random out-edges per agent.

    The random out-neighbors are distinct and exclude both the agent itself
    and its cycle successor.  The cycle guarantees strong connectivity.
    """
    if m < 2:
        raise ValueError(f"need at least 2 agents, got {m}")
    if extra < 0 or extra > m - 2:
        raise ValueError(f"extra={extra} must be in [0, m-2] for m={m}")
    rng = np.random.default_rng(seed)
    edges = set()
    for i in range(m):
        succ = (i + 1) % m
        edges.add((i, succ))
        if extra:
            candidates = [j for j in range(m) if j != i and j != succ]
            picks = rng.choice(len(candidates), size=extra, replace=False)
            for p in picks:
                edges.add((i, candidates[int(p)]))
    return Digraph(m, edges)


def generate_connectivity(m: int, p: float, seed: int) -> Digraph:
    """Base directed cycle padded with random edges up to density p.

    Density is the fraction of the m(m-1) possible directed edges that are
    present; the target edge count is ceil(p * m * (m-1)).  The cycle (m
    edges) must fit under the target, so p can be no smaller than 1/(m-1).
    """
    if m < 2:
        raise ValueError(f"need at least 2 agents, got {m}")
    possible = m * (m - 1)
    if not (0.0 < p <= 1.0):
        raise ValueError(f"density p={p} must be in (0, 1]")
    target = int(np.ceil(p * possible))
    if target < m:
        raise ValueError(
            f"density p={p} cannot fit the base cycle: need at least {m}/{possible}"
        )
    rng = np.random.default_rng(seed)
    edges = {(i, (i + 1) % m) for i in range(m)}
    candidates = [
        (i, j)
        for i in range(m)
        for j in range(m)
        if i != j and (i, j) not in edges
    ]
    todo = target - len(edges)
    if todo:
        picks = rng.choice(len(candidates), size=todo, replace=False)
        for idx in picks:
            edges.add(candidates[int(idx)])
    return Digraph(m, edges)


@dataclass(frozen=True)
class MixingPair:
    """Row-stochastic consensus weights W and column-stochastic push weights A.

    W[i, j] > 0 iff j sends to i or j == i; row i averages agent i's own
    value with its in-neighbors'.  A[i, j] > 0 iff j sends to i or j == i;
    column j splits agent j's tracking mass over itself and its
    out-neighbors, so column sums are one and mass totals are conserved.
    min_weight records the smallest positive entry of either matrix.
    """

    W: np.ndarray
    A: np.ndarray
    min_weight: float

    def validate(self, g: Digraph | None = None) -> None:
        m = self.W.shape[0]
        if self.W.shape != (m, m) or self.A.shape != (m, m):
            raise ValueError("W and A must be square and same size")
        row_sums = self.W.sum(axis=1)
        col_sums = self.A.sum(axis=0)
        if np.max(np.abs(row_sums - 1.0)) > STOCHASTICITY_TOL:
            raise ValueError("W is not row-stochastic")
        if np.max(np.abs(col_sums - 1.0)) > STOCHASTICITY_TOL:
            raise ValueError("A is not column-stochastic")
        pos_w = self.W[self.W > 0]
        pos_a = self.A[self.A > 0]
        if pos_w.size == 0 or pos_a.size == 0:
            raise ValueError("mixing matrices must have positive entries")
        if min(pos_w.min(), pos_a.min()) < self.min_weight - STOCHASTICITY_TOL:
            raise ValueError("positive entry below recorded min_weight")
        if np.any(np.diag(self.W) <= 0) or np.any(np.diag(self.A) <= 0):
            raise ValueError("every agent needs a positive self weight")
        if g is not None:
            for i in range(m):
                for j in range(m):
                    expect = (j, i) in g.edges or i == j
                    if (self.W[i, j] > 0) != expect or (self.A[i, j] > 0) != expect:
                        raise ValueError(f"weight pattern mismatch at ({i},{j})")


def build_mixing(g: Digraph) -> MixingPair:
    """Uniform-weight mixing pair for a strongly connected digraph.

    Row i of W puts weight 1/(indegree+1) on agent i and each in-neighbor;
    column j of A puts weight 1/(outdegree+1) on agent j and each
    out-neighbor.
    """
    if not is_strongly_connected(g):
        raise NotStronglyConnectedError(
            f"cannot build mixing weights: {g!r} is not strongly connected"
        )
    m = g.m
    W = np.zeros((m, m))
    A = np.zeros((m, m))
    for i in range(m):
        ins = g.in_neighbors(i)
        w = 1.0 / (len(ins) + 1)
        W[i, i] = w
        for j in ins:
            W[i, j] = w
    for j in range(m):
        outs = g.out_neighbors(j)
        a = 1.0 / (len(outs) + 1)
        A[j, j] = a
        for i in outs:
            A[i, j] = a
    min_weight = float(min(W[W > 0].min(), A[A > 0].min()))
    W.flags.writeable = False
    A.flags.writeable = False
    return MixingPair(W=W, A=A, min_weight=min_weight)
