"""Bipartite user-item graph with signed explicit-rating edges in CSR form."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import Interaction


class EmptyGraphError(ValueError):
    pass


class Sign(IntEnum):
    NEGATIVE = -1
    POSITIVE = 1


def rating_sign(rating: int) -> Optional[Sign]:
    if rating >= 4:
        return Sign.POSITIVE
    if rating <= 2:
        return Sign.NEGATIVE
    return None


@dataclass(frozen=True)
class NodeIndex:
    user_ids: tuple[int, ...]
    item_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "_users", {u: k for k, u in enumerate(self.user_ids)})
        object.__setattr__(self, "_items", {i: len(self.user_ids) + k for k, i in enumerate(self.item_ids)})

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def user(self, user_id: int) -> int:
        return self._users[user_id]

    def item(self, item_id: int) -> int:
        return self._items[item_id]

    def has_user(self, user_id: int) -> bool:
        return user_id in self._users

    def item_id_of(self, node: int) -> int:
        return self.item_ids[node - self.n_users]

    def user_id_of(self, node: int) -> int:
        return self.user_ids[node]


@dataclass(frozen=True)
class SignedEdge:
    user_node: int
    item_node: int
    sign: Sign
    rating: int


class BipartiteGraph:
    """Immutable CSR adjacency; row ``i`` lists the neighbors of node ``i`` ascending, then ``i`` itself.

    ``indptr``/``indices``/``signs`` describe directed edges target <- source,
    self-loops included (sign +1), so every row is nonempty.
    """

    def __init__(self, node_index: NodeIndex, edges: Sequence[SignedEdge]):
        self.node_index = node_index
        self.edges = tuple(sorted(edges, key=lambda e: (e.user_node, e.item_node)))
        n = node_index.n_nodes
        if self.edges:
            u = np.array([e.user_node for e in self.edges], dtype=np.int64)
            i = np.array([e.item_node for e in self.edges], dtype=np.int64)
            s = np.array([int(e.sign) for e in self.edges], dtype=np.int8)
        else:
            u = i = np.zeros(0, dtype=np.int64)
            s = np.zeros(0, dtype=np.int8)
        if len(set(zip(u.tolist(), i.tolist()))) != len(u):
            raise ValueError("duplicate (user, item) edges")
        rows = np.concatenate([u, i])
        cols = np.concatenate([i, u])
        sg = np.concatenate([s, s])
        order = np.lexsort((cols, rows))
        rows, cols, sg = rows[order], cols[order], sg[order]
        counts = np.bincount(rows, minlength=n)
        self.degree = counts  # non-self degree
        # append self-loop at the end of each row
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        self.indptr[1:] = np.cumsum(counts + 1)
        total = int(self.indptr[-1])
        self.indices = np.empty(total, dtype=np.int64)
        self.signs = np.empty(total, dtype=np.int8)
        self_pos = self.indptr[1:] - 1
        mask = np.ones(total, dtype=bool)
        mask[self_pos] = False
        self.indices[mask] = cols
        self.signs[mask] = sg
        self.indices[self_pos] = np.arange(n)
        self.signs[self_pos] = 1
        self.rows = np.repeat(np.arange(n), counts + 1)
        for arr in (self.indptr, self.indices, self.signs, self.rows, self.degree):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.node_index.n_nodes

    @property
    def n_users(self) -> int:
        return self.node_index.n_users

    @property
    def n_items(self) -> int:
        return self.node_index.n_items

    def neighbors(self, node: int) -> list[tuple[int, Sign]]:
        if not 0 <= node < self.n_nodes:
            raise IndexError(f"node {node} out of range [0, {self.n_nodes})")
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return [(int(j), Sign(int(s))) for j, s in zip(self.indices[lo:hi], self.signs[lo:hi])]

    def positives_of(self, user_node: int) -> np.ndarray:
        lo, hi = self.indptr[user_node], self.indptr[user_node + 1] - 1
        return self.indices[lo:hi][self.signs[lo:hi] == 1]

    def negatives_of(self, user_node: int) -> np.ndarray:
        lo, hi = self.indptr[user_node], self.indptr[user_node + 1] - 1
        return self.indices[lo:hi][self.signs[lo:hi] == -1]

    def positive_edges(self) -> np.ndarray:
        """(E+, 2) array of (user node, item node) for positive edges, sorted."""
        pos = [(e.user_node, e.item_node) for e in self.edges if e.sign is Sign.POSITIVE]
        return np.array(pos, dtype=np.int64).reshape(-1, 2)

    def subgraph_without(self, removed: Iterable[tuple[int, int]]) -> "BipartiteGraph":
        removed = set(map(tuple, removed))
        return BipartiteGraph(self.node_index, [e for e in self.edges if (e.user_node, e.item_node) not in removed])

    def positive_only(self) -> "BipartiteGraph":
        return BipartiteGraph(self.node_index, [e for e in self.edges if e.sign is Sign.POSITIVE])

    def write_tsv(self, path) -> None:
        ni = self.node_index
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self.edges:
                fh.write(f"{ni.user_id_of(e.user_node)}\t{ni.item_id_of(e.item_node)}\t"
                         f"{'+' if e.sign is Sign.POSITIVE else '-'}\t{e.rating}\n")


def build_graph(
    interactions: Sequence[Interaction],
    user_ids: Optional[Sequence[int]] = None,
    item_ids: Optional[Sequence[int]] = None,
) -> BipartiteGraph:
    """Drop rating-3 interactions and wire the rest as signed bidirectional edges.

    ``user_ids``/``item_ids`` widen the node universe (e.g. the full dataset
    when building a training-fold graph); ids seen only in neutral ratings stay
    as isolated nodes.
    """
    users = sorted(set(user_ids or ()) | {x.user_id for x in interactions})
    items = sorted(set(item_ids or ()) | {x.item_id for x in interactions})
    index = NodeIndex(tuple(users), tuple(items))
    edges = []
    for x in interactions:
        sign = rating_sign(x.rating)
        if sign is not None:
            edges.append(SignedEdge(index.user(x.user_id), index.item(x.item_id), sign, x.rating))
    if not edges:
        raise EmptyGraphError("no edges left after dropping neutral (rating 3) interactions")
    return BipartiteGraph(index, edges)
