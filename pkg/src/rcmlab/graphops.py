"""Connectivity on sampled graphs: clusters, connection, double connection, pivotal vertices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .sampler import RcmGraph


class GraphError(ValueError):
    pass


@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _union_find(n, edges):
    parent = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    for e in range(edges.shape[0]):
        a = _find(parent, edges[e, 0])
        b = _find(parent, edges[e, 1])
        if a == b:
            continue
        if size[a] < size[b]:
            a, b = b, a
        parent[b] = a
        size[a] += size[b]
    for i in range(n):
        _find(parent, i)
    return parent, size


@njit(cache=True)
def _component(indptr, indices, source, alive):
    n = indptr.shape[0] - 1
    seen = np.zeros(n, dtype=np.bool_)
    queue = np.empty(n, dtype=np.int64)
    head, tail = 0, 1
    queue[0] = source
    seen[source] = True
    while head < tail:
        v = queue[head]
        head += 1
        for p in range(indptr[v], indptr[v + 1]):
            w = indices[p]
            if alive[w] and not seen[w]:
                seen[w] = True
                queue[tail] = w
                tail += 1
    return queue[:tail]


@dataclass
class ClusterPartition:
    """Union-find result: ``parent`` holds each vertex's root, ``size`` root sizes."""

    parent: np.ndarray
    size: np.ndarray

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.parent == np.arange(len(self.parent))))

    def find(self, i: int) -> int:
        return int(self.parent[i])

    def same(self, i: int, j: int) -> bool:
        return self.parent[i] == self.parent[j]

    def cluster_size(self, i: int) -> int:
        return int(self.size[self.parent[i]])

    def labels(self) -> np.ndarray:
        return self.parent.copy()

    def sizes(self) -> np.ndarray:
        """Cluster size of every vertex."""
        return self.size[self.parent]


def clusters(graph: RcmGraph) -> ClusterPartition:
    parent, size = _union_find(graph.n, graph.edges.astype(np.int64))
    return ClusterPartition(parent, size)


def component(graph: RcmGraph, source: int, alive=None) -> np.ndarray:
    """Vertices reachable from ``source`` (BFS order), optionally using only alive vertices."""
    _check_index(graph, source)
    if alive is None:
        alive = np.ones(graph.n, dtype=np.bool_)
    return _component(graph.indptr, graph.indices, int(source), np.asarray(alive, dtype=np.bool_))


def _check_index(graph: RcmGraph, *idx):
    for i in idx:
        if not 0 <= i < graph.n:
            raise GraphError(f"vertex index {i} out of range")


def connected(graph: RcmGraph, i: int, j: int) -> bool:
    _check_index(graph, i, j)
    if i == j:
        return True
    return bool(np.any(component(graph, i) == j))


def separator_masks(indptr, indices, root: int):
    """DFS from ``root`` over a CSR graph.

    Returns (order, masks) where ``order`` lists the vertices reachable from
    root and ``masks[v]`` is a Python-int bitmask (bits indexed by position in
    ``order``) of the vertices other than root and v that lie on every path
    from root to v.
    """
    disc = {root: 0}
    low = {root: 0}
    parent = {root: -1}
    order = [root]
    stack = [(root, int(indptr[root]))]
    while stack:
        v, p = stack[-1]
        if p < indptr[v + 1]:
            stack[-1] = (v, p + 1)
            w = int(indices[p])
            if w not in disc:
                disc[w] = low[w] = len(order)
                parent[w] = v
                order.append(w)
                stack.append((w, int(indptr[w])))
            elif w != parent[v]:
                if disc[w] < low[v]:
                    low[v] = disc[w]
        else:
            stack.pop()
            u = parent[v]
            if u >= 0 and low[v] < low[u]:
                low[u] = low[v]
    masks = {root: 0}
    for v in order[1:]:
        u = parent[v]
        m = masks[u]
        if u != root and low[v] >= disc[u]:
            m |= 1 << disc[u]
        masks[v] = m
    return order, masks


def pivotal_vertices(graph: RcmGraph, i: int, j: int) -> list[int]:
    """Vertices other than i, j lying on every path from i to j."""
    _check_index(graph, i, j)
    if i == j:
        raise GraphError("pivotal vertices need distinct endpoints")
    order, masks = separator_masks(graph.indptr, graph.indices, i)
    if j not in masks:
        raise GraphError("endpoints are not connected")
    m = masks[j]
    return sorted(order[b] for b in range(len(order)) if m >> b & 1)


def doubly_connected(graph: RcmGraph, i: int, j: int) -> bool:
    """Direct edge, or two paths from i to j sharing only their endpoints."""
    _check_index(graph, i, j)
    if i == j:
        raise GraphError("double connection needs distinct endpoints")
    order, masks = separator_masks(graph.indptr, graph.indices, i)
    return j in masks and masks[j] == 0


def separator_table(graph: RcmGraph, root: int, alive=None):
    """Separator sets of every vertex reachable from ``root``, as bit words.

    Returns (members, words) where ``members`` are graph indices in DFS
    order (members[0] == root) and row p of ``words`` (uint64, shape
    (len(members), ceil(len/64))) marks, by DFS position, the vertices
    other than root and members[p] on every root-to-members[p] path.
    """
    indptr, indices = graph.indptr, graph.indices
    if alive is not None:
        alive = np.asarray(alive, dtype=bool)
        sub = graph.subgraph(alive)
        kept = np.nonzero(alive)[0]
        root_sub = int(np.searchsorted(kept, root))
        order, masks = separator_masks(sub.indptr, sub.indices, root_sub)
        members = kept[np.asarray(order, dtype=np.int64)]
    else:
        order, masks = separator_masks(indptr, indices, root)
        members = np.asarray(order, dtype=np.int64)
    m = len(order)
    n_words = (m + 63) // 64
    words = np.zeros((m, n_words), dtype=np.uint64)
    for p, v in enumerate(order):
        bits = masks[v]
        for w in range(n_words):
            words[p, w] = (bits >> (64 * w)) & 0xFFFFFFFFFFFFFFFF
    return members, words


def graph_from_edges(n: int, edges) -> RcmGraph:
    """Abstract graph on vertices 0..n-1 (points at the origin, mark 0)."""
    from .sampler import PointConfig
    cfg = PointConfig(np.zeros((n, 1)), np.zeros(n), np.arange(n, dtype=np.uint64), np.zeros(n))
    e = np.asarray(sorted((min(i, j), max(i, j)) for i, j in edges), dtype=np.int64).reshape(-1, 2)
    return RcmGraph(cfg, e)


def disjoint_path_count(n: int, edges, s: int, t: int, limit: int = 2) -> int:
    """Number of s-t paths with pairwise disjoint interiors, capped at ``limit``.

    Max-flow on the vertex-split graph (unit capacity on every vertex other
    than s and t) by repeated BFS augmentation.  A direct edge counts as one
    path.  Meant for small graphs.
    """
    if s == t:
        raise GraphError("paths need distinct endpoints")
    cap = {}

    def add(u, v, c):
        cap[(u, v)] = cap.get((u, v), 0) + c
        cap.setdefault((v, u), 0)

    def vin(v):
        return 2 * v

    def vout(v):
        return 2 * v + 1

    for v in range(n):
        add(vin(v), vout(v), n if v in (s, t) else 1)
    for i, j in edges:
        if i == j:
            continue
        add(vout(i), vin(j), 1)
        add(vout(j), vin(i), 1)
    adj = {}
    for u, v in cap:
        adj.setdefault(u, []).append(v)
    source, sink = vout(s), vin(t)
    flow = 0
    while flow < limit:
        prev = {source: None}
        queue = [source]
        for u in queue:
            for v in adj.get(u, ()):
                if v not in prev and cap[(u, v)] > 0:
                    prev[v] = u
                    queue.append(v)
        if sink not in prev:
            break
        v = sink
        while prev[v] is not None:
            u = prev[v]
            cap[(u, v)] -= 1
            cap[(v, u)] += 1
            v = u
        flow += 1
    return flow
