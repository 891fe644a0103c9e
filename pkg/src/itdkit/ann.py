"""Approximate nearest neighbor search over dense vectors.

Hierarchical navigable-small-world graph index (insertion with the
classic diversity-pruning heuristic, beam search at the base layer),
giving sublinear query cost in the number of stored vectors. The graph
walk is jitted with numba; vectors are stored row-normalized when the
metric is cosine so every similarity is a plain dot product.

Construction is deterministic for a fixed seed and insertion order.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _heap_push(keys, vals, n, k, v):
    keys[n] = k
    vals[n] = v
    i = n
    while i > 0:
        parent = (i - 1) >> 1
        if keys[parent] <= keys[i]:
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return n + 1


@njit(cache=True)
def _heap_pop(keys, vals, n):
    n -= 1
    keys[0] = keys[n]
    vals[0] = vals[n]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        smallest = i
        if left < n and keys[left] < keys[smallest]:
            smallest = left
        if right < n and keys[right] < keys[smallest]:
            smallest = right
        if smallest == i:
            break
        keys[smallest], keys[i] = keys[i], keys[smallest]
        vals[smallest], vals[i] = vals[i], vals[smallest]
        i = smallest
    return n


@njit(cache=True, fastmath=True)
def _dot(vec, node, q):
    s = 0.0
    for j in range(q.shape[0]):
        s += vec[node, j] * q[j]
    return s


@njit(cache=True)
def _greedy_step(vec, links, counts, q, entry):
    """Follow best-improving links until a local optimum."""
    cur = entry
    cur_sim = _dot(vec, cur, q)
    improved = True
    while improved:
        improved = False
        for t in range(counts[cur]):
            nb = links[cur, t]
            s = _dot(vec, nb, q)
            if s > cur_sim:
                cur_sim = s
                cur = nb
                improved = True
    return cur


@njit(cache=True)
def _search_layer(vec, links, counts, q, entry, ef, visited, stamp,
                  res_sims, res_ids):
    """Beam search: returns number of results written to res_sims/res_ids
    (a min-heap on similarity, i.e. worst first)."""
    cap = 4096
    cand_keys = np.empty(cap, np.float64)
    cand_vals = np.empty(cap, np.int64)
    visited[entry] = stamp
    s0 = _dot(vec, entry, q)
    res_n = _heap_push(res_sims, res_ids, 0, s0, entry)
    cand_n = _heap_push(cand_keys, cand_vals, 0, -s0, entry)
    while cand_n > 0:
        best_sim = -cand_keys[0]
        best_id = cand_vals[0]
        cand_n = _heap_pop(cand_keys, cand_vals, cand_n)
        if res_n >= ef and best_sim < res_sims[0]:
            break
        for t in range(counts[best_id]):
            nb = links[best_id, t]
            if visited[nb] == stamp:
                continue
            visited[nb] = stamp
            s = _dot(vec, nb, q)
            if res_n < ef or s > res_sims[0]:
                if cand_n < cap:
                    cand_n = _heap_push(cand_keys, cand_vals, cand_n, -s, nb)
                res_n = _heap_push(res_sims, res_ids, res_n, s, nb)
                if res_n > ef:
                    res_n = _heap_pop(res_sims, res_ids, res_n)
    return res_n


@njit(cache=True)
def _select_heuristic(vec, cand_ids, cand_sims, n_cand, m, out):
    """Diversity-pruning neighbor selection: take candidates in
    decreasing similarity, keeping one only if it is closer to the query
    than to every already-kept neighbor; leftover slots are backfilled
    with the best pruned candidates."""
    order = np.argsort(-cand_sims[:n_cand])
    pruned = np.empty(n_cand, np.int64)
    n_out = 0
    n_pruned = 0
    for oi in range(n_cand):
        if n_out >= m:
            break
        c = cand_ids[order[oi]]
        c_sim = cand_sims[order[oi]]
        ok = True
        for j in range(n_out):
            if _dot(vec, c, vec[out[j]]) > c_sim:
                ok = False
                break
        if ok:
            out[n_out] = c
            n_out += 1
        else:
            pruned[n_pruned] = c
            n_pruned += 1
    for t in range(n_pruned):
        if n_out >= m:
            break
        out[n_out] = pruned[t]
        n_out += 1
    return n_out


@njit(cache=True)
def _prune_links(vec, links, counts, node, m):
    """Re-select node's links with the same heuristic when over capacity."""
    n = counts[node]
    ids = links[node, :n].copy()
    sims = np.empty(n, np.float64)
    for t in range(n):
        sims[t] = _dot(vec, ids[t], vec[node])
    out = np.empty(m, np.int64)
    n_out = _select_heuristic(vec, ids, sims, n, m, out)
    for t in range(n_out):
        links[node, t] = out[t]
    counts[node] = n_out


@njit(cache=True)
def _insert_at_layer(vec, links, counts, q, node, entry, ef_construction, m,
                     visited, stamp, res_sims, res_ids):
    """Connect ``node`` at one layer; returns the best entry for the
    layer below."""
    res_n = _search_layer(vec, links, counts, q, entry, ef_construction,
                          visited, stamp, res_sims, res_ids)
    ids = res_ids[:res_n].copy()
    sims = res_sims[:res_n].copy()
    sel = np.empty(m, np.int64)
    n_sel = _select_heuristic(vec, ids, sims, res_n, m, sel)
    for t in range(n_sel):
        links[node, t] = sel[t]
    counts[node] = n_sel
    for t in range(n_sel):
        nb = sel[t]
        links[nb, counts[nb]] = node
        counts[nb] += 1
        if counts[nb] == links.shape[1]:  # spare slot used up: re-select
            _prune_links(vec, links, counts, nb, m)
    best = ids[0]
    best_sim = sims[0]
    for t in range(res_n):
        if sims[t] > best_sim:
            best_sim = sims[t]
            best = ids[t]
    return best


class HnswIndex:
    """Navigable small-world graph over up to ``capacity`` vectors."""

    def __init__(self, dim, metric="cosine", m=24, ef_construction=200,
                 ef_search=256, seed=0):
        if metric not in ("cosine", "ip"):
            raise ValueError(f"unknown metric {metric!r}")
        self.dim = dim
        self.metric = metric
        self.m = int(m)
        self.m0 = 2 * self.m
        self.ef_construction = int(ef_construction)
        self.ef_search = int(ef_search)
        self.seed = seed
        self._level_mult = 1.0 / math.log(self.m)
        self._rng = np.random.default_rng(seed)
        self._vec = None
        self._levels = None
        self._links = []   # per layer: (capacity, m_l) int64
        self._counts = []  # per layer: (capacity,) int64
        self._visited = None
        self._stamp = 0
        self._entry = -1
        self._top = -1
        self.size = 0

    def _normalize(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if self.metric == "cosine":
            norms = np.linalg.norm(x, axis=-1, keepdims=True)
            x = x / np.maximum(norms, 1e-12)
        return x

    def _ensure_layer(self, layer, capacity):
        while len(self._links) <= layer:
            width = self.m0 if len(self._links) == 0 else self.m
            self._links.append(np.full((capacity, width + 1), -1, np.int64))
            self._counts.append(np.zeros(capacity, np.int64))

    def add_items(self, vectors):
        """Bulk insert; call once (index is rebuilt, not appended to)."""
        vectors = np.atleast_2d(np.asarray(vectors))
        n = vectors.shape[0]
        if vectors.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {vectors.shape[1]}")
        if self.size:
            raise ValueError("index already built; create a new one")
        self._vec = self._normalize(vectors)
        self._levels = np.minimum(
            (-np.log(self._rng.random(n)) * self._level_mult).astype(np.int64), 48
        )
        self._visited = np.zeros(n, np.int64)
        max_ef = max(self.ef_construction, self.ef_search) + 1
        self._res_sims = np.empty(max_ef + 1, np.float64)
        self._res_ids = np.empty(max_ef + 1, np.int64)
        for node in range(n):
            self._insert(node)
        self.size = n

    def _insert(self, node):
        level = int(self._levels[node])
        self._ensure_layer(level, self._vec.shape[0])
        q = self._vec[node]
        if self._entry < 0:
            self._entry = node
            self._top = level
            return
        ep = self._entry
        for layer in range(self._top, level, -1):
            ep = _greedy_step(self._vec, self._links[layer], self._counts[layer],
                              q, ep)
        for layer in range(min(level, self._top), -1, -1):
            m_l = self.m0 if layer == 0 else self.m
            self._stamp += 1
            ep = _insert_at_layer(
                self._vec, self._links[layer], self._counts[layer], q, node, ep,
                self.ef_construction, m_l, self._visited, self._stamp,
                self._res_sims, self._res_ids,
            )
        if level > self._top:
            self._entry = node
            self._top = level

    def query(self, q, k, ef=None):
        """Top-k ids and similarities, best first."""
        if self.size == 0:
            raise ValueError("index is empty")
        k = min(int(k), self.size)
        ef = max(self.ef_search if ef is None else int(ef), k)
        qv = self._normalize(np.asarray(q).reshape(-1))
        ep = self._entry
        for layer in range(self._top, 0, -1):
            ep = _greedy_step(self._vec, self._links[layer], self._counts[layer],
                              qv, ep)
        self._stamp += 1
        res_sims, res_ids = self._res_sims, self._res_ids
        if ef + 1 > res_sims.shape[0]:
            res_sims = np.empty(ef + 2, np.float64)
            res_ids = np.empty(ef + 2, np.int64)
        res_n = _search_layer(
            self._vec, self._links[0], self._counts[0], qv, ep, ef,
            self._visited, self._stamp, res_sims, res_ids,
        )
        ids = res_ids[:res_n].copy()
        sims = res_sims[:res_n].copy()
        order = np.argsort(-sims, kind="stable")[:k]
        return ids[order], sims[order]

    def query_batch(self, queries, k, ef=None):
        queries = np.atleast_2d(np.asarray(queries))
        ids = np.empty((queries.shape[0], min(k, self.size)), np.int64)
        sims = np.empty_like(ids, dtype=np.float64)
        for i in range(queries.shape[0]):
            ids[i], sims[i] = self.query(queries[i], k, ef=ef)
        return ids, sims


def exact_topk(vectors, query, k, metric="cosine"):
    """Brute-force reference search (linear scan)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if metric == "cosine":
        vn = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
        qn = query / max(np.linalg.norm(query), 1e-12)
        sims = vn @ qn
    else:
        sims = vectors @ query
    k = min(k, vectors.shape[0])
    order = np.argsort(-sims, kind="stable")[:k]
    return order, sims[order]
