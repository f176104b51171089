"""Hierarchical proximity graph for maximum inner-product search.

Distances are negated dot products. Graph state lives in flat numpy arrays so
the hot loops compile with numba; layer 0 keeps up to ``2 * M`` neighbors per
node and upper layers up to ``M``.
"""

from __future__ import annotations

import heapq
import math
import struct
from pathlib import Path

import numba
import numpy as np

GRAPH_MAGIC = b"RKG1"
MAX_LEVEL = 16


@numba.njit(cache=True)
def _dist(vecs, i, q):
    s = 0.0
    for t in range(q.shape[0]):
        s += vecs[i, t] * q[t]
    return -s


@numba.njit(cache=True)
def _pair(vecs, i, j):
    s = 0.0
    for t in range(vecs.shape[1]):
        s += vecs[i, t] * vecs[j, t]
    return -s


@numba.njit(cache=True)
def _neighbors(node, layer, nbr0, deg0, slot, upn, upd):
    if layer == 0:
        return nbr0[node, :deg0[node]]
    s = slot[node]
    return upn[s, layer - 1, :upd[s, layer - 1]]


@numba.njit(cache=True)
def _search_layer(q, eps, ef, layer, vecs, nbr0, deg0, slot, upn, upd, visited, state):
    state[2] += 1
    stamp = state[2]
    cand = [(0.0, np.int64(0))]
    cand.pop()
    res = [(0.0, np.int64(0))]
    res.pop()
    for e in eps:
        if visited[e] == stamp:
            continue
        visited[e] = stamp
        d = _dist(vecs, e, q)
        heapq.heappush(cand, (d, np.int64(e)))
        heapq.heappush(res, (-d, np.int64(e)))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        d, c = heapq.heappop(cand)
        if len(res) >= ef and d > -res[0][0]:
            break
        nb = _neighbors(c, layer, nbr0, deg0, slot, upn, upd)
        for j in range(nb.shape[0]):
            e = nb[j]
            if visited[e] == stamp:
                continue
            visited[e] = stamp
            de = _dist(vecs, e, q)
            if len(res) < ef or de < -res[0][0]:
                heapq.heappush(cand, (de, np.int64(e)))
                heapq.heappush(res, (-de, np.int64(e)))
                if len(res) > ef:
                    heapq.heappop(res)
    n = len(res)
    ids = np.empty(n, np.int64)
    ds = np.empty(n, np.float64)
    for i in range(n - 1, -1, -1):
        nd, e = heapq.heappop(res)
        ids[i] = e
        ds[i] = -nd
    return ds, ids


@numba.njit(cache=True)
def _select(ds, ids, m, vecs, skip):
    """Neighbor heuristic: prefer candidates closer to the base than to any kept one,
    then top up with the pruned ones (nearest first) so lists stay full."""
    out = np.empty(m, np.int64)
    pruned = np.empty(ids.shape[0], np.int64)
    n = 0
    n_pruned = 0
    for i in range(ids.shape[0]):
        e = ids[i]
        if e == skip:
            continue
        good = True
        for j in range(n):
            if _pair(vecs, e, out[j]) < ds[i]:
                good = False
                break
        if good:
            out[n] = e
            n += 1
            if n == m:
                break
        else:
            pruned[n_pruned] = e
            n_pruned += 1
    j = 0
    while n < m and j < n_pruned:
        out[n] = pruned[j]
        n += 1
        j += 1
    return out[:n]


@numba.njit(cache=True)
def _set_neighbors(node, layer, sel, nbr0, deg0, slot, upn, upd):
    if layer == 0:
        nbr0[node, :sel.shape[0]] = sel
        deg0[node] = sel.shape[0]
    else:
        s = slot[node]
        upn[s, layer - 1, :sel.shape[0]] = sel
        upd[s, layer - 1] = sel.shape[0]


@numba.njit(cache=True)
def _link(e, node, layer, m_max, vecs, nbr0, deg0, slot, upn, upd):
    cur = _neighbors(e, layer, nbr0, deg0, slot, upn, upd)
    for j in range(cur.shape[0]):
        if cur[j] == node:
            return
    if cur.shape[0] < m_max:
        if layer == 0:
            nbr0[e, deg0[e]] = node
            deg0[e] += 1
        else:
            s = slot[e]
            upn[s, layer - 1, upd[s, layer - 1]] = node
            upd[s, layer - 1] += 1
        return
    n = cur.shape[0] + 1
    cids = np.empty(n, np.int64)
    cds = np.empty(n, np.float64)
    for j in range(n - 1):
        cids[j] = cur[j]
        cds[j] = _pair(vecs, e, cur[j])
    cids[n - 1] = node
    cds[n - 1] = _pair(vecs, e, node)
    order = np.argsort(cds)
    sel = _select(cds[order], cids[order], m_max, vecs, e)
    _set_neighbors(e, layer, sel, nbr0, deg0, slot, upn, upd)


@numba.njit(cache=True)
def _insert(node, m, m0, efc, vecs, levels, nbr0, deg0, slot, upn, upd, visited, state):
    level = levels[node]
    if state[0] < 0:
        state[0] = node
        state[1] = level
        return
    q = vecs[node]
    ep = np.array([state[0]], np.int64)
    top = state[1]
    for layer in range(top, level, -1):
        ds, ids = _search_layer(q, ep, 1, layer, vecs, nbr0, deg0, slot, upn, upd, visited, state)
        if ids[0] == node and ids.shape[0] > 1:
            ep = ids[1:2]
        else:
            ep = ids[:1]
    for layer in range(min(level, top), -1, -1):
        ds, ids = _search_layer(q, ep, efc, layer, vecs, nbr0, deg0, slot, upn, upd, visited, state)
        sel = _select(ds, ids, m, vecs, node)
        _set_neighbors(node, layer, sel, nbr0, deg0, slot, upn, upd)
        m_max = m0 if layer == 0 else m
        for j in range(sel.shape[0]):
            _link(sel[j], node, layer, m_max, vecs, nbr0, deg0, slot, upn, upd)
        ep = ids
    if level > top:
        state[0] = node
        state[1] = level


@numba.njit(cache=True)
def _build(start, stop, m, m0, efc, vecs, levels, nbr0, deg0, slot, upn, upd, visited, state):
    for node in range(start, stop):
        _insert(node, m, m0, efc, vecs, levels, nbr0, deg0, slot, upn, upd, visited, state)


@numba.njit(cache=True)
def _query(q, k, ef, vecs, nbr0, deg0, slot, upn, upd, visited, state):
    ep = np.array([state[0]], np.int64)
    for layer in range(state[1], 0, -1):
        ds, ids = _search_layer(q, ep, 1, layer, vecs, nbr0, deg0, slot, upn, upd, visited, state)
        ep = ids[:1]
    ds, ids = _search_layer(q, ep, max(ef, k), 0, vecs, nbr0, deg0, slot, upn, upd, visited, state)
    return ds, ids


class HNSWGraph:
    """Graph over row positions of a vector matrix (rows are owned by the caller)."""

    def __init__(self, m: int = 16, ef_construction: int = 200, seed: int = 0):
        self.m, self.m0, self.ef_construction = m, 2 * m, ef_construction
        self.rng = np.random.default_rng(seed)
        self.count = 0
        self.levels = np.zeros(0, np.int64)
        self.nbr0 = np.zeros((0, self.m0), np.int64)
        self.deg0 = np.zeros(0, np.int64)
        self.slot = np.zeros(0, np.int64)
        self.upn = np.zeros((0, MAX_LEVEL - 1, m), np.int64)
        self.upd = np.zeros((0, MAX_LEVEL - 1), np.int64)
        self.state = np.array([-1, 0, 0], np.int64)  # entry point, top level, visit stamp

    def _draw_levels(self, n: int) -> np.ndarray:
        ml = 1.0 / math.log(self.m)
        u = 1.0 - self.rng.random(n)
        return np.minimum((-np.log(u) * ml).astype(np.int64), MAX_LEVEL - 1)

    def _grow(self, n_new: int) -> None:
        lv = self._draw_levels(n_new)
        start = self.count
        self.levels = np.concatenate([self.levels, lv])
        self.nbr0 = np.concatenate([self.nbr0, np.zeros((n_new, self.m0), np.int64)])
        self.deg0 = np.concatenate([self.deg0, np.zeros(n_new, np.int64)])
        n_up = int((lv > 0).sum())
        base = len(self.upd)
        slots = np.full(n_new, -1, np.int64)
        slots[lv > 0] = base + np.arange(n_up)
        self.slot = np.concatenate([self.slot, slots])
        self.upn = np.concatenate([self.upn, np.zeros((n_up, MAX_LEVEL - 1, self.m), np.int64)])
        self.upd = np.concatenate([self.upd, np.zeros((n_up, MAX_LEVEL - 1), np.int64)])
        self.count = start + n_new

    def _arrays(self):
        return self.nbr0, self.deg0, self.slot, self.upn, self.upd

    def add(self, vecs: np.ndarray, n_new: int) -> None:
        """Insert the last ``n_new`` rows of ``vecs``."""
        start = self.count
        self._grow(n_new)
        visited = np.zeros(self.count, np.int64)
        self.state[2] = 0
        _build(start, self.count, self.m, self.m0, self.ef_construction, vecs, self.levels,
               *self._arrays(), visited, self.state)

    def relink(self, vecs: np.ndarray, node: int) -> None:
        """Reconnect ``node`` after its vector changed."""
        visited = np.zeros(self.count, np.int64)
        self.state[2] = 0
        _insert(node, self.m, self.m0, self.ef_construction, vecs, self.levels, *self._arrays(),
                visited, self.state)

    def search(self, vecs: np.ndarray, q: np.ndarray, k: int, ef: int) -> tuple[np.ndarray, np.ndarray]:
        """(row ids, dot scores) of up to max(ef, k) approximate neighbors, best first."""
        if self.count == 0:
            return np.zeros(0, np.int64), np.zeros(0)
        visited = np.zeros(self.count, np.int64)
        state = self.state.copy()
        state[2] = 0
        ds, ids = _query(np.asarray(q, dtype=vecs.dtype), k, ef, vecs, *self._arrays(), visited, state)
        return ids, -ds

    def copy(self) -> "HNSWGraph":
        g = HNSWGraph.__new__(HNSWGraph)
        g.m, g.m0, g.ef_construction = self.m, self.m0, self.ef_construction
        g.rng = np.random.default_rng(self.rng.integers(1 << 62))
        g.count = self.count
        for name in ("levels", "nbr0", "deg0", "slot", "upn", "upd", "state"):
            setattr(g, name, getattr(self, name).copy())
        return g

    # -- persistence ----------------------------------------------------------

    def save(self, path, model_version: str) -> None:
        raw = model_version.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(GRAPH_MAGIC)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<IIIIi", self.count, self.m, self.ef_construction,
                                 int(self.state[1]), int(self.state[0])))
            for node in range(self.count):
                lv = int(self.levels[node])
                fh.write(struct.pack("<I", lv))
                for layer in range(lv + 1):
                    nb = _neighbors(node, layer, *self._arrays())
                    fh.write(struct.pack("<I", len(nb)))
                    fh.write(nb.astype("<u4").tobytes())

    @classmethod
    def load(cls, path) -> tuple["HNSWGraph", str]:
        buf = Path(path).read_bytes()
        if buf[:4] != GRAPH_MAGIC:
            raise ValueError(f"{path}: not an RKG1 graph file")
        (n,) = struct.unpack_from("<I", buf, 4)
        version = buf[8:8 + n].decode("utf-8")
        pos = 8 + n
        count, m, efc, top, entry = struct.unpack_from("<IIIIi", buf, pos)
        pos += 20
        g = cls(m=m, ef_construction=efc)
        lists = []
        levels = np.zeros(count, np.int64)
        for node in range(count):
            (lv,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            levels[node] = lv
            per = []
            for _ in range(lv + 1):
                (deg,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                per.append(np.frombuffer(buf, dtype="<u4", count=deg, offset=pos).astype(np.int64))
                pos += 4 * deg
            lists.append(per)
        g.count = count
        g.levels = levels
        g.nbr0 = np.zeros((count, g.m0), np.int64)
        g.deg0 = np.zeros(count, np.int64)
        n_up = int((levels > 0).sum())
        g.slot = np.full(count, -1, np.int64)
        g.slot[levels > 0] = np.arange(n_up)
        g.upn = np.zeros((n_up, MAX_LEVEL - 1, m), np.int64)
        g.upd = np.zeros((n_up, MAX_LEVEL - 1), np.int64)
        for node, per in enumerate(lists):
            for layer, nb in enumerate(per):
                _set_neighbors(node, layer, nb, *g._arrays())
        g.state = np.array([entry, top, 0], np.int64)
        return g, version
