"""NN-Descent k-nearest-neighbour graph over content vectors.

Vectors are L2-normalized once at insert and compared by cosine distance
``1 - <x, y>``.  Zero vectors cannot be normalized; every pair involving
one gets the maximal cosine distance 2.0.

Out-of-sample queries walk the graph best-first from a few random entry
points, using forward and reverse neighbour edges.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nere.errors import ConfigError, FormatError, PreconditionError

log = logging.getLogger(__name__)

MAX_DIST = 2.0


@dataclass(frozen=True)
class IndexConfig:
    K: int = 20
    rho: float = 0.5
    delta: float = 0.001
    max_iters: int = 12
    metric: str = "cosine"
    rng_seed: int = 0
    n_seeds: int = 3
    ef_min: int = 100  # lower bound on the query beam width (beam = max(2m, ef_min))
    pool_factor: float = 1.5  # candidate lists hold ceil(pool_factor*K) entries during descent

    def validate(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho must lie in (0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.pool_factor < 1.0:
            raise ConfigError("pool_factor must be >= 1")
        if self.max_iters < 0 or self.n_seeds < 1:
            raise ConfigError("max_iters >= 0 and n_seeds >= 1 required")
        if self.metric != "cosine":
            raise ConfigError(f"unsupported metric {self.metric!r}")


def normalize(points):
    X = np.array(points, dtype=np.float64, ndmin=2)
    if not np.all(np.isfinite(X)):
        raise PreconditionError("points must be finite")
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0
    X[~zero] /= norms[~zero, None]
    return X, zero


def _distances(X, zero, q, qzero):
    d = 1.0 - X @ q
    d[zero] = MAX_DIST
    if qzero:
        d[:] = MAX_DIST
    return np.maximum(d, 0.0)


@dataclass
class KNNGraph:
    ids: np.ndarray  # (N,) external point ids
    vectors: np.ndarray  # (N, d) normalized
    zero: np.ndarray  # (N,) bool, zero-vector flags
    indices: np.ndarray  # (N, K) internal neighbour positions
    distances: np.ndarray  # (N, K) ascending
    metric: str = "cosine"
    config: IndexConfig = field(default_factory=IndexConfig)
    history: list = field(default_factory=list)  # per-iteration (updates, total distance)
    _adj: list = field(default=None, repr=False)

    @property
    def N(self):
        return len(self.ids)

    @property
    def K(self):
        return self.indices.shape[1]

    def neighbor_ids(self, i):
        """External ids of the neighbours of the point at position ``i``."""
        return self.ids[self.indices[i]]

    def search_adjacency(self):
        if self._adj is None:
            adj = [set(row.tolist()) for row in self.indices]
            for i, row in enumerate(self.indices):
                for j in row:
                    adj[j].add(i)
            self._adj = [np.array(sorted(a), dtype=np.int64) for a in adj]
        return self._adj

    # -- serialization -------------------------------------------------------

    def save(self, path):
        """Header ``knng <N> <K> <metric>``, then per point: int64 id, K x (int64 id, float64 dist)."""
        rec = np.dtype([("id", "<i8"), ("nb", [("id", "<i8"), ("d", "<f8")], (self.K,))])
        arr = np.zeros(self.N, dtype=rec)
        arr["id"] = self.ids
        arr["nb"]["id"] = self.ids[self.indices]
        arr["nb"]["d"] = self.distances
        with Path(path).open("wb") as fh:
            fh.write(f"knng {self.N} {self.K} {self.metric}\n".encode("ascii"))
            fh.write(arr.tobytes())

    @classmethod
    def load(cls, path, ids, points, config: IndexConfig | None = None):
        """Rebuild a graph from its file plus the point store it was built over."""
        data = Path(path).read_bytes()
        nl = data.find(b"\n")
        header = data[:nl].decode("ascii", errors="replace").split() if nl >= 0 else []
        if len(header) != 4 or header[0] != "knng":
            raise FormatError(f"{path}: bad knng header", line=1)
        N, K, metric = int(header[1]), int(header[2]), header[3]
        rec = np.dtype([("id", "<i8"), ("nb", [("id", "<i8"), ("d", "<f8")], (K,))])
        body = data[nl + 1:]
        if len(body) != N * rec.itemsize:
            raise FormatError(f"{path}: expected {N * rec.itemsize} payload bytes, got {len(body)}")
        arr = np.frombuffer(body, dtype=rec)
        ids = np.asarray(ids, dtype=np.int64)
        if not np.array_equal(arr["id"], ids):
            raise FormatError(f"{path}: point ids do not match the supplied point store")
        pos = {int(s): i for i, s in enumerate(ids)}
        try:
            indices = np.vectorize(pos.__getitem__, otypes=[np.int64])(arr["nb"]["id"]) if N else np.zeros((0, K), np.int64)
        except KeyError as exc:
            raise FormatError(f"{path}: neighbour id {exc} not in point store") from None
        X, zero = normalize(points)
        cfg = config or IndexConfig(K=K, metric=metric)
        return cls(ids, X, zero, indices.reshape(N, K), arr["nb"]["d"].copy().reshape(N, K), metric, cfg)


class _Heaps:
    """Per-point sorted neighbour lists with new/old flags."""

    def __init__(self, N, K):
        self.idx = np.full((N, K), -1, dtype=np.int64)
        self.dist = np.full((N, K), np.inf)
        self.new = np.zeros((N, K), dtype=bool)
        self.members = [set() for _ in range(N)]

    def push(self, i, j, d):
        """Insert j into i's list if closer than the current worst; returns 1 on change."""
        dist = self.dist[i]
        if d >= dist[-1] or j in self.members[i]:
            return 0
        pos = int(np.searchsorted(dist, d, side="right"))
        idx, new = self.idx[i], self.new[i]
        dropped = idx[-1]
        if dropped >= 0:
            self.members[i].discard(int(dropped))
        dist[pos + 1:] = dist[pos:-1].copy()
        idx[pos + 1:] = idx[pos:-1].copy()
        new[pos + 1:] = new[pos:-1].copy()
        dist[pos], idx[pos], new[pos] = d, j, True
        self.members[i].add(j)
        return 1


def build(points, config: IndexConfig | None = None, ids=None) -> KNNGraph:
    """NN-Descent (local join over sampled new/old and reverse neighbours)."""
    config = config or IndexConfig()
    config.validate()
    X, zero = normalize(points)
    N = X.shape[0]
    K = config.K
    if N < K + 1:
        raise PreconditionError(f"need at least K+1={K + 1} points, got {N}")
    ids = np.arange(N, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) != N or len(np.unique(ids)) != N:
        raise PreconditionError("ids must be unique and match the number of points")
    rng = np.random.default_rng(config.rng_seed)

    def pair_dist(a, b):
        d = 1.0 - X[a] @ X[b].T
        d[zero[a]] = MAX_DIST
        d[:, zero[b]] = MAX_DIST
        return np.maximum(d, 0.0)

    pool = min(N - 1, int(np.ceil(config.pool_factor * K)))
    heaps = _Heaps(N, pool)
    for i in range(N):
        cand = rng.choice(N - 1, size=pool, replace=False)
        cand = cand + (cand >= i)
        d = pair_dist(np.array([i]), cand)[0]
        for j, dj in zip(cand.tolist(), d.tolist()):
            heaps.push(i, j, dj)

    history = [(0, float(heaps.dist[:, :K].sum()))]
    sample = max(1, int(round(config.rho * pool)))
    for it in range(config.max_iters):
        new_lists = [[] for _ in range(N)]
        old_lists = [[] for _ in range(N)]
        for i in range(N):
            flags = heaps.new[i]
            row = heaps.idx[i]
            old_lists[i] = row[~flags].tolist()
            fresh = np.flatnonzero(flags)
            if len(fresh) > sample:
                fresh = rng.choice(fresh, size=sample, replace=False)
            new_lists[i] = row[fresh].tolist()
            heaps.new[i, fresh] = False
        rev_new = [[] for _ in range(N)]
        rev_old = [[] for _ in range(N)]
        for i in range(N):
            for j in new_lists[i]:
                rev_new[j].append(i)
            for j in old_lists[i]:
                rev_old[j].append(i)

        updates = 0
        for v in range(N):
            nv = new_lists[v]
            ov = old_lists[v]
            rn, ro = rev_new[v], rev_old[v]
            if len(rn) > sample:
                rn = rng.choice(rn, size=sample, replace=False).tolist()
            if len(ro) > sample:
                ro = rng.choice(ro, size=sample, replace=False).tolist()
            new_c = np.array(sorted(set(nv) | set(rn)), dtype=np.int64)
            if len(new_c) == 0:
                continue
            old_c = np.array(sorted((set(ov) | set(ro)) - set(new_c.tolist())), dtype=np.int64)
            cand = np.concatenate([new_c, old_c])
            D = pair_dist(new_c, cand)
            n_new = len(new_c)
            # new-new pairs once (upper triangle), new-old pairs all
            mask = np.ones_like(D, dtype=bool)
            mask[:, :n_new] = np.triu(np.ones((n_new, n_new), dtype=bool), 1)
            worst = heaps.dist[:, -1]
            mask &= (D < worst[new_c][:, None]) | (D < worst[cand][None, :])
            for a, b in zip(*np.nonzero(mask)):
                u1, u2 = int(new_c[a]), int(cand[b])
                if u1 == u2:
                    continue
                d = float(D[a, b])
                updates += heaps.push(u1, u2, d)
                updates += heaps.push(u2, u1, d)
        total = float(heaps.dist[:, :K].sum())
        history.append((updates, total))
        log.debug("nn-descent iter %d updates %d total %.6f", it + 1, updates, total)
        if updates < config.delta * N * pool:
            break

    return KNNGraph(ids, X, zero, heaps.idx[:, :K].copy(), heaps.dist[:, :K].copy(), config.metric, config, history)


def query(graph: KNNGraph, vector, m, rng_seed=None):
    """Approximate m nearest points to ``vector``; returns ids sorted by (distance, id).

    Best-first walk with a result pool of ``max(2m, ef_min)`` entries from
    ``n_seeds`` random entry points.
    """
    ids, dists = query_with_distances(graph, vector, m, rng_seed)
    return ids


def query_with_distances(graph: KNNGraph, vector, m, rng_seed=None):
    N = graph.N
    if m < 1 or m > N:
        raise PreconditionError(f"m must lie in [1, N={N}], got {m}")
    qv, qz = normalize(vector)
    q, qzero = qv[0], bool(qz[0])
    X, zero = graph.vectors, graph.zero
    adj = graph.search_adjacency()
    ef = max(2 * m, graph.config.ef_min, m)
    seed = graph.config.rng_seed if rng_seed is None else rng_seed
    rng = np.random.default_rng([seed, 7])

    def dist_to(nodes):
        d = 1.0 - X[nodes] @ q
        d[zero[nodes]] = MAX_DIST
        if qzero:
            d[:] = MAX_DIST
        return np.maximum(d, 0.0)

    visited = np.zeros(N, dtype=bool)
    results = []  # max-heap via (-d, -id)
    frontier = []  # min-heap (d, id)

    def admit(nodes):
        nodes = nodes[~visited[nodes]]
        if len(nodes) == 0:
            return
        visited[nodes] = True
        for n, d in zip(nodes.tolist(), dist_to(nodes).tolist()):
            if len(results) < ef:
                heapq.heappush(results, (-d, -n))
                heapq.heappush(frontier, (d, n))
            elif (d, n) < (-results[0][0], -results[0][1]):
                heapq.heapreplace(results, (-d, -n))
                heapq.heappush(frontier, (d, n))

    seeds = rng.choice(N, size=min(graph.config.n_seeds, N), replace=False)
    admit(np.asarray(seeds, dtype=np.int64))
    while True:
        while frontier:
            d, c = heapq.heappop(frontier)
            if len(results) >= ef and d > -results[0][0]:
                break
            admit(adj[c])
        if len(results) >= m or visited.all():
            break
        # disconnected component: restart from an unvisited point
        rest = np.flatnonzero(~visited)
        admit(np.array([rest[rng.integers(len(rest))]], dtype=np.int64))

    pool = sorted((-nd, -nn) for nd, nn in results)[:m]
    pos = np.array([p for _, p in pool], dtype=np.int64)
    return graph.ids[pos], np.array([d for d, _ in pool])


def brute_force_knn(points, vector, m, ids=None):
    """Exact top-m by cosine distance, ties broken by ascending id."""
    X, zero = normalize(points)
    N = X.shape[0]
    if m < 1 or m > N:
        raise PreconditionError(f"m must lie in [1, N={N}], got {m}")
    ids = np.arange(N, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    qv, qz = normalize(vector)
    d = _distances(X, zero, qv[0], bool(qz[0]))
    order = np.lexsort((ids, d))[:m]
    return ids[order]


def brute_force_graph(points, K):
    """Exact K-NN lists (positions, excluding self) for recall measurement."""
    X, zero = normalize(points)
    N = X.shape[0]
    D = 1.0 - X @ X.T
    D[zero, :] = MAX_DIST
    D[:, zero] = MAX_DIST
    np.fill_diagonal(D, np.inf)
    order = np.argsort(D, axis=1, kind="stable")[:, :K]
    return order


def graph_recall(graph: KNNGraph, exact):
    hits = sum(len(set(graph.indices[i].tolist()) & set(exact[i].tolist())) for i in range(graph.N))
    return hits / exact.size
