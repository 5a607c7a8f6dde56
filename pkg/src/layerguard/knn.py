"""Nearest-neighbor indices over layer representations.

Cosine distance is the default; euclidean is available for the attack path.
Exact mode is a vectorized brute-force scan and is the reference below
EXACT_DEFAULT_MAX points. Approximate mode builds a neighbor graph by
NN-descent-style refinement and answers queries with a greedy beam search;
it targets recall >= 0.95 against the exact scan.

Distance ties are broken toward the smaller point index so results are
stable across runs and platforms.
"""

import math
import struct

import numpy as np

EXACT_DEFAULT_MAX = 5000
_MAGIC = b"LGKNN1\x00\x00"


def default_k(n):
    """Neighborhood size heuristic: ceil(n ** 0.4), at least 1."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    return max(1, math.ceil(n ** 0.4))


def _as_points(points):
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"point set must be a non-empty 2-D array, got shape {pts.shape}")
    return pts


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"{what}: zero-norm vector not allowed under cosine distance")
    return x / norms[:, None]


def _pairwise(metric, queries, points, points_unit=None):
    """Distance matrix (Q x M). Cosine requires non-zero rows."""
    if metric == "cosine":
        qu = _unit_rows(queries, "query")
        pu = points_unit if points_unit is not None else _unit_rows(points, "point set")
        d = 1.0 - qu @ pu.T
        # Rounding can push parallel-vector distances slightly negative.
        np.clip(d, 0.0, 2.0, out=d)
        return d
    sq = (
        np.sum(queries ** 2, axis=1)[:, None]
        + np.sum(points ** 2, axis=1)[None, :]
        - 2.0 * (queries @ points.T)
    )
    np.clip(sq, 0.0, None, out=sq)
    return np.sqrt(sq)


def _tie_sorted(dist_row):
    """Ascending order of a distance row with ties broken by smaller index."""
    return np.argsort(dist_row, kind="stable")


class NeighborList:
    """k neighbor indices with ascending distances."""

    __slots__ = ("indices", "distances")

    def __init__(self, indices, distances):
        indices = np.asarray(indices, dtype=np.int64)
        distances = np.asarray(distances, dtype=np.float64)
        if indices.shape != distances.shape or indices.ndim != 1:
            raise ValueError("indices/distances must be 1-D arrays of equal length")
        if indices.size > 1 and np.any(np.diff(distances) < 0):
            raise ValueError("distances must be non-decreasing")
        if indices.size and distances[0] < 0:
            raise ValueError("distances must be non-negative")
        self.indices = indices
        self.distances = distances

    def __len__(self):
        return self.indices.size


class ClassCounts:
    """Per-class neighbor counts; sums to the neighborhood size."""

    __slots__ = ("counts",)

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.int64)

    @property
    def k(self):
        return int(self.counts.sum())


def class_counts(neighbors, labels, m):
    """Histogram of neighbor labels over m classes."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = labels[neighbors.indices]
    if picked.size and (picked.min() < 0 or picked.max() >= m):
        raise ValueError(f"neighbor label out of range [0, {m})")
    return ClassCounts(np.bincount(picked, minlength=m))


class KnnIndex:
    """Queryable nearest-neighbor structure over one point set.

    mode="exact" scans all points; mode="approx" walks an NN-descent graph.
    Instances are immutable after build and safe for concurrent queries.
    """

    def __init__(self, points, metric="cosine", mode="exact", graph=None):
        if metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric: {metric!r}")
        if mode not in ("exact", "approx"):
            raise ValueError(f"unknown mode: {mode!r}")
        if mode == "approx" and graph is None:
            raise ValueError("approx mode requires a neighbor graph")
        self.points = _as_points(points)
        self.metric = metric
        self.mode = mode
        self._unit = _unit_rows(self.points, "point set") if metric == "cosine" else None
        self._graph = graph

    @property
    def num_points(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def query(self, x, k, exclude_self=False):
        """Nearest neighbors of a single query vector."""
        idx, dist = self.query_many(np.asarray(x, dtype=np.float64)[None, :], k, exclude_self)
        return NeighborList(idx[0], dist[0])

    def query_many(self, queries, k, exclude_self=False):
        """Batched query; returns (Q x k indices, Q x k distances).

        With exclude_self, one stored point identical to the query vector is
        omitted (leave-one-out semantics for points that are in the index).
        """
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise ValueError(f"query shape {queries.shape} incompatible with dim {self.dim}")
        cap = self.num_points - 1 if exclude_self else self.num_points
        if k < 1 or k > cap:
            raise ValueError(
                f"k={k} out of range for {self.num_points} points (exclude_self={exclude_self})"
            )
        if self.mode == "exact":
            return self._query_exact(queries, k, exclude_self)
        return self._query_graph(queries, k, exclude_self)

    # -- exact ----------------------------------------------------------------

    def _query_exact(self, queries, k, exclude_self):
        out_idx = np.empty((queries.shape[0], k), dtype=np.int64)
        out_dist = np.empty((queries.shape[0], k), dtype=np.float64)
        m = self.num_points
        need = k + (1 if exclude_self else 0)
        take = min(m, need + 8)
        chunk = max(1, int(2e7) // max(1, m))
        for start in range(0, queries.shape[0], chunk):
            stop = min(queries.shape[0], start + chunk)
            block = queries[start:stop]
            d = _pairwise(self.metric, block, self.points, self._unit)
            if take < m:
                part = np.argpartition(d, take - 1, axis=1)[:, :take]
            else:
                part = None
            for r in range(block.shape[0]):
                if part is None:
                    order = _tie_sorted(d[r])
                else:
                    cand = np.sort(part[r])  # index-ascending for stable tie-break
                    local = np.argsort(d[r, cand], kind="stable")
                    order = cand[local]
                    # Equal distances can straddle the partition boundary; fall
                    # back to the full scan when the k-th kept value ties the
                    # slice maximum.
                    if d[r, order[need - 1]] == d[r, order[-1]]:
                        order = _tie_sorted(d[r])
                if exclude_self:
                    order = self._drop_identical(order, block[r])
                sel = order[:k]
                out_idx[start + r] = sel
                out_dist[start + r] = d[r, sel]
        return out_idx, out_dist

    def _drop_identical(self, order, x):
        # Remove the first stored point that is exactly the query vector.
        # Identical points sort to the front, so a short scan suffices.
        for pos in range(min(order.size, 64)):
            if np.array_equal(self.points[order[pos]], x):
                return np.delete(order, pos)
        return order

    # -- approximate ----------------------------------------------------------

    def _query_graph(self, queries, k, exclude_self):
        graph = self._graph
        n = self.num_points
        ef = max(2 * k + 16, 48)
        out_idx = np.empty((queries.shape[0], k), dtype=np.int64)
        out_dist = np.empty((queries.shape[0], k), dtype=np.float64)
        entries = np.unique(np.linspace(0, n - 1, num=min(n, 8), dtype=np.int64))
        for qi in range(queries.shape[0]):
            x = queries[qi][None, :]
            known = {}

            def measure(ids, x=x, known=known):
                fresh = [int(i) for i in ids if int(i) not in known]
                if fresh:
                    d = _pairwise(self.metric, x, self.points[fresh], None)[0]
                    for i, v in zip(fresh, d):
                        known[i] = float(v)

            measure(entries)
            expanded = set()
            while True:
                ranked = sorted(known, key=lambda j: (known[j], j))
                frontier = [j for j in ranked[:ef] if j not in expanded]
                if not frontier:
                    break
                for nxt in frontier[:4]:
                    expanded.add(nxt)
                    measure(graph[nxt])
            order = sorted(known, key=lambda j: (known[j], j))
            if exclude_self:
                for pos in range(min(len(order), 64)):
                    if np.array_equal(self.points[order[pos]], queries[qi]):
                        del order[pos]
                        break
            sel = order[:k]
            if len(sel) < k:
                raise RuntimeError("graph search exhausted candidates before k neighbors")
            out_idx[qi] = sel
            out_dist[qi] = [known[j] for j in sel]
        return out_idx, out_dist

    # -- serialization ----------------------------------------------------------

    def save(self, path):
        """Serialize to a single binary file (versioned header + points + graph)."""
        metric_code = 0 if self.metric == "cosine" else 1
        mode_code = 0 if self.mode == "exact" else 1
        graph = self._graph if self._graph is not None else np.zeros((0, 0), dtype=np.int64)
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(
                struct.pack(
                    "<6q",
                    metric_code,
                    mode_code,
                    self.num_points,
                    self.dim,
                    graph.shape[0],
                    graph.shape[1],
                )
            )
            fh.write(self.points.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(graph, dtype="<i8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise ValueError(f"not a knn index file: bad magic {magic!r}")
            metric_code, mode_code, n, d, gr, gc = struct.unpack("<6q", fh.read(48))
            points = np.frombuffer(fh.read(n * d * 8), dtype="<f8").reshape(n, d).copy()
            graph = None
            if gr:
                graph = np.frombuffer(fh.read(gr * gc * 8), dtype="<i8").reshape(gr, gc).copy()
                if graph.min() < 0 or graph.max() >= n:
                    raise ValueError("graph edge out of range")
        metric = "cosine" if metric_code == 0 else "euclidean"
        mode = "exact" if mode_code == 0 else "approx"
        return cls(points, metric=metric, mode=mode, graph=graph)


def build_index(points, metric="cosine", mode="auto", seed=0, build_k=None):
    """Build a KnnIndex.

    mode="auto" picks exact below EXACT_DEFAULT_MAX points and approximate
    above. Cosine metric rejects zero-norm points at build time.
    """
    pts = _as_points(points)
    if metric == "cosine":
        _unit_rows(pts, "point set")  # fail fast on zero vectors
    if mode == "auto":
        mode = "exact" if pts.shape[0] < EXACT_DEFAULT_MAX else "approx"
    if mode == "exact":
        return KnnIndex(pts, metric=metric, mode="exact")
    if mode != "approx":
        raise ValueError(f"unknown mode: {mode!r}")
    if pts.shape[0] < 3:
        raise ValueError("approx mode needs at least 3 points")
    kb = build_k or max(default_k(pts.shape[0]), 12)
    kb = min(kb, pts.shape[0] - 1)
    graph = _nn_descent(pts, metric, kb, seed)
    return KnnIndex(pts, metric=metric, mode="approx", graph=graph)


def _rowwise_dist(metric, x, points, cand, unit=None):
    """Distances from x[i] to points[cand[i, j]]; x is (n, d), cand is (n, C)."""
    gathered = points[cand]  # (n, C, d)
    if metric == "cosine":
        xu = x if unit is None else unit
        gu = gathered / np.linalg.norm(gathered, axis=2, keepdims=True)
        d = 1.0 - np.einsum("nd,ncd->nc", xu, gu)
        np.clip(d, 0.0, 2.0, out=d)
        return d
    diff = gathered - x[:, None, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _nn_descent(points, metric, k, seed, max_iters=10, n_random=4):
    """Neighbor-of-neighbor descent producing an n x k graph, vectorized.

    Each round proposes, for every point, its neighbors' neighbors plus a few
    random ids, then keeps the k closest overall. Stops when a round leaves
    the graph unchanged.
    """
    n = points.shape[0]
    rng = np.random.default_rng(seed)
    unit = _unit_rows(points, "point set") if metric == "cosine" else None
    self_ids = np.arange(n)[:, None]

    nbr = rng.integers(0, n - 1, size=(n, k))
    nbr[nbr >= self_ids] += 1

    def select(cand):
        """Merge candidate ids per row and keep the k best by (dist, id)."""
        cand = np.sort(cand, axis=1)  # id-ascending so stable sort breaks ties by id
        dup = np.zeros_like(cand, dtype=bool)
        dup[:, 1:] = cand[:, 1:] == cand[:, :-1]
        dup |= cand == self_ids
        out_d = np.empty(cand.shape, dtype=np.float64)
        chunk = max(1, int(4e6) // max(1, cand.shape[1] * points.shape[1]))
        for s in range(0, n, chunk):
            e = min(n, s + chunk)
            out_d[s:e] = _rowwise_dist(
                metric, points[s:e] if unit is None else unit[s:e], points, cand[s:e], unit=None
            )
        out_d[dup] = np.inf
        order = np.argsort(out_d, axis=1, kind="stable")[:, :k]
        return np.take_along_axis(cand, order, axis=1)

    nbr = select(np.concatenate([nbr, rng.integers(0, n, size=(n, k))], axis=1))
    for _ in range(max_iters):
        expand = nbr[nbr].reshape(n, k * k)
        rand = rng.integers(0, n, size=(n, n_random))
        new = select(np.concatenate([nbr, expand, rand], axis=1))
        if np.array_equal(new, nbr):
            break
        nbr = new
    return nbr
