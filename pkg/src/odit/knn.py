"""Exact and approximate k-nearest-neighbour queries.

Both backends return identical numbers for the same examined candidates:
final squared distances always come from :func:`sq_distances`, and ties are
broken by the lower reference index.  That is what makes the approximate
backend with an unlimited budget bit-identical to the exact one.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import DataError, Dataset, ObservationVector, as_matrix

_EPS = np.finfo(np.float64).eps
_EPS32 = float(np.finfo(np.float32).eps)


def sq_distances(x: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from ``x`` to the rows of ``Y``.

    Works for ``x`` of shape (d,) against (m, d) and for (b, 1, d) against
    (b, m, d); the per-row summation order is the same either way.
    """
    diff = Y - x
    return (diff * diff).sum(axis=-1)


@dataclass(frozen=True)
class NeighborResult:
    distances: np.ndarray
    neighbor_indices: np.ndarray
    per_dimension_sq: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.distances.shape[0]


def per_dimension_gaps(x: np.ndarray, reference: np.ndarray, idx: np.ndarray, s: int) -> np.ndarray:
    """Per-dimension squared gaps summed over the last ``s`` of the neighbours.

    ``x`` is (b, d), ``idx`` is (b, k) sorted by distance.  Returns (b, d).
    """
    nb = reference[idx[:, idx.shape[1] - s:]]
    diff = nb - x[:, None, :]
    return (diff * diff).sum(axis=1)


def _select(d2: np.ndarray, cand: np.ndarray, k: int):
    """Pick the k best (distance, index) pairs along the last axis."""
    order = np.lexsort((cand, d2), axis=-1)[..., :k]
    return (np.take_along_axis(d2, order, axis=-1),
            np.take_along_axis(cand, order, axis=-1))


class ExactIndex:
    """Brute-force kNN over a fixed reference array.

    Candidates come from a float32 ``|y|^2 - 2 x.y`` expansion on centred
    data, computed tile by tile (or from a k-d tree in low dimension).  They
    are re-scored with direct float64 differences and the result is
    certified against an error bound on the expansion; queries whose
    certificate fails are recomputed exhaustively.
    """

    backend = "exact"

    def __init__(self, data, chunk_size: int = 256, kdtree_max_dim: int = 8, tile: int = 8192):
        data = np.ascontiguousarray(as_matrix(data), dtype=np.float64)
        self.data = data
        self.chunk_size = chunk_size
        self.tile = tile
        self._use_kdtree = data.shape[1] <= kdtree_max_dim
        self._kdtree = None
        if not self._use_kdtree:
            self._center = data.mean(axis=0)
            centred = data - self._center
            sq = np.einsum("ij,ij->i", centred, centred)
            self.max_sqnorm = float(sq.max())
            self._yt32 = np.ascontiguousarray(centred.T, dtype=np.float32)
            self._sn32 = sq.astype(np.float32)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def _tree(self):
        if self._kdtree is None:
            self._kdtree = cKDTree(self.data)
        return self._kdtree

    def query(self, Q, k: int, exclude: np.ndarray | None = None):
        """Return ``(distances, indices)``, each of shape (b, k).

        ``exclude`` optionally gives, per query row, one reference index that
        must not be returned (self-exclusion in no-partition training).
        """
        Q = as_matrix(Q, self.dim)
        avail = self.size - (exclude is not None)
        if k < 1 or k > avail:
            raise DataError(f"k={k} but only {avail} reference points available")
        b = Q.shape[0]
        out_d2 = np.empty((b, k))
        out_idx = np.empty((b, k), dtype=np.intp)
        for start in range(0, b, self.chunk_size):
            stop = min(b, start + self.chunk_size)
            ex = None if exclude is None else np.asarray(exclude[start:stop], dtype=np.intp)
            d2, idx = self._query_chunk(Q[start:stop], k, ex)
            out_d2[start:stop] = d2
            out_idx[start:stop] = idx
        return np.sqrt(out_d2), out_idx

    # -- internals ---------------------------------------------------------

    def _slack(self, qn: np.ndarray) -> np.ndarray:
        # generous bound on |float32 expansion - exact expansion| plus the
        # float64 rounding of the direct re-scoring
        return (8.0 * (self.dim + 2) * _EPS32 * (qn + self.max_sqnorm)
                + 8.0 * (self.dim + 2) * _EPS * (qn + self.max_sqnorm) + 1e-300)

    def _query_chunk(self, Qc, k, exclude):
        n = self.size
        m = k + (exclude is not None) + 8
        if m >= n:
            cand = np.broadcast_to(np.arange(n), (Qc.shape[0], n))
            return self._refine(Qc, cand, k, exclude, None)
        if self._use_kdtree:
            dist, cand = self._tree().query(Qc, k=m + 1)
            cand = np.asarray(cand, dtype=np.intp).reshape(Qc.shape[0], m + 1)
            dist = np.asarray(dist).reshape(Qc.shape[0], m + 1)
            # k-d tree distances are exact up to float64 rounding
            lower = dist[:, m] ** 2 - 8.0 * (self.dim + 2) * _EPS * dist[:, m] ** 2
            return self._refine(Qc, cand[:, :m], k, exclude, lower)
        cand, lower = self._expansion_candidates(Qc, m)
        return self._refine(Qc, cand, k, exclude, lower)

    def _expansion_candidates(self, Qc, m):
        """The m smallest expansion values per row, and a lower bound on the
        squared distance of every reference point left out."""
        b, n = Qc.shape[0], self.size
        centred = Qc - self._center
        qn = np.einsum("ij,ij->i", centred, centred)
        q32 = centred.astype(np.float32)
        width = max(self.tile, 2 * m)
        rows, cols, vals = [], [], []
        cut = None
        for s in range(0, n, width):
            G = q32 @ self._yt32[:, s:s + width]
            G *= -2.0
            G += self._sn32[s:s + width]
            if cut is None:
                # the first tile's m-th smallest value bounds the global one from above
                cut = np.partition(G, m - 1, axis=1)[:, m - 1]
            # flatnonzero is far cheaper than 2-D nonzero here
            flat = np.flatnonzero(G <= cut[:, None])
            r, c = np.divmod(flat, G.shape[1])
            rows.append(r)
            cols.append(c + s)
            vals.append(G.ravel()[flat])
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        order = np.lexsort((cols, vals, rows))
        cols, vals = cols[order], vals[order]
        counts = np.bincount(rows, minlength=b)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        cand = cols[starts[:, None] + np.arange(m)]
        # points never collected have G > cut; collected ones past m are explicit
        nxt = np.where(counts > m, vals[np.minimum(starts + m, vals.shape[0] - 1)], cut)
        lower = nxt.astype(np.float64) + qn - self._slack(qn)
        return cand, lower

    def _refine(self, Qc, cand, k, exclude, lower):
        cand = np.ascontiguousarray(cand)
        d2 = sq_distances(Qc[:, None, :], self.data[cand])
        if exclude is not None:
            d2 = np.where(cand == exclude[:, None], np.inf, d2)
        d2k, idxk = _select(d2, cand, k)
        if lower is not None:
            bad = np.flatnonzero(~(d2k[:, -1] < lower))
            for r in bad:
                d2k[r], idxk[r] = self._full_row(Qc[r], k, None if exclude is None else exclude[r])
        return d2k, idxk

    def _full_row(self, q, k, exclude):
        d2 = sq_distances(q, self.data)
        idx = np.arange(self.size)
        if exclude is not None:
            d2[exclude] = np.inf
        return _select(d2, idx, k)


def _reference_array(reference) -> np.ndarray:
    if isinstance(reference, Dataset):
        return reference.rows
    return as_matrix(reference)


def _to_result(x, data, dist, idx, want_decomposition, s):
    gaps = None
    if want_decomposition:
        if not 1 <= s <= dist.shape[0]:
            raise DataError("s must lie in [1, k]")
        gaps = per_dimension_gaps(x[None, :], data, idx[None, :], s)[0]
    return NeighborResult(dist, idx, gaps)


def exact_knn(query, reference, k: int, want_decomposition: bool = False, s: int = 1) -> NeighborResult:
    """k nearest reference points of a single query by exhaustive search.

    ``reference`` may be a :class:`Dataset`, an array or an :class:`ExactIndex`.
    The decomposition covers neighbours ``k-s+1 .. k``.
    """
    index = reference if isinstance(reference, ExactIndex) else ExactIndex(_reference_array(reference))
    x = query.values if isinstance(query, ObservationVector) else np.asarray(query, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != index.dim:
        raise DataError(f"dimension mismatch: expected {index.dim}")
    dist, idx = index.query(x[None, :], k)
    return _to_result(x, index.data, dist[0], idx[0], want_decomposition, s)


# ---------------------------------------------------------------------------
# priority-search k-means tree

@dataclass
class _Node:
    center: np.ndarray
    children: list | None = None
    child_centers: np.ndarray | None = None
    indices: np.ndarray | None = None


def _assign(X: np.ndarray, centers: np.ndarray, exact: bool) -> np.ndarray:
    if not exact:
        G = (centers * centers).sum(axis=1)[None, :] - 2.0 * (X @ centers.T)
        return G.argmin(axis=1)
    labels = np.empty(X.shape[0], dtype=np.intp)
    step = max(1, 4_000_000 // (centers.size + 1))
    for start in range(0, X.shape[0], step):
        block = X[start:start + step]
        labels[start:start + step] = sq_distances(block[:, None, :], centers[None, :, :]).argmin(axis=1)
    return labels


def _kmeans(X: np.ndarray, C: int, max_iters: int, rng: np.random.Generator):
    """Lloyd iterations from C distinct random points.

    The returned labels are a nearest-centre assignment (direct distances)
    to exactly the returned centres, so a search descending by nearest
    centre follows the same path a reference point took during the build.
    """
    n = X.shape[0]
    centers = X[rng.choice(n, size=C, replace=False)].copy()
    labels = None
    for _ in range(max_iters):
        new = _assign(X, centers, exact=False)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=C)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            # empty cluster takes over the farthest point of the largest one
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[int(np.argmax(sq_distances(centers[big], X[members])))]
            centers[j] = X[far]
            labels[far] = j
            counts[big] -= 1
            counts[j] = 1
    return centers, _assign(X, centers, exact=True)


class KMeansTree:
    """Hierarchical k-means index with priority search (FLANN style).

    Parameters
    ----------
    data : ndarray, shape (N, d)
        Reference points; indices returned by queries refer to its rows.
    branching : int
        Number of clusters per internal node (``C``).
    max_iters : int
        Lloyd iterations per node (``I_max``).
    seed : int
        Seed for the random centre initialisation.
    """

    backend = "approximate"

    def __init__(self, data, branching: int = 100, max_iters: int = 10, seed: int = 0):
        if branching < 2:
            raise DataError("branching factor C must be at least 2")
        if max_iters < 1:
            raise DataError("max_iters must be positive")
        self.data = np.ascontiguousarray(as_matrix(data), dtype=np.float64)
        if self.data.shape[0] < 1:
            raise DataError("cannot build a tree on an empty reference set")
        self.branching = branching
        self.max_iters = max_iters
        self.seed = seed
        rng = np.random.default_rng(seed)
        all_idx = np.arange(self.data.shape[0])
        self.root = self._build(all_idx, rng)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def _build(self, idx: np.ndarray, rng) -> _Node:
        X = self.data[idx]
        center = X.mean(axis=0)
        if idx.shape[0] <= self.branching:
            return _Node(center, indices=idx)
        centers, labels = _kmeans(X, self.branching, self.max_iters, rng)
        groups = [np.flatnonzero(labels == j) for j in range(self.branching)]
        keep = [j for j, g in enumerate(groups) if g.size]
        if len(keep) < 2:
            # cannot split (e.g. all points identical)
            return _Node(center, indices=idx)
        children = [self._build(idx[groups[j]], rng) for j in keep]
        return _Node(center, children=children, child_centers=np.ascontiguousarray(centers[keep]))

    def leaves(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.children is None:
                yield node
            else:
                stack.extend(reversed(node.children))

    def height(self) -> int:
        def h(node):
            return 0 if node.children is None else 1 + max(h(c) for c in node.children)
        return h(self.root)

    def structure(self):
        """Nested tuple view of the tree, for equality checks."""
        def walk(node):
            if node.children is None:
                return ("leaf", tuple(node.indices.tolist()))
            return ("node", node.child_centers.tobytes(), tuple(walk(c) for c in node.children))
        return walk(self.root)

    def candidates(self, q: np.ndarray, k: int, B: int) -> np.ndarray:
        """Reference indices examined by a priority search with budget ``B``.

        Leaves are visited whole, closest centre first.  A leaf that would
        push the count past ``B`` ends the search, unless fewer than ``k``
        points have been gathered so far.
        """
        if B >= self.size:
            return np.arange(self.size)
        counter = itertools.count()
        heap = [(0.0, next(counter), self.root)]
        found = []
        examined = 0
        while heap:
            _, _, node = heapq.heappop(heap)
            while node.children is not None:
                d2 = sq_distances(q, node.child_centers)
                best = int(np.argmin(d2))
                for j, child in enumerate(node.children):
                    if j != best:
                        heapq.heappush(heap, (float(d2[j]), next(counter), child))
                node = node.children[best]
            leaf = node.indices
            if examined >= k and examined + leaf.shape[0] > B:
                break
            found.append(leaf)
            examined += leaf.shape[0]
            if examined >= B:
                break
        return np.concatenate(found)

    def query_one(self, q: np.ndarray, k: int, B: int):
        cand = self.candidates(q, k, B)
        d2 = sq_distances(q, self.data[cand])
        return _select(d2, cand, k)


def build_kmeans_tree(reference, C: int = 100, Imax: int = 10, seed: int = 0) -> KMeansTree:
    return KMeansTree(_reference_array(reference), branching=C, max_iters=Imax, seed=seed)


class ApproxIndex:
    """Query adaptor giving a :class:`KMeansTree` the same interface as :class:`ExactIndex`."""

    backend = "approximate"

    def __init__(self, tree: KMeansTree, B: int = 1000):
        if B < 1:
            raise DataError("B must be positive")
        self.tree = tree
        self.B = B
        self.data = tree.data

    @property
    def size(self) -> int:
        return self.tree.size

    @property
    def dim(self) -> int:
        return self.tree.dim

    def query(self, Q, k: int, exclude: np.ndarray | None = None):
        Q = as_matrix(Q, self.dim)
        if self.B < k:
            raise DataError(f"budget B={self.B} is smaller than k={k}")
        avail = self.size - (exclude is not None)
        if k > avail:
            raise DataError(f"k={k} but only {avail} reference points available")
        b = Q.shape[0]
        out_d2 = np.empty((b, k))
        out_idx = np.empty((b, k), dtype=np.intp)
        kk = k + (exclude is not None)
        for r in range(b):
            cand = self.tree.candidates(Q[r], kk, max(self.B, kk))
            d2 = sq_distances(Q[r], self.data[cand])
            if exclude is not None:
                d2 = np.where(cand == exclude[r], np.inf, d2)
            out_d2[r], out_idx[r] = _select(d2, cand, k)
        return np.sqrt(out_d2), out_idx


def approx_knn(query, tree: KMeansTree, k: int, B: int, want_decomposition: bool = False,
               s: int = 1) -> NeighborResult:
    if B < k:
        raise DataError(f"budget B={B} is smaller than k={k}")
    if k > tree.size:
        raise DataError(f"k={k} exceeds the {tree.size} points in the tree")
    x = query.values if isinstance(query, ObservationVector) else np.asarray(query, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != tree.dim:
        raise DataError(f"dimension mismatch: expected {tree.dim}")
    d2, idx = tree.query_one(x, k, B)
    return _to_result(x, tree.data, np.sqrt(d2), idx, want_decomposition, s)


def make_index(data, backend: str = "exact", *, C: int = 100, Imax: int = 10, B: int = 1000, seed: int = 0):
    """Build a query index over ``data`` for the named backend."""
    if backend == "exact":
        return ExactIndex(data)
    if backend in ("approx", "approximate"):
        return ApproxIndex(build_kmeans_tree(data, C, Imax, seed), B)
    raise DataError(f"unknown kNN backend {backend!r}")
