"""Nearest-base lookup over stored sketches.

Entries are partitioned by :class:`~tensorstash.planner.CompatKey`. Small
partitions are scanned exhaustively with the sketch estimator itself; large
ones pre-filter with an HNSW graph (squared L2 over the flattened counter
rows) and then re-score the shortlist exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import hnswlib
import numpy as np

from .fingerprint import Sketch, SketchError, SketchParams
from .planner import CompatKey

APPROX_THRESHOLD = 5000
_SCAN_BLOCK = 4096


def _estimates(matrix: np.ndarray, norms: np.ndarray, query: np.ndarray, depth: int) -> np.ndarray:
    """Hamming estimate (median over rows of squared row distance) against every row of ``matrix``.

    Counters are integers well below 2**26, so the expanded form
    ``|x|^2 - 2 x.q + |q|^2`` is exact in float64.
    """
    m = matrix.shape[0]
    w = query.shape[0] // depth
    q = query.reshape(depth, w).astype(np.float64)
    qn = np.einsum("dw,dw->d", q, q)
    out = np.empty(m, dtype=np.float64)
    for lo in range(0, m, _SCAN_BLOCK):
        block = matrix[lo : lo + _SCAN_BLOCK]
        dots = np.column_stack([block[:, r * w : (r + 1) * w] @ q[r] for r in range(depth)])
        per_row = norms[lo : lo + _SCAN_BLOCK] - 2.0 * dots + qn
        out[lo : lo + _SCAN_BLOCK] = np.median(per_row, axis=1)
    return out


@dataclass
class _Partition:
    dim: int
    digests: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    matrix: np.ndarray | None = None
    norms: np.ndarray | None = None
    graph: hnswlib.Index | None = None
    graph_size: int = 0

    def dense(self, depth: int) -> tuple[np.ndarray, np.ndarray]:
        if self.matrix is None or self.matrix.shape[0] != len(self.rows):
            have = 0 if self.matrix is None else self.matrix.shape[0]
            new = np.vstack(self.rows[have:]).astype(np.float64)
            grown = new.reshape(new.shape[0], depth, -1)
            new_norms = np.einsum("mdw,mdw->md", grown, grown)
            if self.matrix is None:
                self.matrix, self.norms = new, new_norms
            else:
                self.matrix = np.vstack([self.matrix, new])
                self.norms = np.vstack([self.norms, new_norms])
        return self.matrix, self.norms


class SketchIndex:
    """Candidate-base index.

    ``approximate`` forces the graph on (True) or off (False); ``None`` uses
    it only for partitions with at least ``threshold`` entries.
    ``oversample`` is how many graph neighbours are re-scored per requested
    candidate.
    """

    def __init__(self, params: SketchParams | None = None, *, approximate: bool | None = None,
                 threshold: int = APPROX_THRESHOLD, oversample: int = 8, ef: int = 200, M: int = 16,
                 seed: int = 0):
        self.params = params
        self.approximate = approximate
        self.threshold = threshold
        self.oversample = oversample
        self.ef = ef
        self.M = M
        self.seed = seed
        self._parts: dict[CompatKey, _Partition] = {}
        self._where: dict[bytes, CompatKey] = {}

    def __len__(self) -> int:
        return len(self._where)

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._where

    def partition_size(self, compat: CompatKey) -> int:
        part = self._parts.get(compat)
        return 0 if part is None else len(part.digests)

    def add(self, digest: bytes, compat: CompatKey, sk: Sketch) -> None:
        if digest in self._where:
            return
        if self.params is None:
            self.params = sk.params
        elif sk.params != self.params:
            raise SketchError(f"sketch parameters {sk.params} do not match the index ({self.params})")
        vec = sk.vector()
        part = self._parts.get(compat)
        if part is None:
            part = self._parts[compat] = _Partition(vec.shape[0])
        part.digests.append(digest)
        part.rows.append(vec)
        self._where[digest] = compat

    def _use_graph(self, part: _Partition) -> bool:
        if self.approximate is not None:
            return self.approximate
        return len(part.digests) >= self.threshold

    def _sync_graph(self, part: _Partition) -> hnswlib.Index:
        n = len(part.digests)
        if part.graph is None:
            part.graph = hnswlib.Index(space="l2", dim=part.dim)
            part.graph.init_index(max_elements=max(n, 1024), ef_construction=self.ef, M=self.M,
                                  random_seed=self.seed)
            part.graph.set_num_threads(1)
        if part.graph_size < n:
            if n > part.graph.get_max_elements():
                part.graph.resize_index(max(n, 2 * part.graph.get_max_elements()))
            new = np.vstack(part.rows[part.graph_size :])
            part.graph.add_items(new, np.arange(part.graph_size, n))
            part.graph_size = n
        return part.graph

    def query(self, sk: Sketch, compat: CompatKey, k: int) -> list[tuple[bytes, float]]:
        """Up to ``k`` (digest, estimated Hamming) pairs, nearest first; ties by digest."""
        part = self._parts.get(compat)
        if part is None or not part.digests or k <= 0:
            return []
        if self.params is not None and sk.params != self.params:
            raise SketchError(f"query sketch parameters {sk.params} do not match the index ({self.params})")
        q = sk.vector()
        n = len(part.digests)
        depth = sk.params.depth
        if self._use_graph(part) and n > k:
            graph = self._sync_graph(part)
            shortlist = min(n, max(k * self.oversample, 32))
            graph.set_ef(max(self.ef, shortlist))
            labels, _ = graph.knn_query(q[None, :], k=shortlist)
            ids = labels[0].astype(np.int64)
            matrix, norms = part.dense(depth)
            est = _estimates(matrix[ids], norms[ids], q, depth)
        else:
            ids = np.arange(n)
            est = _estimates(*part.dense(depth), q, depth)
        if est.shape[0] > k:
            # keep everything tied with the k-th value so the digest tie-break stays exact
            kth = np.partition(est, k - 1)[k - 1]
            keep = est <= kth
            est, ids = est[keep], ids[keep]
        ranked = sorted(zip(est.tolist(), ids.tolist()), key=lambda t: (t[0], part.digests[t[1]]))
        return [(part.digests[i], h) for h, i in ranked[:k]]

    def query_candidates(self, sk: Sketch, compat: CompatKey, k: int) -> list[bytes]:
        """Digests only, in the shape the planner's ``query`` hook expects."""
        return [d for d, _ in self.query(sk, compat, k)]
