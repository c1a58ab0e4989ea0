"""Base/delta clustering of tensors.

Arriving tensors are attached greedily to the existing base with the highest
predicted reduction ratio (or seed a new cluster). Clusters that grow large
and inefficient are split by promoting a poorly matched member to an extra
base whenever that raises the cluster's reduction ratio. All decisions use
sketch-estimated ratios only; no tensor payload is read here.

The cost model is facility location: a base costs its raw size, a delta
costs ``(1 - R(t, b)) * size``. :func:`exact_plan` enumerates base sets for
small instances and is the reference the heuristic is checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator

from .fingerprint import Sketch, SketchError, hamming_estimate, normalized_distance
from .predictor import DEFAULT_COEFFICIENTS, PredictorCoefficients, predict_ratio
from .tensor_format import DType

__all__ = [
    "CompatKey",
    "TensorInfo",
    "StoreBase",
    "StoreDelta",
    "PromoteToBase",
    "Reassign",
    "PlanDelta",
    "Cluster",
    "PlannerConfig",
    "Planner",
    "FlexSplit",
    "cluster_reduction_ratio",
    "exact_plan",
    "plan_cost",
    "EXACT_LIMIT",
]

EXACT_LIMIT = 20


@dataclass(frozen=True, order=True)
class CompatKey:
    dtype: str
    shape: tuple[int, ...]

    @classmethod
    def of(cls, dtype: DType | str, shape: Sequence[int]) -> "CompatKey":
        name = dtype.name if isinstance(dtype, DType) else str(dtype)
        return cls(name, tuple(int(s) for s in shape))


@dataclass
class TensorInfo:
    """What the planner needs to know about a unique tensor."""

    digest: bytes
    name: str
    compat: CompatKey
    nbytes: int
    sketch: Sketch | None = None


# -- plan actions -------------------------------------------------------------


@dataclass(frozen=True)
class StoreBase:
    digest: bytes

    def to_json(self) -> dict:
        return {"action": "StoreBase", "digest": self.digest.hex()}


@dataclass(frozen=True)
class StoreDelta:
    digest: bytes
    base_digest: bytes
    predicted_ratio: float = 0.0

    def to_json(self) -> dict:
        return {
            "action": "StoreDelta",
            "digest": self.digest.hex(),
            "base": self.base_digest.hex(),
            "predicted_ratio": round(self.predicted_ratio, 6),
        }


@dataclass(frozen=True)
class PromoteToBase:
    digest: bytes

    def to_json(self) -> dict:
        return {"action": "PromoteToBase", "digest": self.digest.hex()}


@dataclass(frozen=True)
class Reassign:
    digest: bytes
    new_base_digest: bytes
    predicted_ratio: float = 0.0

    def to_json(self) -> dict:
        return {
            "action": "Reassign",
            "digest": self.digest.hex(),
            "base": self.new_base_digest.hex(),
            "predicted_ratio": round(self.predicted_ratio, 6),
        }


Action = Union[StoreBase, StoreDelta, PromoteToBase, Reassign]


@dataclass
class PlanDelta:
    actions: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.actions)

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def extend(self, other: "PlanDelta") -> None:
        self.actions.extend(other.actions)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(a.to_json(), separators=(",", ":")) + "\n" for a in self.actions)


# -- clusters -----------------------------------------------------------------


@dataclass
class Cluster:
    id: int
    compat: CompatKey
    bases: set = field(default_factory=set)
    # non-base member digest -> (assigned base digest, predicted ratio)
    assignments: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)

    @property
    def members(self) -> set:
        return set(self.sizes)

    def __len__(self) -> int:
        return len(self.sizes)

    def check(self) -> None:
        assert self.bases <= set(self.sizes), "bases must be members"
        for digest, (base, ratio) in self.assignments.items():
            assert digest not in self.bases, "a base cannot also be a delta"
            assert base in self.bases, "deltas must reference a base of the same cluster"
            assert 0.0 <= ratio <= 1.0
        assert set(self.assignments) | self.bases == set(self.sizes)


def cluster_reduction_ratio(cluster: Cluster) -> float:
    """Size-weighted predicted savings of the deltas over the raw size of all members."""
    if not cluster.sizes:
        raise ValueError(f"cluster {cluster.id} is empty")
    total = sum(cluster.sizes.values())
    if total == 0:
        return 0.0
    saved = sum(ratio * cluster.sizes[d] for d, (_, ratio) in cluster.assignments.items())
    return saved / total


class RatioSource(Protocol):
    def __call__(self, a: bytes, b: bytes) -> float: ...


@dataclass
class PlannerConfig:
    theta_min: float = 0.05
    split_delta: float = 0.1
    split_min_size: int = 8
    split_trigger: float = 0.6
    candidates_k: int = 8


class Planner:
    """Incremental base/delta planner over tensors grouped by :class:`CompatKey`.

    ``query`` returns candidate base digests for a sketch; it defaults to
    scanning every base in the compat partition. ``coefficients`` is the
    predictor used to turn sketch distances into ratios.
    """

    def __init__(
        self,
        config: PlannerConfig | None = None,
        coefficients: PredictorCoefficients | None = None,
        query: Callable[[Sketch, CompatKey, int], Sequence[bytes]] | None = None,
        ratio_fn: RatioSource | None = None,
    ):
        self.config = config or PlannerConfig()
        self.coefficients = coefficients or DEFAULT_COEFFICIENTS["TENSORX"]
        self._query = query
        self._ratio_fn = ratio_fn
        self.tensors: dict[bytes, TensorInfo] = {}
        self.clusters: dict[int, Cluster] = {}
        self.cluster_of: dict[bytes, int] = {}
        self.bases_by_compat: dict[CompatKey, set] = {}
        self.seen_names: set = set()
        self._next_id = 0
        self._ratio_cache: dict[tuple[bytes, bytes], float] = {}

    # ratios ------------------------------------------------------------------

    def ratio(self, a: bytes, b: bytes) -> float:
        """Predicted reduction ratio of storing ``a`` as a delta against ``b``."""
        if self._ratio_fn is not None:
            return self._ratio_fn(a, b)
        key = (a, b) if a <= b else (b, a)
        cached = self._ratio_cache.get(key)
        if cached is None:
            sa, sb = self.tensors[a].sketch, self.tensors[b].sketch
            cached = predict_ratio(normalized_distance(sa, sb), self.coefficients)
            self._ratio_cache[key] = cached
        return cached

    def _hamming(self, a: bytes, b: bytes) -> float:
        if self._ratio_fn is not None:
            return 1.0 - self._ratio_fn(a, b)
        return hamming_estimate(self.tensors[a].sketch, self.tensors[b].sketch)

    def candidates(self, info: TensorInfo) -> list[bytes]:
        if self._query is not None:
            return list(self._query(info.sketch, info.compat, self.config.candidates_k))
        return sorted(self.bases_by_compat.get(info.compat, ()))

    # Phase I ---------------------------------------------------------------

    def _new_cluster(self, info: TensorInfo) -> Cluster:
        cl = Cluster(self._next_id, info.compat)
        self._next_id += 1
        self.clusters[cl.id] = cl
        cl.bases.add(info.digest)
        cl.sizes[info.digest] = info.nbytes
        self.cluster_of[info.digest] = cl.id
        self.bases_by_compat.setdefault(info.compat, set()).add(info.digest)
        return cl

    def assign(self, info: TensorInfo) -> PlanDelta:
        """Place one arriving tensor; returns the storage actions it needs."""
        name_key = (info.name, info.compat.shape)
        if info.digest in self.tensors:
            self.seen_names.add(name_key)
            return PlanDelta()
        if self._ratio_fn is None:
            if info.sketch is None:
                raise SketchError(f"tensor {info.name!r} has no sketch")
            sample = next(iter(self.tensors.values()), None)
            if sample is not None and sample.sketch.params != info.sketch.params:
                raise SketchError("sketch parameters do not match the planner's")
        self.tensors[info.digest] = info

        best = None
        if name_key in self.seen_names:
            best = self._best_base(info)
        self.seen_names.add(name_key)
        if best is None or best[0] < self.config.theta_min:
            self._new_cluster(info)
            return PlanDelta([StoreBase(info.digest)])
        ratio, _, base = best
        cl = self.clusters[self.cluster_of[base]]
        cl.assignments[info.digest] = (base, ratio)
        cl.sizes[info.digest] = info.nbytes
        self.cluster_of[info.digest] = cl.id
        return PlanDelta([StoreDelta(info.digest, base, ratio)])

    def _best_base(self, info: TensorInfo):
        best = None
        for base in self.candidates(info):
            if base not in self.tensors or self.tensors[base].compat != info.compat:
                continue
            r = self.ratio(info.digest, base)
            key = (r, -self._hamming(info.digest, base), _neg_bytes(base))
            if best is None or key > best[0]:
                best = (key, base)
        if best is None:
            return None
        (r, neg_h, _), base = best
        return r, -neg_h, base

    # Phase II --------------------------------------------------------------

    def needs_split(self, cluster: Cluster) -> bool:
        return (
            len(cluster) >= self.config.split_min_size
            and cluster_reduction_ratio(cluster) < self.config.split_trigger
        )

    def split(self, cluster: Cluster) -> PlanDelta:
        """Greedily promote members to extra bases while the cluster ratio improves."""
        plan = PlanDelta()
        total = sum(cluster.sizes.values())
        if total == 0:
            return plan
        while cluster.assignments:
            ratios = {d: r for d, (_, r) in cluster.assignments.items()}
            saved = sum(r * cluster.sizes[d] for d, r in ratios.items())
            # "significantly below average": delta under the mean non-base member ratio
            threshold = sum(ratios.values()) / len(ratios) - self.config.split_delta
            cands = sorted(d for d, r in ratios.items() if r < threshold)
            if not cands:
                break
            best = None
            for c in cands:
                gain_bytes = -ratios[c] * cluster.sizes[c]
                for t, r in ratios.items():
                    if t == c:
                        continue
                    rc = self.ratio(t, c)
                    if rc > r:
                        gain_bytes += (rc - r) * cluster.sizes[t]
                gain = gain_bytes / total
                if best is None or gain > best[0]:
                    best = (gain, c)
            gain, c = best
            if gain <= 1e-12:
                break
            before = saved / total
            del cluster.assignments[c]
            cluster.bases.add(c)
            self.bases_by_compat.setdefault(cluster.compat, set()).add(c)
            plan.actions.append(PromoteToBase(c))
            for t, (b, r) in sorted(cluster.assignments.items()):
                rc = self.ratio(t, c)
                if rc > r:
                    cluster.assignments[t] = (c, rc)
                    plan.actions.append(Reassign(t, c, rc))
            assert cluster_reduction_ratio(cluster) > before
        return plan

    def refine(self, clusters: Iterable[int] | None = None, *, force: bool = False) -> dict[int, PlanDelta]:
        """Run Phase II over trigger-eligible clusters; returns plans per cluster id."""
        out = {}
        ids = list(self.clusters) if clusters is None else list(clusters)
        for cid in ids:
            cl = self.clusters[cid]
            if force or self.needs_split(cl):
                plan = self.split(cl)
                if plan:
                    out[cid] = plan
        return out

    # bookkeeping -------------------------------------------------------------

    def copy(self) -> "Planner":
        """Independent copy of the clustering state; tensor infos and sketches are shared."""
        new = Planner(self.config, self.coefficients, self._query, self._ratio_fn)
        new.tensors = dict(self.tensors)
        new.clusters = {
            cid: Cluster(cl.id, cl.compat, set(cl.bases), dict(cl.assignments), dict(cl.sizes))
            for cid, cl in self.clusters.items()
        }
        new.cluster_of = dict(self.cluster_of)
        new.bases_by_compat = {k: set(v) for k, v in self.bases_by_compat.items()}
        new.seen_names = set(self.seen_names)
        new._next_id = self._next_id
        new._ratio_cache = dict(self._ratio_cache)
        return new

    def restore(self, info: TensorInfo, cluster_id: int, base: bytes | None = None, ratio: float = 0.0) -> None:
        """Re-insert a persisted member without running assignment."""
        cl = self.clusters.get(cluster_id)
        if cl is None:
            cl = self.clusters[cluster_id] = Cluster(cluster_id, info.compat)
            self._next_id = max(self._next_id, cluster_id + 1)
        self.tensors[info.digest] = info
        cl.sizes[info.digest] = info.nbytes
        self.cluster_of[info.digest] = cluster_id
        if base is None:
            cl.bases.add(info.digest)
            self.bases_by_compat.setdefault(info.compat, set()).add(info.digest)
        else:
            cl.assignments[info.digest] = (base, ratio)

    def base_of(self, digest: bytes) -> bytes | None:
        cl = self.clusters[self.cluster_of[digest]]
        entry = cl.assignments.get(digest)
        return None if entry is None else entry[0]

    def make_base(self, digest: bytes) -> None:
        """Detach a member and make it the base of a fresh single-member cluster."""
        info = self.tensors[digest]
        cl = self.clusters[self.cluster_of[digest]]
        if digest in cl.bases:
            return
        del cl.assignments[digest]
        del cl.sizes[digest]
        self._new_cluster(info)

    def cost(self) -> float:
        """Predicted stored bytes of every tracked tensor."""
        total = 0.0
        for cl in self.clusters.values():
            total += sum(cl.sizes[b] for b in cl.bases)
            total += sum((1 - r) * cl.sizes[d] for d, (_, r) in cl.assignments.items())
        return total

    def check(self) -> None:
        for cl in self.clusters.values():
            cl.check()
            for b in cl.bases:
                assert self.cluster_of[b] == cl.id


def _neg_bytes(b: bytes) -> tuple:
    # larger key wins in _best_base; invert so the lexicographically smaller digest wins
    return tuple(-x for x in b) + (len(b),)


# -- estimator facade -----------------------------------------------------------


class FlexSplit(BaseEstimator):
    """Batch interface to :class:`Planner` for a fixed set of tensors.

    ``fit`` feeds tensors in the given order through greedy assignment and
    then runs splitting over every cluster (``force_split=True``) or only
    over clusters that trip the size/ratio trigger.
    """

    def __init__(
        self,
        theta_min=0.05,
        split_delta=0.1,
        split_min_size=8,
        split_trigger=0.6,
        force_split=False,
        coefficients=None,
    ):
        self.theta_min = theta_min
        self.split_delta = split_delta
        self.split_min_size = split_min_size
        self.split_trigger = split_trigger
        self.force_split = force_split
        self.coefficients = coefficients

    def fit(self, tensors: Sequence[TensorInfo], y=None, ratios: np.ndarray | None = None):
        """Plan ``tensors`` in order; with ``ratios`` given, sketches are not consulted."""
        ratio_fn = None
        if ratios is not None:
            index = {t.digest: i for i, t in enumerate(tensors)}
            ratios = np.asarray(ratios, dtype=np.float64)

            def ratio_fn(a, b):
                return float(ratios[index[a], index[b]])

        cfg = PlannerConfig(self.theta_min, self.split_delta, self.split_min_size, self.split_trigger)
        planner = Planner(cfg, self.coefficients, ratio_fn=ratio_fn)
        for t in tensors:
            planner.assign(t)
        planner.refine(force=self.force_split)
        self.planner_ = planner
        self.bases_ = sorted(d for cl in planner.clusters.values() for d in cl.bases)
        self.cost_ = planner.cost()
        return self

    def predict(self, tensors: Sequence[TensorInfo]) -> list:
        """Base digest for each tensor (itself when it is a base)."""
        out = []
        for t in tensors:
            base = self.planner_.base_of(t.digest)
            out.append(t.digest if base is None else base)
        return out


# -- exact reference ------------------------------------------------------------


def plan_cost(sizes: Sequence[float], ratios: np.ndarray, bases: Iterable[int]) -> float:
    """Facility-location cost of a base set with every other tensor on its best base."""
    sizes = np.asarray(sizes, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    bases = sorted(set(bases))
    if not bases:
        raise ValueError("at least one base is required")
    cost = sizes[bases].sum()
    others = [t for t in range(len(sizes)) if t not in set(bases)]
    if others:
        best = ratios[np.ix_(others, bases)].max(axis=1)
        cost += ((1 - best) * sizes[others]).sum()
    return float(cost)


def exact_plan(sizes: Sequence[float], ratios: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Optimal base set by enumerating all nonempty subsets (at most 20 tensors).

    ``ratios[t, b]`` is the reduction ratio of storing ``t`` against ``b``.
    Returns the minimizing base indices and their cost.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    n = sizes.shape[0]
    if n == 0:
        raise ValueError("no tensors")
    if n > EXACT_LIMIT:
        raise ValueError(f"exact enumeration is limited to {EXACT_LIMIT} tensors, got {n}")
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (n, n):
        raise ValueError(f"ratio matrix must be {n}x{n}")
    delta_cost = (1.0 - ratios) * sizes[:, None]  # [t, b]
    best_cost, best_count, best_mask = np.inf, 0, 0
    bits = 1 << np.arange(n)
    step = 1 << 14
    for lo in range(1, 1 << n, step):
        masks = np.arange(lo, min(lo + step, 1 << n))
        member = (masks[:, None] & bits) != 0  # [m, t]
        # cheapest base for each tensor under each mask
        assign = np.where(member[:, None, :], delta_cost[None, :, :], np.inf).min(axis=2)  # [m, t]
        cost = np.where(member, sizes[None, :], assign).sum(axis=1)
        # equal cost: prefer more bases, a zero-gain delta only adds a dependency
        tied = np.flatnonzero(cost <= cost.min() + 1e-12)
        i = int(tied[np.argmax(member[tied].sum(axis=1))])
        count = int(member[i].sum())
        if cost[i] < best_cost - 1e-12 or (cost[i] <= best_cost + 1e-12 and count > best_count):
            best_cost, best_count, best_mask = float(cost[i]), count, int(masks[i])
    bases = tuple(t for t in range(n) if best_mask >> t & 1)
    return bases, best_cost
