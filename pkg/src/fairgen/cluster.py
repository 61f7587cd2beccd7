"""Per-group k-means over embeddings and the cluster-count rule."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np

from .groups import GroupedDataset, GroupKey

logger = logging.getLogger(__name__)

MIN_PER_CLUSTER = 20
MAX_CLUSTERS = 20


def cluster_count_rule(smallest_group_size: int) -> int:
    """k = min(round(M / 20), 20), rounding half away from zero, floored at 1."""
    if smallest_group_size < 1:
        raise ValueError("smallest group size must be >= 1")
    k = math.floor(Fraction(smallest_group_size, MIN_PER_CLUSTER) + Fraction(1, 2))
    return max(1, min(k, MAX_CLUSTERS))


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse_history: List[float]
    n_iter: int
    converged: bool

    @property
    def sse(self) -> float:
        return self.sse_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a center
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; empty clusters take the farthest point."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    labels = None
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new = d.argmin(1)
        # repair empty clusters from the point farthest from its centroid
        for j in range(k):
            if not np.any(new == j):
                own = d[np.arange(n), new]
                counts = np.bincount(new, minlength=k)
                own = np.where(counts[new] > 1, own, -1.0)
                far = int(own.argmax())
                new[far] = j
        if labels is not None and np.array_equal(new, labels):
            converged = True
            history.append(float(((x - centroids[labels]) ** 2).sum()))
            break
        labels = new
        centroids = np.array([x[labels == j].mean(0) for j in range(k)])
        history.append(float(((x - centroids[labels]) ** 2).sum()))
    return KMeansResult(labels, centroids, history, it, converged)


@dataclass
class ClusterAssignment:
    group: GroupKey
    k: int
    labels: Dict[str, int]
    centroids: np.ndarray
    seed: int = 0
    sse_history: List[float] = field(default_factory=list)
    warning: Optional[str] = None

    def members(self, j: int) -> List[str]:
        return [i for i, c in self.labels.items() if c == j]

    def to_dict(self) -> dict:
        return {
            "group": str(self.group),
            "k": self.k,
            "seed": self.seed,
            "labels": self.labels,
            "centroids": np.asarray(self.centroids).tolist(),
            "warning": self.warning,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusterAssignment":
        return cls(
            group=GroupKey.parse(d["group"]),
            k=int(d["k"]),
            labels={str(k): int(v) for k, v in d["labels"].items()},
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            seed=int(d.get("seed", 0)),
            warning=d.get("warning"),
        )


def _group_seed(seed: int, g: GroupKey) -> int:
    return (seed * 1_000_003 + zlib.crc32(str(g).encode())) % (2**32)


def kmeans_per_group(
    ds: GroupedDataset,
    embs: Mapping[str, np.ndarray],
    k: int,
    seed: int,
    max_iter: int = 100,
    normalize: bool = False,
    groups: Optional[List[GroupKey]] = None,
) -> Dict[GroupKey, ClusterAssignment]:
    """Cluster each group's embeddings independently.

    Points are ordered by item id before clustering, so the result does not
    depend on dataset order. A group smaller than ``k`` is clustered with
    ``k = group size`` and the assignment carries a warning.
    """
    out = {}
    for g, ix in ds.group_index().items():
        if groups is not None and g not in groups:
            continue
        ids = sorted(ds.items[i].id for i in ix)
        x = np.stack([np.asarray(embs[i], dtype=np.float64) for i in ids])
        if normalize:
            x = x / np.linalg.norm(x, axis=1, keepdims=True)
        kg, warning = k, None
        if len(ids) < k:
            kg = len(ids)
            warning = f"group {g} has {len(ids)} items < k={k}; using k={kg}"
            logger.warning(warning)
        gseed = _group_seed(seed, g)
        res = kmeans(x, kg, seed=gseed, max_iter=max_iter)
        out[g] = ClusterAssignment(
            group=g,
            k=kg,
            labels={i: int(c) for i, c in zip(ids, res.labels)},
            centroids=res.centroids,
            seed=gseed,
            sse_history=res.sse_history,
            warning=warning,
        )
    return out


def save_assignments(path, assignments: Mapping[GroupKey, ClusterAssignment]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([a.to_dict() for a in assignments.values()], indent=1))
    return path


def load_assignments(path) -> Dict[GroupKey, ClusterAssignment]:
    rows = json.loads(Path(path).read_text())
    return {a.group: a for a in map(ClusterAssignment.from_dict, rows)}
