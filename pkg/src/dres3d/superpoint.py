"""Superpoint oversegmentation, pooling, projection and mask broadcasting."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import N_POINT_FEATURES, PointMask, Scene
from .exceptions import DegenerateScene, FileUnreadable, MalformedRecord, ShapeMismatch

GT_POOL_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class SuperpointPartition:
    """Surjective map from points to superpoints ``0 .. n_superpoints - 1``."""

    scene_id: str
    assignment: np.ndarray
    n_superpoints: int

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64).reshape(-1)
        n = int(self.n_superpoints)
        if a.size and (a.min() < 0 or a.max() >= n):
            raise ShapeMismatch(f"superpoint index outside [0, {n})")
        if np.bincount(a, minlength=n).min(initial=1) == 0:
            raise ShapeMismatch("partition is not surjective: empty superpoint")
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "n_superpoints", n)

    @property
    def n_points(self) -> int:
        return self.assignment.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_superpoints)

    @classmethod
    def identity(cls, n_points: int, scene_id: str = "") -> SuperpointPartition:
        return cls(scene_id, np.arange(n_points), n_points)

    def relabel(self, perm) -> SuperpointPartition:
        """Partition whose superpoint ``perm[s]`` is this partition's ``s``."""
        perm = np.asarray(perm, dtype=np.int64)
        return SuperpointPartition(self.scene_id, perm[self.assignment], self.n_superpoints)

    def __eq__(self, other):
        if not isinstance(other, SuperpointPartition):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.n_superpoints == other.n_superpoints
            and np.array_equal(self.assignment, other.assignment)
        )

    __hash__ = None


@dataclass(frozen=True)
class OversegmentConfig:
    """Graph-based region merging on a k-NN graph.

    Edge weight is ``spatial distance + color_weight * color distance``.
    Two regions merge when the joining edge is no heavier than either
    region's internal difference plus ``scale / size``.
    """

    k: int = 8
    color_weight: float = 1.0
    scale: float = 0.5
    min_size: int = 5
    target_max_superpoints: int | None = None

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class _DisjointSet:
    def __init__(self, n):
        self.parent = np.arange(n)
        self.size = np.ones(n, dtype=np.int64)
        self.internal = np.zeros(n)
        self.count = n

    def find(self, i):
        parent = self.parent
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(self, a, b, w=0.0):
        # lower root index survives so results do not depend on call order
        if a > b:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], w)
        self.count -= 1
        return a


def _knn_edges(xyz, rgb, k, color_weight):
    n = xyz.shape[0]
    kk = min(k + 1, n)
    _, nbr = cKDTree(xyz).query(xyz, k=kk)
    nbr = np.asarray(nbr).reshape(n, kk)
    i = np.repeat(np.arange(n), kk)
    j = nbr.reshape(-1)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    keep = lo != hi
    pairs = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
    if pairs.size == 0:
        return pairs, np.zeros(0)
    a, b = pairs[:, 0], pairs[:, 1]
    w = np.linalg.norm(xyz[a] - xyz[b], axis=1)
    w = w + color_weight * np.linalg.norm(rgb[a] - rgb[b], axis=1)
    # ties broken by the lower point index, then the higher one
    order = np.lexsort((b, a, w))
    return pairs[order], w[order]


def _segment(xyz, rgb, cfg: OversegmentConfig) -> np.ndarray:
    n = xyz.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    if np.all(xyz == xyz[0]):
        raise DegenerateScene("all points coincide")

    edges, weights = _knn_edges(xyz, rgb, cfg.k, cfg.color_weight)
    ds = _DisjointSet(n)
    for (a, b), w in zip(edges, weights):
        ra, rb = ds.find(a), ds.find(b)
        if ra == rb:
            continue
        if w <= min(ds.internal[ra] + cfg.scale / ds.size[ra],
                    ds.internal[rb] + cfg.scale / ds.size[rb]):
            ds.union(ra, rb, w)

    if cfg.min_size > 1:
        for (a, b), w in zip(edges, weights):
            ra, rb = ds.find(a), ds.find(b)
            if ra != rb and min(ds.size[ra], ds.size[rb]) < cfg.min_size:
                ds.union(ra, rb, w)

    target = cfg.target_max_superpoints
    if target is not None:
        target = max(int(target), 1)
        for (a, b), w in zip(edges, weights):
            if ds.count <= target:
                break
            ra, rb = ds.find(a), ds.find(b)
            if ra != rb:
                ds.union(ra, rb, w)
        # the k-NN graph may be disconnected; join nearest centroids
        while ds.count > target:
            roots = np.array(sorted({ds.find(i) for i in range(n)}))
            labels = np.searchsorted(roots, [ds.find(i) for i in range(n)])
            cent = np.zeros((len(roots), 3))
            np.add.at(cent, labels, xyz)
            cent /= np.bincount(labels)[:, None]
            d = np.linalg.norm(cent[:, None] - cent[None], axis=2)
            d[np.tril_indices(len(roots))] = np.inf
            p, q = np.unravel_index(np.argmin(d), d.shape)
            ds.union(roots[p], roots[q], d[p, q])

    roots = np.array([ds.find(i) for i in range(n)])
    _, first = np.unique(roots, return_index=True)
    # number superpoints by their first point
    order = np.argsort(first, kind="stable")
    remap = np.empty(len(first), dtype=np.int64)
    remap[order] = np.arange(len(first))
    _, inverse = np.unique(roots, return_inverse=True)
    return remap[inverse]


def oversegment(scene: Scene, cfg: OversegmentConfig | None = None) -> SuperpointPartition:
    """Deterministic unsupervised oversegmentation of ``scene``."""
    cfg = cfg or OversegmentConfig()
    labels = _segment(scene.xyz, scene.rgb, cfg)
    return SuperpointPartition(scene.scene_id, labels, int(labels.max()) + 1)


class Oversegmenter(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`oversegment` for ``(N, 6)`` xyzrgb arrays.

    After ``fit``, ``labels_`` holds the superpoint index of each point.
    """

    def __init__(self, k=8, color_weight=1.0, scale=0.5, min_size=5,
                 target_max_superpoints=None):
        self.k = k
        self.color_weight = color_weight
        self.scale = scale
        self.min_size = min_size
        self.target_max_superpoints = target_max_superpoints

    def _config(self):
        return OversegmentConfig(**self.get_params())

    def fit(self, X, y=None):
        if isinstance(X, Scene):
            X = X.points
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        if X.shape[1] != N_POINT_FEATURES:
            raise ShapeMismatch(f"expected {N_POINT_FEATURES} columns, got {X.shape[1]}")
        self.labels_ = _segment(X[:, :3], X[:, 3:6], self._config())
        self.n_superpoints_ = int(self.labels_.max()) + 1
        return self

    def partition(self, scene: Scene) -> SuperpointPartition:
        self.fit(scene)
        check_is_fitted(self, "labels_")
        return SuperpointPartition(scene.scene_id, self.labels_, self.n_superpoints_)


def sp_pool(point_features, part: SuperpointPartition) -> np.ndarray:
    """Mean of the point features inside each superpoint, shape ``(N_s, c)``."""
    f = np.asarray(point_features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != part.n_points:
        raise ShapeMismatch(f"features {f.shape} for {part.n_points} points")
    pooled = np.zeros((part.n_superpoints, f.shape[1]))
    np.add.at(pooled, part.assignment, f)
    return pooled / part.sizes[:, None]


def project_features(pooled, W1, W2) -> tuple[np.ndarray, np.ndarray]:
    """Visual and superpoint features from two separate linear maps."""
    pooled = np.asarray(pooled, dtype=np.float64)
    W1, W2 = np.asarray(W1), np.asarray(W2)
    if W1.shape != W2.shape or pooled.ndim != 2 or pooled.shape[1] != W1.shape[0]:
        raise ShapeMismatch(f"pooled {pooled.shape}, W1 {W1.shape}, W2 {W2.shape}")
    return pooled @ W1, pooled @ W2


def broadcast_mask(spmask, part: SuperpointPartition) -> PointMask:
    m = np.asarray(spmask).astype(bool).reshape(-1)
    if m.shape[0] != part.n_superpoints:
        raise ShapeMismatch(f"mask over {m.shape[0]} superpoints, partition has {part.n_superpoints}")
    return PointMask.from_bits(m[part.assignment], part.scene_id)


def superpoint_fractions(gt: PointMask, part: SuperpointPartition) -> np.ndarray:
    if gt.n_points != part.n_points:
        raise ShapeMismatch(f"mask over {gt.n_points} points, partition has {part.n_points}")
    pos = np.bincount(part.assignment, weights=gt.bits.astype(np.float64),
                      minlength=part.n_superpoints)
    return pos / part.sizes


def pool_gt_mask(gt: PointMask, part: SuperpointPartition,
                 threshold: float = GT_POOL_THRESHOLD) -> np.ndarray:
    """Superpoints whose share of positive points is at least ``threshold``."""
    return superpoint_fractions(gt, part) >= threshold


# --- partition cache files ---------------------------------------------------

def write_partition(part: SuperpointPartition, path, config_digest: str = "") -> None:
    lines = [
        f"# scene_id: {part.scene_id}",
        f"# n_superpoints: {part.n_superpoints}",
        f"# config: {config_digest}",
    ]
    lines += [f"{i} {s}" for i, s in enumerate(part.assignment)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_partition(path) -> tuple[SuperpointPartition, str]:
    """Returns the partition and the config digest it was computed with."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    header, rows = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        elif line.strip():
            try:
                i, s = (int(v) for v in line.split())
            except ValueError as exc:
                raise MalformedRecord(lineno, "expected 'point_index superpoint_index'") from exc
            if i != len(rows):
                raise MalformedRecord(lineno, f"point index {i} out of order")
            rows.append(s)
    for key in ("scene_id", "n_superpoints"):
        if key not in header:
            raise MalformedRecord(1, f"missing '# {key}:' header")
    part = SuperpointPartition(header["scene_id"], np.array(rows, dtype=np.int64),
                               int(header["n_superpoints"]))
    return part, header.get("config", "")
