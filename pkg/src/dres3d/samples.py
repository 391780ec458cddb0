"""Model-ready bundles: one description with its scene-side tensors and targets."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .annotation import AnnotatedDescription
from .core import PointMask, Scene, union_instance_mask
from .exceptions import ShapeMismatch
from .superpoint import GT_POOL_THRESHOLD, SuperpointPartition, pool_gt_mask, sp_pool


@dataclass(frozen=True, eq=False)
class Sample:
    description: AnnotatedDescription
    partition: SuperpointPartition
    pooled: np.ndarray  # (N_s, c)
    token_features: np.ndarray  # (L+2, e)
    gt_masks: tuple[PointMask, ...]  # point level, one per phrase
    gt_superpoint: np.ndarray  # (k, N_s) bool

    @cached_property
    def rows(self) -> np.ndarray:
        """Supervised query rows, aligned with the phrases."""
        return np.array([p.query_index for p in self.description.phrases], dtype=np.int64)

    @cached_property
    def sizes(self) -> np.ndarray:
        return self.partition.sizes

    @cached_property
    def gt_positive_counts(self) -> np.ndarray:
        """Positive GT points per (phrase, superpoint)."""
        a = self.partition.assignment
        return np.stack([
            np.bincount(a, weights=m.bits.astype(np.float64), minlength=self.partition.n_superpoints)
            for m in self.gt_masks
        ])


def make_sample(desc: AnnotatedDescription, scene: Scene, part: SuperpointPartition,
                point_features, token_features,
                gt_threshold: float = GT_POOL_THRESHOLD) -> Sample:
    if part.n_points != scene.n_points:
        raise ShapeMismatch(f"partition over {part.n_points} points, scene has {scene.n_points}")
    tok = np.asarray(token_features, dtype=np.float64)
    if tok.shape[0] != desc.n_tokens + 2:
        raise ShapeMismatch(f"{tok.shape[0]} token rows for {desc.n_tokens} tokens (+2 specials)")
    gts = tuple(union_instance_mask(scene, p.target_ids) for p in desc.phrases)
    gt_sp = np.stack([pool_gt_mask(m, part, gt_threshold) for m in gts])
    return Sample(desc, part, sp_pool(point_features, part), tok, gts, gt_sp)


def build_samples(descs, scenes, partitions, point_provider, token_provider,
                  gt_threshold: float = GT_POOL_THRESHOLD) -> list[Sample]:
    """Samples for every description; point features are computed once per scene.

    ``partitions`` maps scene id to its :class:`SuperpointPartition`.
    """
    feats: dict[str, np.ndarray] = {}
    out = []
    for d in descs:
        scene = scenes[d.scene_id]
        if d.scene_id not in feats:
            feats[d.scene_id] = point_provider.transform(scene)
        out.append(make_sample(d, scene, partitions[d.scene_id], feats[d.scene_id],
                               token_provider.transform(list(d.tokens)), gt_threshold))
    return out
