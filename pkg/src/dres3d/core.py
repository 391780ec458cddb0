"""Scenes, point masks, and exact mask algebra."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .exceptions import LengthMismatch, UnknownInstance

UNLABELED = -1
N_POINT_FEATURES = 6  # x, y, z, r, g, b

_popcount = getattr(np, "bitwise_count", None)


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scene:
    """A colored point cloud with per-point instance labels.

    ``points`` is ``(N_p, 6)``: xyz in meters followed by rgb in [0, 1].
    Points that belong to no instance carry ``UNLABELED``.
    """

    scene_id: str
    points: np.ndarray
    instance_labels: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != N_POINT_FEATURES:
            raise LengthMismatch(
                f"points must be (N_p, {N_POINT_FEATURES}), got {pts.shape}"
            )
        labels = np.array(self.instance_labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != pts.shape[0]:
            raise LengthMismatch(
                f"{labels.shape[0]} labels for {pts.shape[0]} points"
            )
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "instance_labels", _readonly(labels))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def rgb(self) -> np.ndarray:
        return self.points[:, 3:6]

    def instance_ids(self) -> list[int]:
        ids = np.unique(self.instance_labels)
        return [int(i) for i in ids if i != UNLABELED]

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.instance_labels, other.instance_labels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PointMask:
    """Boolean mask over a scene's points, stored packed.

    Construct from a boolean vector; ``bits`` unpacks on access.
    """

    scene_id: str
    n_points: int
    packed: np.ndarray = field(repr=False)

    @classmethod
    def from_bits(cls, bits, scene_id: str) -> PointMask:
        b = np.asarray(bits).astype(bool).reshape(-1)
        return cls(scene_id, int(b.shape[0]), _readonly(np.packbits(b)))

    @classmethod
    def empty(cls, n_points: int, scene_id: str) -> PointMask:
        return cls.from_bits(np.zeros(n_points, dtype=bool), scene_id)

    @property
    def bits(self) -> np.ndarray:
        return np.unpackbits(self.packed, count=self.n_points).astype(bool)

    def count(self) -> int:
        return _count_packed(self.packed)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def __len__(self):
        return self.n_points

    def _check(self, other):
        if self.n_points != other.n_points or self.scene_id != other.scene_id:
            raise LengthMismatch(
                f"mask ({self.scene_id!r}, {self.n_points}) vs "
                f"({other.scene_id!r}, {other.n_points})"
            )

    def __and__(self, other: PointMask) -> PointMask:
        self._check(other)
        return PointMask(self.scene_id, self.n_points, _readonly(self.packed & other.packed))

    def __or__(self, other: PointMask) -> PointMask:
        self._check(other)
        return PointMask(self.scene_id, self.n_points, _readonly(self.packed | other.packed))

    def __eq__(self, other):
        if not isinstance(other, PointMask):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.n_points == other.n_points
            and np.array_equal(self.packed, other.packed)
        )

    __hash__ = None


@dataclass(frozen=True)
class PhraseMaskSet:
    """One mask per phrase, in the description's phrase order."""

    masks: tuple[PointMask, ...]
    sentence_mask: PointMask | None = None

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        ids = {m.scene_id for m in self.masks}
        if self.sentence_mask is not None:
            ids.add(self.sentence_mask.scene_id)
        if len(ids) > 1:
            raise LengthMismatch(f"masks span several scenes: {sorted(ids)}")

    def __len__(self):
        return len(self.masks)


def _count_packed(packed: np.ndarray) -> int:
    if _popcount is not None:
        return int(_popcount(packed).sum(dtype=np.int64))
    return int(np.unpackbits(packed).sum(dtype=np.int64))


def union_instance_mask(scene: Scene, ids: Iterable[int]) -> PointMask:
    """Mask of every point whose instance label is in ``ids``."""
    ids = sorted({int(i) for i in ids})
    labels = scene.instance_labels
    bits = np.zeros(scene.n_points, dtype=bool)
    for i in ids:
        hit = labels == i
        if i == UNLABELED or not hit.any():
            raise UnknownInstance(i)
        bits |= hit
    return PointMask.from_bits(bits, scene.scene_id)


def iou_fraction(a: PointMask, b: PointMask) -> Fraction:
    """Exact |a & b| / |a | b|; two empty masks agree perfectly."""
    a._check(b)
    union = _count_packed(a.packed | b.packed)
    if union == 0:
        return Fraction(1)
    return Fraction(_count_packed(a.packed & b.packed), union)


def point_iou(a: PointMask, b: PointMask) -> float:
    return float(iou_fraction(a, b))


def validate_scene(scene: Scene, referenced_ids: Iterable[int] = ()) -> list[str]:
    """List every violated scene invariant; an empty list means valid.

    ``referenced_ids`` are instance ids used by annotations of this scene.
    """
    problems = []
    if scene.n_points < 1:
        problems.append(f"scene {scene.scene_id}: no points")
    xyz, rgb = scene.xyz, scene.rgb
    for i in np.flatnonzero(~np.isfinite(xyz).all(axis=1)):
        problems.append(f"scene {scene.scene_id}: point {i}: non-finite coordinate")
    bad_color = ~(np.isfinite(rgb) & (rgb >= 0.0) & (rgb <= 1.0)).all(axis=1)
    for i in np.flatnonzero(bad_color):
        problems.append(
            f"scene {scene.scene_id}: point {i}: color channel outside [0, 1]"
        )
    for i in np.flatnonzero(scene.instance_labels < UNLABELED):
        problems.append(f"scene {scene.scene_id}: point {i}: negative instance label")
    present = set(scene.instance_ids())
    for rid in sorted(set(referenced_ids)):
        if rid not in present:
            problems.append(
                f"scene {scene.scene_id}: referenced instance {rid} has no points"
            )
    return problems


def masks_from_bits(rows: Sequence, scene_id: str) -> list[PointMask]:
    return [PointMask.from_bits(r, scene_id) for r in rows]
