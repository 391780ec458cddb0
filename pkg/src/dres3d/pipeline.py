"""Data-directory layout and the JSON run config shared by the CLI commands.

A data directory holds::

    records.jsonl          one description per line
    scenes/*.scene.txt     point tables
    superpoints/*.sp.txt   optional oversegmentation cache
    features/*.feat.txt    optional point-feature tables (file-loaded features)
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .annotation import AnnotatedDescription, Violation, load_dataset, load_scene_dir
from .core import Scene
from .model import ModelConfig
from .samples import Sample, build_samples
from .superpoint import (
    OversegmentConfig,
    SuperpointPartition,
    oversegment,
    read_partition,
    write_partition,
)
from .synth import FileFeatures, GeometricPointFeatures, HashedTokenFeatures
from .training import LossConfig, TrainSchedule

logger = logging.getLogger(__name__)

RECORDS = "records.jsonl"
SCENES = "scenes"
SUPERPOINTS = "superpoints"
FEATURES = "features"
PARTITION_SUFFIX = ".sp.txt"


def _build(cls, blob: Mapping | None):
    blob = dict(blob or {})
    known = {f.name for f in fields(cls)}
    unknown = set(blob) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, v in blob.items():
        if isinstance(v, list):
            blob[k] = tuple(v)
    return cls(**blob)


@dataclass(frozen=True)
class FeatureConfig:
    point_kind: str = "geometric-point-features"
    token_kind: str = "hashed-token-features"
    k: int = 8
    seed: int = 0

    def providers(self, model: ModelConfig, data_dir=None):
        if self.point_kind == "geometric-point-features":
            points = GeometricPointFeatures(model.c, self.k, self.seed)
        elif self.point_kind == "file-loaded":
            points = FileFeatures(str(Path(data_dir or ".") / FEATURES))
        else:
            raise ValueError(f"unknown point feature kind {self.point_kind!r}")
        if self.token_kind != "hashed-token-features":
            raise ValueError(f"unknown token feature kind {self.token_kind!r}")
        return points, HashedTokenFeatures(model.e, self.seed)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    oversegment: OversegmentConfig = field(default_factory=OversegmentConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    gt_pool_threshold: float = 0.5

    @classmethod
    def from_dict(cls, blob: Mapping) -> RunConfig:
        unknown = set(blob) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=_build(ModelConfig, blob.get("model")),
            loss=_build(LossConfig, blob.get("loss")),
            schedule=_build(TrainSchedule, blob.get("schedule")),
            oversegment=_build(OversegmentConfig, blob.get("oversegment")),
            features=_build(FeatureConfig, blob.get("features")),
            gt_pool_threshold=float(blob.get("gt_pool_threshold", 0.5)),
        )

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


def load_data_dir(data_dir) -> tuple[list[AnnotatedDescription], dict[str, Scene], list[Violation]]:
    d = Path(data_dir)
    scenes = load_scene_dir(d / SCENES)
    descs, violations = load_dataset(d / RECORDS, scenes)
    return descs, scenes, violations


def partitions_for(scenes: Mapping[str, Scene], cfg: OversegmentConfig,
                   cache_dir=None, write_cache: bool = False) -> dict[str, SuperpointPartition]:
    """Oversegment every scene, reusing cache files computed with the same config."""
    digest = cfg.digest()
    out = {}
    cache = Path(cache_dir) if cache_dir is not None else None
    for sid, scene in sorted(scenes.items()):
        path = cache / f"{sid}{PARTITION_SUFFIX}" if cache is not None else None
        if path is not None and path.exists():
            part, cached_digest = read_partition(path)
            if cached_digest == digest and part.n_points == scene.n_points:
                out[sid] = part
                continue
            logger.info("stale superpoint cache for %s", sid)
        out[sid] = oversegment(scene, cfg)
        if path is not None and write_cache:
            cache.mkdir(parents=True, exist_ok=True)
            write_partition(out[sid], path, digest)
    return out


def samples_from_dir(data_dir, cfg: RunConfig, descs=None, scenes=None) -> list[Sample]:
    if descs is None or scenes is None:
        descs, scenes, _ = load_data_dir(data_dir)
    parts = partitions_for(scenes, cfg.oversegment, Path(data_dir) / SUPERPOINTS)
    points, tokens = cfg.features.providers(cfg.model, data_dir)
    return build_samples(descs, scenes, parts, points, tokens, cfg.gt_pool_threshold)
