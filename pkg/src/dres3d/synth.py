"""Synthetic scenes and descriptions, plus the feature providers that stand in
for pretrained point and text backbones."""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .annotation import AnnotatedDescription, make_description
from .core import UNLABELED, Scene
from .exceptions import ConfigInfeasible, FeatureFileMissing, FileUnreadable, MalformedRecord, ShapeMismatch

# category -> (rgb, box extent in meters)
CATEGORIES = {
    "chair": ((0.55, 0.33, 0.12), (0.45, 0.45, 0.80)),
    "table": ((0.80, 0.65, 0.40), (0.80, 0.60, 0.70)),
    "sofa": ((0.20, 0.35, 0.70), (0.80, 0.50, 0.60)),
    "lamp": ((0.95, 0.90, 0.30), (0.25, 0.25, 0.80)),
    "bed": ((0.85, 0.85, 0.85), (0.80, 0.80, 0.45)),
    "cabinet": ((0.35, 0.20, 0.10), (0.60, 0.40, 0.80)),
    "monitor": ((0.10, 0.10, 0.10), (0.50, 0.15, 0.35)),
    "plant": ((0.15, 0.65, 0.20), (0.35, 0.35, 0.60)),
    "box": ((0.75, 0.55, 0.35), (0.35, 0.35, 0.30)),
    "bin": ((0.45, 0.45, 0.50), (0.30, 0.30, 0.40)),
}
PLURALS = {"box": "boxes"}
RELATIONS = ("next to", "near", "to the left of", "to the right of", "behind",
             "in front of", "close to", "across from")
OPENERS = ("find", "look at", "there is", "locate", "i mean", "pick out")
FILLER = (
    "the room is bright and the afternoon light falls across the floor from the window",
    "it is placed where people usually pass by when they walk into this part of the room",
    "you will notice it quickly if you stand near the door and look toward the middle",
    "this area of the room looks tidy and most of the furniture stands along the walls",
)
CELL_SIZE = 2.0
PAIR_OFFSET = 0.45


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_scenes: int = 8
    objects_per_scene: tuple[int, int] = (3, 5)
    points_per_object: tuple[int, int] = (30, 50)
    phrases_per_description: tuple[int, int] = (1, 4)
    descriptions_per_scene: int = 1
    long_text_fraction: float = 0.0
    adjacent_pair_fraction: float = 0.25
    sentence_level_fraction: float = 0.0
    grid: int = 4
    color_jitter: float = 0.03
    clutter_points: int = 0
    vocabulary: tuple[str, ...] = tuple(CATEGORIES)

    def __post_init__(self):
        for name in ("objects_per_scene", "points_per_object", "phrases_per_description"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a non-empty range of positive integers")
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        for name in ("long_text_fraction", "adjacent_pair_fraction", "sentence_level_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        unknown = set(self.vocabulary) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown categories {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass(frozen=True)
class ObjectSpec:
    instance_id: int
    category: str
    center: tuple[float, float, float]
    extent: tuple[float, float, float]


def scene_id_for(cfg: SynthConfig, index: int) -> str:
    return f"synth{cfg.seed}_{index:04d}"


def _index_of(scene_id: str) -> int:
    m = re.fullmatch(r"synth\d+_(\d+)", scene_id)
    if m is None:
        raise ValueError(f"{scene_id!r} was not produced by gen_scene")
    return int(m.group(1))


def scene_layout(cfg: SynthConfig, index: int) -> list[ObjectSpec]:
    """Objects of scene ``index``: categories, ids and boxes."""
    rng = np.random.default_rng([cfg.seed, index, 0])
    lo, hi = cfg.objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    cells = cfg.grid * cfg.grid
    vocab = list(cfg.vocabulary)
    pair = n >= 2 and rng.random() < cfg.adjacent_pair_fraction
    n_cells = n - 1 if pair else n
    if n_cells > cells:
        raise ConfigInfeasible(f"{n} objects do not fit a {cfg.grid}x{cfg.grid} arena")
    n_distinct = n - 1 if pair else n
    if n_distinct > len(vocab):
        raise ConfigInfeasible(f"{n_distinct} distinct categories requested, vocabulary has {len(vocab)}")
    cats = [vocab[i] for i in rng.choice(len(vocab), size=n_distinct, replace=False)]
    slots = rng.choice(cells, size=n_cells, replace=False)
    objects = []
    for j, slot in enumerate(slots):
        cx = (slot % cfg.grid + 0.5) * CELL_SIZE
        cy = (slot // cfg.grid + 0.5) * CELL_SIZE
        cat = cats[j]
        ext = CATEGORIES[cat][1]
        if pair and j == 0:
            # two same-category objects sharing one cell, a short gap apart
            for dx in (-PAIR_OFFSET, PAIR_OFFSET):
                objects.append((cat, (cx + dx, cy, ext[2] / 2), ext))
        else:
            objects.append((cat, (cx, cy, ext[2] / 2), ext))
    return [ObjectSpec(i, cat, c, e) for i, (cat, c, e) in enumerate(objects)]


def gen_scene(cfg: SynthConfig, index: int) -> Scene:
    """Axis-aligned box clusters, one instance label per box."""
    objects = scene_layout(cfg, index)
    rng = np.random.default_rng([cfg.seed, index, 1])
    lo, hi = cfg.points_per_object
    pts, labels = [], []
    for obj in objects:
        m = int(rng.integers(lo, hi + 1))
        ext = np.array(obj.extent)
        xyz = np.array(obj.center) + (rng.random((m, 3)) - 0.5) * ext
        base = np.array(CATEGORIES[obj.category][0])
        rgb = np.clip(base + rng.normal(0.0, cfg.color_jitter, size=(m, 3)), 0.0, 1.0)
        pts.append(np.hstack([xyz, rgb]))
        labels.append(np.full(m, obj.instance_id))
    if cfg.clutter_points:
        side = cfg.grid * CELL_SIZE
        xy = rng.random((cfg.clutter_points, 2)) * side
        xyz = np.hstack([xy, np.zeros((cfg.clutter_points, 1))])
        rgb = np.full((cfg.clutter_points, 3), 0.5)
        pts.append(np.hstack([xyz, rgb]))
        labels.append(np.full(cfg.clutter_points, UNLABELED))
    return Scene(scene_id_for(cfg, index), np.vstack(pts), np.concatenate(labels))


def gen_scenes(cfg: SynthConfig) -> list[Scene]:
    return [gen_scene(cfg, i) for i in range(cfg.num_scenes)]


def _noun(cat: str, count: int) -> str:
    if count == 1:
        return f"the {cat}"
    plural = PLURALS.get(cat, cat + "s")
    word = {2: "two", 3: "three"}.get(count, "all")
    return f"the {word} {plural}"


def _description(cfg: SynthConfig, objects: list[ObjectSpec], scene_id: str, j: int,
                 rng: np.random.Generator) -> AnnotatedDescription:
    by_cat: dict[str, list[int]] = {}
    for o in objects:
        by_cat.setdefault(o.category, []).append(o.instance_id)
    cats = sorted(by_cat)
    lo, hi = cfg.phrases_per_description
    k = int(rng.integers(lo, hi + 1))
    order = [cats[i] for i in rng.permutation(len(cats))]
    chosen = [order[i % len(order)] for i in range(k)]

    def tag(cat):
        ids = by_cat[cat]
        return f"[{_noun(cat, len(ids))}]({','.join(map(str, ids))})"

    parts = [OPENERS[int(rng.integers(len(OPENERS)))], tag(chosen[0])]
    for n, cat in enumerate(chosen[1:]):
        link = "that is" if n == 0 else "and"
        rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
        parts += [link, rel, tag(cat)]
    text = " ".join(parts) + " ."
    if rng.random() < cfg.long_text_fraction:
        i = 0
        while len(make_description("", scene_id, text).tokens) <= 50:
            text += " " + FILLER[(j + i) % len(FILLER)] + " ."
            i += 1
    sentence = None
    if rng.random() < cfg.sentence_level_fraction:
        sentence = by_cat[chosen[0]]
    return make_description(f"{scene_id}_d{j:02d}", scene_id, text, sentence)


def gen_dataset(cfg: SynthConfig, scenes: Sequence[Scene]) -> list[AnnotatedDescription]:
    """Template descriptions; each phrase names every instance of one category."""
    out = []
    for scene in scenes:
        index = _index_of(scene.scene_id)
        objects = scene_layout(cfg, index)
        present = set(scene.instance_ids())
        if {o.instance_id for o in objects} != present:
            raise ConfigInfeasible(f"scene {scene.scene_id} does not match config layout")
        rng = np.random.default_rng([cfg.seed, index, 2])
        for j in range(cfg.descriptions_per_scene):
            out.append(_description(cfg, objects, scene.scene_id, j, rng))
    return out


# --- feature providers ---------------------------------------------------------

class GeometricPointFeatures(TransformerMixin, BaseEstimator):
    """Per-point position, color and k-NN neighborhood statistics, mapped to
    ``n_features`` columns by a fixed seeded random projection."""

    kind = "geometric-point-features"
    _RAW = 12

    def __init__(self, n_features=16, k=8, seed=0):
        self.n_features = n_features
        self.k = k
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def _projection(self):
        rng = np.random.default_rng([self.seed, 7])
        return rng.normal(size=(self._RAW, self.n_features)) / np.sqrt(self._RAW)

    def transform(self, scene: Scene) -> np.ndarray:
        xyz, rgb = scene.xyz, scene.rgb
        kk = min(self.k + 1, scene.n_points)
        _, nbr = cKDTree(xyz).query(xyz, k=kk)
        nbr = np.asarray(nbr).reshape(scene.n_points, kk)
        raw = np.hstack([
            xyz,
            rgb,
            rgb[nbr].mean(axis=1),
            xyz[nbr].std(axis=1) * 10.0,
        ])
        return raw @ self._projection()


class HashedTokenFeatures(TransformerMixin, BaseEstimator):
    """A fixed pseudo-random unit vector per distinct token string."""

    kind = "hashed-token-features"
    CLS = "\x00[CLS]"
    END = "\x00[END]"

    def __init__(self, n_features=32, seed=0):
        self.n_features = n_features
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def vector(self, token: str) -> np.ndarray:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
        v = np.random.default_rng([self.seed, h]).normal(size=self.n_features)
        return v / np.linalg.norm(v)

    def transform(self, tokens: Sequence[str]) -> np.ndarray:
        rows = [self.CLS, *tokens, self.END]
        return np.stack([self.vector(t) for t in rows])


class FileFeatures(BaseEstimator):
    """Point features read from ``<directory>/<scene_id>.feat.txt`` tables."""

    kind = "file-loaded"

    def __init__(self, directory="features"):
        self.directory = directory

    def fit(self, X=None, y=None):
        return self

    def transform(self, scene: Scene) -> np.ndarray:
        path = Path(self.directory) / f"{scene.scene_id}{FEATURE_SUFFIX}"
        if not path.exists():
            raise FeatureFileMissing(f"no feature table for scene {scene.scene_id!r} at {path}")
        sid, table = read_feature_table(path)
        if sid != scene.scene_id or table.shape[0] != scene.n_points:
            raise ShapeMismatch(f"{path}: table for {sid!r} with {table.shape[0]} rows")
        return table


FEATURE_SUFFIX = ".feat.txt"


def write_feature_table(scene_id: str, table, path) -> None:
    table = np.asarray(table, dtype=np.float64)
    lines = [f"# scene_id: {scene_id}", f"# n_points: {table.shape[0]}", f"# n_features: {table.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in table]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_feature_table(path) -> tuple[str, np.ndarray]:
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
                rows.append([float(v) for v in line.split()])
            except ValueError as exc:
                raise MalformedRecord(lineno, str(exc)) from exc
            if len(rows[-1]) != len(rows[0]):
                raise MalformedRecord(lineno, "ragged feature row")
    try:
        n, c = int(header["n_points"]), int(header["n_features"])
        sid = header["scene_id"]
    except (KeyError, ValueError) as exc:
        raise MalformedRecord(1, f"bad feature table header: {exc}") from exc
    table = np.array(rows, dtype=np.float64).reshape(-1, c) if rows else np.zeros((0, c))
    if table.shape != (n, c):
        raise MalformedRecord(len(rows), f"header declares {n}x{c}, found {table.shape}")
    return sid, table


def point_features(scene: Scene, provider) -> np.ndarray:
    return provider.transform(scene)


def token_features(tokens: Sequence[str], provider) -> np.ndarray:
    return provider.transform(list(tokens))
