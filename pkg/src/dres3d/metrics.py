"""Phrase-level segmentation metrics: mIoU, Acc@t and sentence-level mIoU-S."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotation import AnnotatedDescription
from .core import PhraseMaskSet, PointMask, Scene, point_iou, union_instance_mask
from .exceptions import (
    EmptyInput,
    FileUnreadable,
    MalformedRecord,
    MissingPrediction,
    PhraseCountMismatch,
)

THRESHOLDS = (0.25, 0.5)
SUBSETS = ("long", "complex", "overall")
_SUBSET_TITLES = {"long": "Long", "complex": "Complex", "overall": "Overall"}


@dataclass(frozen=True)
class EvalRecord:
    description_id: str
    ious: tuple[float, ...]
    long: bool = False
    complex: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ious", tuple(float(v) for v in self.ious))
        if not self.ious:
            raise EmptyInput(f"{self.description_id}: a record needs at least one phrase")


def _phrase_ious(pred: Sequence[PointMask], gt: Sequence[PointMask], did: str) -> tuple[float, ...]:
    if len(pred) != len(gt):
        raise PhraseCountMismatch(f"{did}: {len(pred)} predicted masks for {len(gt)} phrases")
    return tuple(point_iou(p, g) for p, g in zip(pred, gt))


def evaluate(predictions: Mapping[str, PhraseMaskSet | Sequence[PointMask]],
             descriptions: Sequence[AnnotatedDescription],
             scenes: Mapping[str, Scene]) -> list[EvalRecord]:
    """Point-level IoU of every predicted phrase mask, in phrase order."""
    records = []
    for d in descriptions:
        if d.description_id not in predictions:
            raise MissingPrediction(d.description_id)
        pred = predictions[d.description_id]
        masks = pred.masks if isinstance(pred, PhraseMaskSet) else tuple(pred)
        scene = scenes[d.scene_id]
        gt = [union_instance_mask(scene, p.target_ids) for p in d.phrases]
        records.append(EvalRecord(d.description_id, _phrase_ious(masks, gt, d.description_id),
                                  d.is_long, d.is_complex))
    return records


def _require(records):
    if not records:
        raise EmptyInput("no evaluation records")


def miou(records: Sequence[EvalRecord]) -> float:
    """Mean IoU over all phrases of all descriptions."""
    _require(records)
    n = sum(len(r.ious) for r in records)
    return math.fsum(v for r in records for v in r.ious) / n


def acc_at(records: Sequence[EvalRecord], t: float) -> float:
    """Share of phrases whose IoU is strictly greater than ``t``."""
    _require(records)
    n = sum(len(r.ious) for r in records)
    return sum(v > t for r in records for v in r.ious) / n


def miou_s(records: Sequence[EvalRecord]) -> float:
    """Mean over descriptions of each description's mean phrase IoU."""
    _require(records)
    return math.fsum(math.fsum(r.ious) / len(r.ious) for r in records) / len(records)


@dataclass(frozen=True)
class SubsetMetrics:
    acc_25: float
    acc_50: float
    miou_s: float
    miou: float
    n_descriptions: int
    n_phrases: int


def subset_metrics(records: Sequence[EvalRecord]) -> SubsetMetrics:
    return SubsetMetrics(
        acc_at(records, 0.25), acc_at(records, 0.5), miou_s(records), miou(records),
        len(records), sum(len(r.ious) for r in records),
    )


@dataclass(frozen=True)
class MetricsReport:
    """Metrics per subset; a subset with no members is ``None``."""

    long: SubsetMetrics | None
    complex: SubsetMetrics | None
    overall: SubsetMetrics | None

    def subsets(self) -> dict[str, SubsetMetrics | None]:
        return {name: getattr(self, name) for name in SUBSETS}

    def to_dict(self) -> dict:
        return {k: (asdict(v) if v is not None else None) for k, v in self.subsets().items()}

    @classmethod
    def from_dict(cls, blob: Mapping) -> MetricsReport:
        return cls(**{k: (SubsetMetrics(**blob[k]) if blob.get(k) else None) for k in SUBSETS})

    def to_table(self, name: str = "model") -> str:
        """Percentages laid out as Long | Complex | Overall x (0.25, 0.5, mIoU-S, mIoU)."""
        cols = ["0.25", "0.5", "mIoU-S", "mIoU"]
        cells = []
        for m in self.subsets().values():
            if m is None:
                cells += ["-"] * 4
            else:
                cells += [f"{100 * v:.1f}" for v in (m.acc_25, m.acc_50, m.miou_s, m.miou)]
        w = max(6, max(len(c) for c in cells))
        name_w = max(5, len(name))
        group_w = 4 * w + 3
        top = " " * name_w + " | " + " | ".join(
            _SUBSET_TITLES[s].center(group_w) for s in SUBSETS)
        mid = "Model".ljust(name_w) + " | " + " | ".join(
            " ".join(c.rjust(w) for c in cols) for _ in SUBSETS)
        row = name.ljust(name_w) + " | " + " | ".join(
            " ".join(c.rjust(w) for c in cells[i:i + 4]) for i in range(0, 12, 4))
        rule = "-" * len(mid)
        return "\n".join([top.rstrip(), mid, rule, row])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["subset", "acc_25", "acc_50", "miou_s", "miou", "n_descriptions", "n_phrases"])
        for name, m in self.subsets().items():
            if m is not None:
                writer.writerow([name, repr(m.acc_25), repr(m.acc_50), repr(m.miou_s),
                                 repr(m.miou), m.n_descriptions, m.n_phrases])
        return buf.getvalue()


def report(records: Sequence[EvalRecord]) -> MetricsReport:
    groups = {
        "overall": list(records),
        "long": [r for r in records if r.long],
        "complex": [r for r in records if r.complex],
    }
    return MetricsReport(**{k: (subset_metrics(v) if v else None) for k, v in groups.items()})


# --- prediction files -----------------------------------------------------------

def write_predictions(predictions: Mapping[str, PhraseMaskSet], path) -> None:
    """JSON lines: ``description_id``, ``masks`` as lists of positive point indices."""
    with open(path, "w", encoding="utf-8") as fh:
        for did in sorted(predictions):
            pred = predictions[did]
            rec = {"description_id": did,
                   "masks": [m.indices().tolist() for m in pred.masks]}
            if pred.sentence_mask is not None:
                rec["sentence_mask"] = pred.sentence_mask.indices().tolist()
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path, descriptions: Sequence[AnnotatedDescription],
                     scenes: Mapping[str, Scene]) -> dict[str, PhraseMaskSet]:
    by_id = {d.description_id: d for d in descriptions}
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            did = rec["description_id"]
            masks = rec["masks"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedRecord(lineno, f"bad prediction record ({exc})") from exc
        if did not in by_id:
            continue
        scene = scenes[by_id[did].scene_id]

        def to_mask(idx):
            bits = np.zeros(scene.n_points, dtype=bool)
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= scene.n_points):
                raise MalformedRecord(lineno, "point index out of range")
            bits[idx] = True
            return PointMask.from_bits(bits, scene.scene_id)

        sent = rec.get("sentence_mask")
        out[did] = PhraseMaskSet(tuple(to_mask(m) for m in masks),
                                 to_mask(sent) if sent is not None else None)
    return out
