"""Phrase-annotated descriptions: tagged text, record/scene files, statistics.

Tagged text marks each phrase explicitly and appends its instance ids::

    put [the clothes](4,5) in [the washing machine](9)

Tokens are lowercased words with punctuation split off. Square brackets are
reserved; a parenthesis is only special directly after a closing bracket.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import UNLABELED, Scene, validate_scene
from .exceptions import (
    EmptyDataset,
    EmptyIdList,
    FileUnreadable,
    MalformedRecord,
    NonIntegerId,
    TaggedTextError,
    UnbalancedDelimiters,
)

LONG_TEXT_MIN_TOKENS = 51  # "long" means more than 50 tokens
COMPLEX_MIN_PHRASES = 4
SENTENCE_SPAN = (-1, -1)

_TOKEN_RE = re.compile(r"\w+(?:'\w+)*|[^\w\s]")
_ID_RE = re.compile(r"\d+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class PhraseTarget:
    """A phrase span (inclusive token indices) and the instances it names.

    The sentence-level target uses the span ``(-1, -1)`` and head ``-1``,
    which maps onto the [CLS] query.
    """

    span: tuple[int, int]
    head_index: int
    target_ids: frozenset[int]
    is_sentence_level: bool = False

    def __post_init__(self):
        object.__setattr__(self, "span", (int(self.span[0]), int(self.span[1])))
        object.__setattr__(self, "target_ids", frozenset(int(i) for i in self.target_ids))

    @classmethod
    def sentence(cls, target_ids: Iterable[int]) -> PhraseTarget:
        return cls(SENTENCE_SPAN, -1, frozenset(target_ids), True)

    @property
    def query_index(self) -> int:
        """Row of the decoder query for this phrase ([CLS] is row 0)."""
        return self.head_index + 1


@dataclass(frozen=True)
class AnnotatedDescription:
    description_id: str
    scene_id: str
    tokens: tuple[str, ...]
    phrases: tuple[PhraseTarget, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "phrases", tuple(self.phrases))

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_phrases(self) -> int:
        return len(self.phrases)

    @property
    def is_long(self) -> bool:
        return self.n_tokens >= LONG_TEXT_MIN_TOKENS

    @property
    def is_complex(self) -> bool:
        return self.n_phrases >= COMPLEX_MIN_PHRASES

    @property
    def text_phrases(self) -> tuple[PhraseTarget, ...]:
        return tuple(p for p in self.phrases if not p.is_sentence_level)

    @property
    def sentence_target(self) -> PhraseTarget | None:
        for p in self.phrases:
            if p.is_sentence_level:
                return p
        return None

    def target_ids(self) -> set[int]:
        out: set[int] = set()
        for p in self.phrases:
            out |= p.target_ids
        return out

    def check(self) -> list[str]:
        """Invariant violations of this description (empty if valid)."""
        problems = []
        if self.n_tokens < 1:
            problems.append("no tokens")
        if self.n_phrases < 1:
            problems.append("no phrases")
        prev_end = -1
        for j, p in enumerate(self.phrases):
            if p.is_sentence_level:
                if p.span != SENTENCE_SPAN or p.head_index != -1:
                    problems.append(f"phrase {j}: sentence target with a token span")
                if not p.target_ids:
                    problems.append(f"phrase {j}: empty sentence target")
                continue
            start, end = p.span
            if not 0 <= start <= end < self.n_tokens:
                problems.append(f"phrase {j}: span {p.span} outside [0, {self.n_tokens})")
            if not start <= p.head_index <= end:
                problems.append(f"phrase {j}: head {p.head_index} outside span {p.span}")
            if start <= prev_end:
                problems.append(f"phrase {j}: overlaps or precedes the previous phrase")
            prev_end = max(prev_end, end)
            if not p.target_ids:
                problems.append(f"phrase {j}: empty target id set")
        return problems


def _byte_offset(raw: str, i: int) -> int:
    return len(raw[:i].encode("utf-8"))


def _parse_ids(raw: str, open_at: int, close_at: int) -> frozenset[int]:
    body = raw[open_at + 1 : close_at]
    if not body.strip():
        raise EmptyIdList("empty id list", _byte_offset(raw, open_at))
    ids = []
    pos = open_at + 1
    for item in body.split(","):
        stripped = item.strip()
        if not _ID_RE.fullmatch(stripped):
            lead = len(item) - len(item.lstrip())
            raise NonIntegerId(
                f"instance id {stripped!r} is not a non-negative integer",
                _byte_offset(raw, pos + lead),
            )
        ids.append(int(stripped))
        pos += len(item) + 1
    return frozenset(ids)


def parse_tagged_text(raw: str) -> tuple[list[str], list[PhraseTarget]]:
    """Split tagged text into tokens and phrase targets.

    The head of each phrase is its last token.
    """
    tokens: list[str] = []
    phrases: list[PhraseTarget] = []
    i, n = 0, len(raw)
    plain_start = 0
    while i < n:
        ch = raw[i]
        if ch == "]":
            raise UnbalancedDelimiters("']' without a matching '['", _byte_offset(raw, i))
        if ch != "[":
            i += 1
            continue
        tokens.extend(tokenize(raw[plain_start:i]))
        open_bracket = i
        close = i + 1
        while close < n and raw[close] not in "[]":
            close += 1
        if close >= n:
            raise UnbalancedDelimiters("'[' is never closed", _byte_offset(raw, open_bracket))
        if raw[close] == "[":
            raise UnbalancedDelimiters("nested '['", _byte_offset(raw, close))
        words = tokenize(raw[open_bracket + 1 : close])
        if not words:
            raise TaggedTextError("empty phrase", _byte_offset(raw, open_bracket))
        if close + 1 >= n or raw[close + 1] != "(":
            raise UnbalancedDelimiters(
                "phrase is not followed by '(ids)'", _byte_offset(raw, close)
            )
        paren = close + 1
        end_paren = raw.find(")", paren + 1)
        if end_paren < 0:
            raise UnbalancedDelimiters("'(' is never closed", _byte_offset(raw, paren))
        ids = _parse_ids(raw, paren, end_paren)
        start = len(tokens)
        tokens.extend(words)
        end = len(tokens) - 1
        phrases.append(PhraseTarget((start, end), end, ids))
        i = plain_start = end_paren + 1
    tokens.extend(tokenize(raw[plain_start:]))
    return tokens, phrases


def serialize_tagged_text(desc: AnnotatedDescription) -> str:
    """Canonical tagged text; ids ascend. The sentence target is not emitted."""
    by_start = {p.span[0]: p for p in desc.text_phrases}
    parts = []
    i = 0
    while i < desc.n_tokens:
        p = by_start.get(i)
        if p is None:
            parts.append(desc.tokens[i])
            i += 1
            continue
        start, end = p.span
        ids = ",".join(str(t) for t in sorted(p.target_ids))
        parts.append(f"[{' '.join(desc.tokens[start:end + 1])}]({ids})")
        i = end + 1
    return " ".join(parts)


def make_description(
    description_id: str,
    scene_id: str,
    tagged_text: str,
    sentence_target_ids: Iterable[int] | None = None,
) -> AnnotatedDescription:
    tokens, phrases = parse_tagged_text(tagged_text)
    if sentence_target_ids is not None:
        phrases.insert(0, PhraseTarget.sentence(sentence_target_ids))
    return AnnotatedDescription(description_id, scene_id, tuple(tokens), tuple(phrases))


# --- record files -----------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    line: int | None
    description_id: str | None
    message: str

    def __str__(self):
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.description_id is not None:
            where.append(self.description_id)
        return ": ".join(where + [self.message])


def description_to_record(desc: AnnotatedDescription) -> dict:
    rec = {
        "description_id": desc.description_id,
        "scene_id": desc.scene_id,
        "tagged_text": serialize_tagged_text(desc),
    }
    sent = desc.sentence_target
    if sent is not None:
        rec["sentence_target_ids"] = sorted(sent.target_ids)
    return rec


def write_records(descs: Iterable[AnnotatedDescription], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in descs:
            fh.write(json.dumps(description_to_record(d), sort_keys=True) + "\n")


def _record_field(rec, key, line, types):
    if key not in rec:
        raise MalformedRecord(line, f"missing field {key!r}")
    if not isinstance(rec[key], types):
        raise MalformedRecord(line, f"field {key!r} has the wrong type")
    return rec[key]


def read_records(path) -> list[tuple[int, dict]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise MalformedRecord(lineno, "record is not an object")
        _record_field(rec, "description_id", lineno, str)
        _record_field(rec, "scene_id", lineno, str)
        _record_field(rec, "tagged_text", lineno, str)
        sent = rec.get("sentence_target_ids")
        if sent is not None and not (
            isinstance(sent, list) and all(isinstance(i, int) and i >= 0 for i in sent)
        ):
            raise MalformedRecord(lineno, "sentence_target_ids must be a list of ids")
        out.append((lineno, rec))
    return out


def load_dataset(
    path, scenes: Mapping[str, Scene] | str | os.PathLike | None = None
) -> tuple[list[AnnotatedDescription], list[Violation]]:
    """Parse a record file, collecting data problems instead of raising.

    ``scenes`` (a mapping or a scene directory) enables the cross-checks
    against scene contents. Records whose text cannot be parsed are reported
    and skipped.
    """
    if scenes is not None and not isinstance(scenes, Mapping):
        scenes = load_scene_dir(scenes)
    descs, violations = [], []
    seen = set()
    for lineno, rec in read_records(path):
        did = rec["description_id"]
        if did in seen:
            violations.append(Violation(lineno, did, "duplicate description_id"))
        seen.add(did)
        try:
            desc = make_description(
                did, rec["scene_id"], rec["tagged_text"], rec.get("sentence_target_ids")
            )
        except TaggedTextError as exc:
            violations.append(Violation(lineno, did, f"bad tagged text: {exc}"))
            continue
        violations.extend(Violation(lineno, did, m) for m in desc.check())
        if scenes is not None:
            scene = scenes.get(desc.scene_id)
            if scene is None:
                violations.append(Violation(lineno, did, f"unknown scene {desc.scene_id!r}"))
            else:
                present = set(scene.instance_ids())
                for tid in sorted(desc.target_ids() - present):
                    violations.append(
                        Violation(lineno, did, f"instance {tid} not in scene {desc.scene_id!r}")
                    )
        descs.append(desc)
    return descs, violations


# --- scene files ------------------------------------------------------------

SCENE_SUFFIX = ".scene.txt"


def write_scene(scene: Scene, path) -> None:
    """Text table: a ``#`` header, then one ``x y z r g b label`` row per point.

    Unlabeled points are written with label -1. Floats use 17 significant
    digits so the file round-trips exactly.
    """
    lines = [
        f"# scene_id: {scene.scene_id}",
        f"# n_points: {scene.n_points}",
        "# columns: x y z r g b instance_label",
    ]
    for row, lab in zip(scene.points, scene.instance_labels):
        lines.append(" ".join(f"{v:.17g}" for v in row) + f" {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scene(path) -> Scene:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    header = {}
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
            continue
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise MalformedRecord(lineno, f"expected 7 columns, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts[:6]] + [int(parts[6])])
        except ValueError as exc:
            raise MalformedRecord(lineno, str(exc)) from exc
    if "scene_id" not in header:
        raise MalformedRecord(1, "missing '# scene_id:' header")
    n_declared = header.get("n_points")
    if n_declared is not None and int(n_declared) != len(rows):
        raise MalformedRecord(len(rows), f"header declares {n_declared} points, found {len(rows)}")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 7)
    labels = arr[:, 6].astype(np.int64)
    labels[labels < 0] = UNLABELED
    return Scene(header["scene_id"], arr[:, :6], labels)


def write_scene_dir(scenes: Iterable[Scene], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        write_scene(s, d / f"{s.scene_id}{SCENE_SUFFIX}")


def load_scene_dir(directory) -> dict[str, Scene]:
    d = Path(directory)
    if not d.is_dir():
        raise FileUnreadable(f"{directory} is not a directory")
    scenes = {}
    for p in sorted(d.glob(f"*{SCENE_SUFFIX}")):
        s = read_scene(p)
        scenes[s.scene_id] = s
    return scenes


def validate_dataset(
    descs: Sequence[AnnotatedDescription],
    violations: Sequence[Violation],
    scenes: Mapping[str, Scene],
) -> list[Violation]:
    """Record-level violations plus scene invariants for referenced scenes."""
    out = list(violations)
    referenced: dict[str, set[int]] = {}
    for d in descs:
        referenced.setdefault(d.scene_id, set()).update(d.target_ids())
    for sid in sorted(scenes):
        ids = referenced.get(sid, set())
        # missing instances are already reported per record
        present = set(scenes[sid].instance_ids())
        out.extend(
            Violation(None, None, m)
            for m in validate_scene(scenes[sid], ids & present)
        )
    return out


# --- statistics -------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSummary:
    num_descriptions: int
    avg_token_length: float
    long_fraction: float
    avg_masks_per_text: float
    num_distinct_objects: int
    num_phrases: int
    num_long: int
    num_complex: int
    category_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_table(self, name: str = "dataset") -> str:
        """One row in the layout of the usual dataset-comparison table."""
        header = ["Dataset", "Avg. length", "Long", "Avg. mask", "Num"]
        row = [
            name,
            f"{self.avg_token_length:.1f}",
            f"{100 * self.long_fraction:.1f}%",
            f"{self.avg_masks_per_text:.1f}",
            str(self.num_descriptions),
        ]
        widths = [max(len(h), len(v)) for h, v in zip(header, row)]
        fmt = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return "\n".join([fmt(header), "-+-".join("-" * w for w in widths), fmt(row)])

    def to_csv(self, name: str = "dataset") -> str:
        cols = [
            "dataset", "num_descriptions", "avg_token_length", "long_fraction",
            "avg_masks_per_text", "num_distinct_objects", "num_phrases",
            "num_long", "num_complex",
        ]
        d = self.to_dict()
        d["dataset"] = name
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        writer.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in cols])
        return buf.getvalue()


def dataset_stats(descs: Sequence[AnnotatedDescription]) -> DatasetSummary:
    if not descs:
        raise EmptyDataset("dataset_stats needs at least one description")
    m = len(descs)
    lengths = sorted(d.n_tokens for d in descs)
    ks = sorted(d.n_phrases for d in descs)
    objects = {(d.scene_id, i) for d in descs for i in d.target_ids()}
    cats = Counter(
        d.tokens[p.head_index] for d in descs for p in d.text_phrases
    )
    # sorted inputs make the float sums order-independent
    return DatasetSummary(
        num_descriptions=m,
        avg_token_length=float(sum(lengths)) / m,
        long_fraction=sum(d.is_long for d in descs) / m,
        avg_masks_per_text=float(sum(ks)) / m,
        num_distinct_objects=len(objects),
        num_phrases=sum(ks),
        num_long=sum(d.is_long for d in descs),
        num_complex=sum(d.is_complex for d in descs),
        category_counts=dict(sorted(cats.items())),
    )


# Published summary of the full DetailRefer release (all splits).
DETAILREFER_SUMMARY = {
    "avg_token_length": 24.9,
    "long_fraction": 0.074,
    "avg_masks_per_text": 2.9,
    "num_descriptions": 54432,
}
# values that depend on how text is tokenized get a relative tolerance
LENGTH_DERIVED = ("avg_token_length", "long_fraction")


@dataclass(frozen=True)
class SummaryCheck:
    field: str
    value: float
    reference: float
    tolerance: float
    ok: bool


def compare_summary(summary: DatasetSummary, reference: Mapping[str, float] = DETAILREFER_SUMMARY,
                    rel_tol: float = 0.10) -> list[SummaryCheck]:
    """Check ``summary`` against reference statistics.

    Length-derived values may differ by ``rel_tol`` (relative) because
    tokenizers disagree; every other field is compared at the precision the
    reference was published with.
    """
    out = []
    for name, ref in reference.items():
        value = getattr(summary, name)
        if name in LENGTH_DERIVED:
            tol = rel_tol * abs(ref)
        elif isinstance(ref, int):
            tol = 0.0
        else:
            # half a unit in the last published digit
            decimals = len(repr(float(ref)).partition(".")[2])
            tol = 0.5 * 10 ** -decimals
        out.append(SummaryCheck(name, float(value), float(ref), tol, abs(value - ref) <= tol))
    return out


def split_subsets(descs: Sequence[AnnotatedDescription]) -> dict[str, list[AnnotatedDescription]]:
    """Overall, Long (more than 50 tokens) and Complex (4+ phrases); may overlap."""
    return {
        "overall": list(descs),
        "long": [d for d in descs if d.is_long],
        "complex": [d for d in descs if d.is_complex],
    }
