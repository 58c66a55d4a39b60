"""Region-caption dataset curation.

Captions, candidate boxes and their scores arrive in the input records (they
would come from a captioner and a grounding detector); this module applies the
deterministic steps: sanitisation, referring-expression extraction, confidence
gating with NMS, and attribute-swap hard negatives.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .regionops import RegionBox

log = logging.getLogger(__name__)

CONFIDENCE_GATE = 0.4
DEFAULT_IOU_THRESHOLD = 0.5
NEGATIVES_PER_POSITIVE = 10
MAX_MALFORMED_FRACTION = 0.10

_BANNED = re.compile(r"[;,\r\n\v\f\x85\u2028\u2029]")
_EDGE_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


class DataError(ValueError):
    """Input data that cannot be used (malformed records, too many failures)."""


class InsufficientAttributesError(ValueError):
    pass


# -- lexicon ------------------------------------------------------------------------


@dataclass
class AttributeLexicon:
    attributes: dict[str, list[str]]
    nouns: set[str] = field(default_factory=set)
    modifiers: set[str] = field(default_factory=set)
    determiners: set[str] = field(default_factory=set)
    synonyms: list[set[str]] = field(default_factory=list)

    def __post_init__(self):
        self.attributes = {k: sorted(set(v)) for k, v in sorted(self.attributes.items())}
        self.nouns = set(self.nouns)
        self.modifiers = set(self.modifiers)
        self.determiners = set(self.determiners)
        self.synonyms = [set(g) for g in self.synonyms]
        self._class_of: dict[str, str] = {}
        for cls, words in self.attributes.items():
            for w in words:
                if w in self._class_of:
                    raise ValueError(f"{w!r} is in both {self._class_of[w]!r} and {cls!r}")
                self._class_of[w] = cls
        clash = self.nouns & set(self._class_of)
        if clash:
            raise ValueError(f"object nouns listed as attributes: {sorted(clash)}")

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeLexicon":
        return cls(
            attributes=d["attributes"],
            nouns=set(d.get("nouns", ())),
            modifiers=set(d.get("modifiers", ())),
            determiners=set(d.get("determiners", ())),
            synonyms=[set(g) for g in d.get("synonyms", ())],
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AttributeLexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "AttributeLexicon":
        text = resources.files("finealign").joinpath("data/lexicon.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def attribute_class(self, word: str) -> str | None:
        return self._class_of.get(word.lower())

    def replacements(self, word: str) -> list[str]:
        """Same-class words that may stand in for ``word``; never ``word`` or a synonym.

        Only the alphabetically first member of each synonym group is offered,
        so "grey" and "gray" never yield two negatives with the same meaning.
        """
        w = word.lower()
        cls = self._class_of.get(w)
        if cls is None:
            return []
        banned = {w}
        for group in self.synonyms:
            if w in group:
                banned |= group
            else:
                banned |= group - {min(group)}
        return [x for x in self.attributes[cls] if x not in banned]


# -- sanitisation -----------------------------------------------------------------------


def sanitize_caption(text: str) -> str:
    """Replace semicolons, commas and line breaks by spaces; collapse whitespace."""
    return " ".join(_BANNED.sub(" ", text).split())


# -- referring expressions ----------------------------------------------------------------


def _core(token: str) -> str:
    return _EDGE_PUNCT.sub("", token)


def extract_referring_expressions(caption: str, lexicon: AttributeLexicon) -> list[str]:
    """Noun phrases in order of appearance, duplicates removed.

    Grammar: ``[det] (attribute | modifier | hyphenated)* noun+`` optionally
    followed by ``of [det] (attribute | modifier)* noun+``.
    """
    tokens = [_core(t) for t in caption.split()]
    tokens = [t for t in tokens if t]
    low = [t.lower() for t in tokens]

    def is_noun(i):
        return i < len(low) and low[i] in lexicon.nouns

    def is_mod(i):
        if i >= len(low) or is_noun(i):
            return False
        w = low[i]
        return lexicon.attribute_class(w) is not None or w in lexicon.modifiers or "-" in w

    def phrase(i):
        j = i
        if j < len(low) and low[j] in lexicon.determiners:
            j += 1
        while is_mod(j):
            j += 1
        start_nouns = j
        while is_noun(j):
            j += 1
        return j if j > start_nouns else None

    found: list[str] = []
    seen: set[str] = set()
    i = 0
    while i < len(tokens):
        end = phrase(i)
        if end is None:
            i += 1
            continue
        if end < len(low) and low[end] == "of":
            tail = phrase(end + 1)
            if tail is not None:
                end = tail
        text = " ".join(tokens[i:end])
        if text.lower() not in seen:
            seen.add(text.lower())
            found.append(text)
        i = end
    return found


# -- NMS -------------------------------------------------------------------------------------


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a.coords if isinstance(a, RegionBox) else a
    bx1, by1, bx2, by2 = b.coords if isinstance(b, RegionBox) else b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def nms_order_key(box: RegionBox):
    return (-box.confidence, box.x1, box.y1)


def nms_filter(
    boxes: Sequence[RegionBox],
    conf_threshold: float = CONFIDENCE_GATE,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> list[RegionBox]:
    """Greedy NMS over boxes scoring strictly above ``conf_threshold``.

    Candidates are visited by (confidence desc, x1 asc, y1 asc); a box is
    suppressed when its IoU with an already kept box exceeds ``iou_threshold``.
    """
    candidates = sorted((b for b in boxes if b.confidence > conf_threshold), key=nms_order_key)
    kept: list[RegionBox] = []
    for box in candidates:
        if all(iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


# -- hard negatives ----------------------------------------------------------------------------


class Negatives(list):
    """List of negative captions; ``shortfall`` counts how many of the requested are missing."""

    def __init__(self, items=(), shortfall: int = 0):
        super().__init__(items)
        self.shortfall = shortfall


def derive_seed(seed: int, *keys) -> int:
    h = hashlib.sha256(repr((int(seed),) + tuple(str(k) for k in keys)).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def _match_case(template: str, word: str) -> str:
    if template.isupper() and len(template) > 1:
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


def attribute_positions(caption: str, lexicon: AttributeLexicon) -> list[int]:
    return [i for i, tok in enumerate(caption.split(" ")) if lexicon.attribute_class(_core(tok))]


def generate_hard_negatives(
    positive_caption: str,
    lexicon: AttributeLexicon,
    count: int = NEGATIVES_PER_POSITIVE,
    difficulty: int = 1,
    seed: int = 0,
) -> Negatives:
    """Captions that differ from the positive in exactly ``difficulty`` attribute words.

    Every substitution keeps the attribute class (a colour for a colour, a
    material for a material), so object nouns and the sentence frame stay
    intact. The candidate pool is enumerated exhaustively and ``count`` of them
    are drawn without replacement with a generator seeded by ``seed``.
    """
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    tokens = positive_caption.split(" ")
    positions = attribute_positions(positive_caption, lexicon)
    if len(positions) < difficulty:
        raise InsufficientAttributesError(
            f"{positive_caption!r} has {len(positions)} attribute words; difficulty {difficulty} needs more"
        )
    pool: list[str] = []
    seen = {positive_caption}
    for combo in itertools.combinations(positions, difficulty):
        options = []
        for pos in combo:
            tok = tokens[pos]
            core = _core(tok)
            start = tok.find(core)
            options.append(
                [tok[:start] + _match_case(core, w) + tok[start + len(core) :] for w in lexicon.replacements(core)]
            )
        for choice in itertools.product(*options):
            new = list(tokens)
            for pos, tok in zip(combo, choice):
                new[pos] = tok
            text = " ".join(new)
            if text not in seen:
                seen.add(text)
                pool.append(text)
    rng = np.random.default_rng(seed)
    take = min(count, len(pool))
    picks = rng.choice(len(pool), size=take, replace=False) if take else []
    return Negatives([pool[i] for i in picks], shortfall=count - take)


# -- records ------------------------------------------------------------------------------------------


@dataclass
class DatasetRecord:
    image_id: str
    image_source: str | dict
    short_caption: str
    long_caption: str
    regions: list[RegionBox] = field(default_factory=list)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def region_to_json(r: RegionBox) -> str:
    return (
        "{"
        f'"x1": {_fmt(r.x1)}, "y1": {_fmt(r.y1)}, "x2": {_fmt(r.x2)}, "y2": {_fmt(r.y2)}, '
        f'"confidence": {_fmt(r.confidence)}, '
        f'"positive_caption": {json.dumps(r.positive_caption)}, '
        f'"negative_captions": {json.dumps(list(r.negative_captions))}'
        "}"
    )


def record_to_json(rec: DatasetRecord) -> str:
    regions = ", ".join(region_to_json(r) for r in rec.regions)
    return (
        "{"
        f'"image_id": {json.dumps(rec.image_id)}, '
        f'"image_source": {json.dumps(rec.image_source, sort_keys=True)}, '
        f'"short_caption": {json.dumps(rec.short_caption)}, '
        f'"long_caption": {json.dumps(rec.long_caption)}, '
        f'"regions": [{regions}]'
        "}"
    )


_RECORD_KEYS = {"image_id", "image_source", "short_caption", "long_caption", "regions"}
_REGION_KEYS = {"x1", "y1", "x2", "y2", "confidence", "positive_caption", "negative_captions"}


def record_from_dict(d: dict, allow_region_extras: Iterable[str] = ()) -> tuple[DatasetRecord, list[dict]]:
    """Build a record; also return each region's extra fields (e.g. ``expression_index``)."""
    if not isinstance(d, dict):
        raise DataError("record is not an object")
    missing = _RECORD_KEYS - set(d)
    if missing - {"regions"}:
        raise DataError(f"missing fields {sorted(missing)}")
    unknown = set(d) - _RECORD_KEYS
    if unknown:
        raise DataError(f"unknown fields {sorted(unknown)}")
    regions, extras = [], []
    allowed = _REGION_KEYS | set(allow_region_extras)
    for rd in d.get("regions", []):
        bad = set(rd) - allowed
        if bad:
            raise DataError(f"unknown region fields {sorted(bad)}")
        try:
            regions.append(
                RegionBox(
                    float(rd["x1"]),
                    float(rd["y1"]),
                    float(rd["x2"]),
                    float(rd["y2"]),
                    float(rd.get("confidence", 1.0)),
                    str(rd.get("positive_caption", "")),
                    list(rd.get("negative_captions", [])),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad region: {exc}") from None
        extras.append({k: rd[k] for k in rd if k not in _REGION_KEYS})
    rec = DatasetRecord(
        str(d["image_id"]), d["image_source"], str(d["short_caption"]), str(d["long_caption"]), regions
    )
    return rec, extras


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_records(path, records: Iterable[DatasetRecord]) -> None:
    atomic_write_text(path, "".join(record_to_json(r) + "\n" for r in records))


def parse_records(lines: Iterable[str], allow_region_extras: Iterable[str] = (), source: str = "<input>"):
    """Parse JSON-lines records; returns ``(records, extras, diagnostics)``.

    Malformed lines are skipped with a line-numbered diagnostic; more than 10%
    malformed raises :class:`DataError`.
    """
    records, extras, problems = [], [], []
    total = 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        total += 1
        try:
            rec, ex = record_from_dict(json.loads(line), allow_region_extras)
        except (json.JSONDecodeError, DataError) as exc:
            msg = f"{source}:{lineno}: {exc}"
            log.warning("skipping malformed record %s", msg)
            problems.append(msg)
            continue
        records.append(rec)
        extras.append(ex)
    if total and len(problems) / total > MAX_MALFORMED_FRACTION:
        raise DataError(f"{len(problems)} of {total} records malformed; first: {problems[0]}")
    return records, extras, problems


def read_records(path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        records, _, _ = parse_records(fh, source=str(path))
    return records


# -- pipeline ------------------------------------------------------------------------------------------


@dataclass
class CurationSummary:
    records: int = 0
    records_skipped: int = 0
    boxes_in: int = 0
    boxes_kept: int = 0
    boxes_dropped_confidence: int = 0
    boxes_dropped_nms: int = 0
    boxes_unmatched: int = 0
    negatives_generated: int = 0
    negative_shortfall: int = 0
    regions_without_negatives: int = 0
    diagnostics: list[str] = field(default_factory=list)

    def counts(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "diagnostics"}


def curate_record(
    rec: DatasetRecord,
    extras: Sequence[dict],
    lexicon: AttributeLexicon,
    seed: int,
    summary: CurationSummary,
    conf_threshold: float = CONFIDENCE_GATE,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    difficulty: int = 1,
    negatives: int = NEGATIVES_PER_POSITIVE,
) -> DatasetRecord | None:
    short = sanitize_caption(rec.short_caption)
    long = sanitize_caption(rec.long_caption)
    if not short or not long:
        summary.records_skipped += 1
        summary.diagnostics.append(f"{rec.image_id}: empty caption after sanitisation")
        return None
    summary.boxes_in += len(rec.regions)

    expressions = None
    boxes: list[RegionBox] = []
    for k, (box, ex) in enumerate(zip(rec.regions, extras)):
        caption = sanitize_caption(box.positive_caption)
        if not caption:
            if expressions is None:
                expressions = extract_referring_expressions(long, lexicon)
            idx = int(ex.get("expression_index", k))
            if not 0 <= idx < len(expressions):
                summary.boxes_unmatched += 1
                continue
            caption = expressions[idx]
        boxes.append(RegionBox(box.x1, box.y1, box.x2, box.y2, box.confidence, caption, []))

    gated = [b for b in boxes if b.confidence > conf_threshold]
    summary.boxes_dropped_confidence += len(boxes) - len(gated)
    kept = nms_filter(gated, conf_threshold, iou_threshold)
    summary.boxes_dropped_nms += len(gated) - len(kept)
    summary.boxes_kept += len(kept)

    for k, box in enumerate(kept):
        try:
            negs = generate_hard_negatives(
                box.positive_caption,
                lexicon,
                count=negatives,
                difficulty=difficulty,
                seed=derive_seed(seed, rec.image_id, k),
            )
        except InsufficientAttributesError:
            summary.regions_without_negatives += 1
            continue
        box.negative_captions = [sanitize_caption(n) for n in negs]
        summary.negatives_generated += len(negs)
        summary.negative_shortfall += negs.shortfall
    summary.records += 1
    return DatasetRecord(rec.image_id, rec.image_source, short, long, kept)


def curate_records(
    records: Sequence[DatasetRecord],
    extras: Sequence[Sequence[dict]] | None,
    lexicon: AttributeLexicon,
    seed: int = 0,
    **options,
) -> tuple[list[DatasetRecord], CurationSummary]:
    """Run the pipeline per record; output sorted by image_id.

    Per-record seeds come from ``(seed, image_id)`` so records can be processed
    in any order or in parallel without changing the result.
    """
    summary = CurationSummary()
    if extras is None:
        extras = [[{} for _ in r.regions] for r in records]
    out = []
    for rec, ex in zip(records, extras):
        cur = curate_record(rec, ex, lexicon, seed, summary, **options)
        if cur is not None:
            out.append(cur)
    out.sort(key=lambda r: r.image_id)
    return out, summary
