"""Annotation and prediction records plus the line-delimited manifest formats.

Boxes are always stored normalized to [0, 1] in (x1, y1, x2, y2) order;
pixel coordinates are a view obtained via :func:`box_to_pixels`.

File formats (one JSON object per line, header line first):

* ``sta-manifest/1`` — ground-truth records. Header
  ``{"schema": "sta-manifest/1", "n_nouns": N, "n_verbs": V}``, then one
  line per record with ``record_id``, ``frame_time``, ``clip_span``,
  ``image_size``, optional ``clip_path`` and a ``gts`` list of
  ``{box, noun_id, verb_id, ttc}``.
* ``sta-pred/1`` — prediction dumps. Same header shape, then one line per
  image: ``{"record_id": ..., "predictions": [{box, noun_id, verb_id,
  ttc, score}, ...]}`` holding the top-K tuples, score-sorted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ClipOrder, InvalidBox, NegativeTtc, SchemaError, StaError

Box = tuple[float, float, float, float]

MANIFEST_SCHEMA = "sta-manifest/1"
PREDICTIONS_SCHEMA = "sta-pred/1"


def check_box(box: Sequence[float]) -> Box:
    """Validate a normalized (x1, y1, x2, y2) box and return it as a tuple."""
    if len(box) != 4:
        raise InvalidBox(f"box must have 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x1 < x2 and y1 < y2):
        raise InvalidBox(f"degenerate box {box}: need x1 < x2 and y1 < y2")
    if min(x1, y1, x2, y2) < 0.0 or max(x1, y1, x2, y2) > 1.0:
        raise InvalidBox(f"box {box} outside the normalized [0, 1] range")
    return (x1, y1, x2, y2)


def box_to_pixels(box: Box, image_size: tuple[int, int]) -> tuple[float, float, float, float]:
    h, w = image_size
    return (box[0] * w, box[1] * h, box[2] * w, box[3] * h)


@dataclass(frozen=True)
class GroundTruth:
    """One annotated future interaction: box, noun, verb, time-to-contact."""

    box: Box
    noun_id: int
    verb_id: int
    ttc: float


@dataclass(frozen=True)
class StaRecord:
    """One anticipation instance: the observed frame plus its clip window.

    ``gts`` may be empty only for unlabeled inference inputs.
    """

    record_id: str
    frame_time: float
    clip_span: tuple[float, float]
    image_size: tuple[int, int]
    gts: tuple[GroundTruth, ...] = ()
    clip_path: str | None = None


def validate_record(record: StaRecord) -> StaRecord:
    """Check all record invariants; return the record unchanged if they hold.

    Raises :class:`InvalidBox`, :class:`NegativeTtc` or :class:`ClipOrder`.
    """
    if record.frame_time < 0.0:
        raise ClipOrder(f"frame time {record.frame_time} must be >= 0")
    t_start, t_end = record.clip_span
    if not t_start <= t_end:
        raise ClipOrder(f"clip span {record.clip_span} is not ordered")
    if t_end != record.frame_time:
        raise ClipOrder(
            f"clip must end at the observed frame: span ends {t_end}, frame at {record.frame_time}"
        )
    h, w = record.image_size
    if h <= 0 or w <= 0:
        raise StaError(f"image size {record.image_size} must be positive")
    for gt in record.gts:
        check_box(gt.box)
        if gt.ttc <= 0.0:
            raise NegativeTtc(f"ttc {gt.ttc} must be strictly positive")
    return record


@dataclass
class StaPrediction:
    """One predicted interaction tuple.

    ``noun_probs`` / ``verb_probs`` are the full per-class probability
    vectors when the prediction comes from the model head; predictions
    re-read from a ``sta-pred/1`` dump carry only the argmax ids and keep
    the vectors as ``None``.
    """

    box: Box
    ttc: float
    score: float
    noun_id: int
    verb_id: int
    noun_probs: np.ndarray | None = None
    verb_probs: np.ndarray | None = None

    @classmethod
    def from_probs(
        cls,
        box: Box,
        noun_probs: np.ndarray,
        verb_probs: np.ndarray,
        ttc: float,
    ) -> "StaPrediction":
        """Build a prediction whose score is the product of the argmax probabilities."""
        noun_probs = np.asarray(noun_probs, dtype=np.float64)
        verb_probs = np.asarray(verb_probs, dtype=np.float64)
        noun_id = int(np.argmax(noun_probs))
        verb_id = int(np.argmax(verb_probs))
        score = float(noun_probs[noun_id] * verb_probs[verb_id])
        return cls(
            box=tuple(float(v) for v in box),
            ttc=float(ttc),
            score=score,
            noun_id=noun_id,
            verb_id=verb_id,
            noun_probs=noun_probs,
            verb_probs=verb_probs,
        )


@dataclass(frozen=True)
class Taxonomy:
    """Noun and verb category names; sizes drive every class-indexed vector."""

    noun_names: tuple[str, ...]
    verb_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.noun_names)) != len(self.noun_names):
            raise StaError("noun names must be unique")
        if len(set(self.verb_names)) != len(self.verb_names):
            raise StaError("verb names must be unique")

    @property
    def n_nouns(self) -> int:
        return len(self.noun_names)

    @property
    def n_verbs(self) -> int:
        return len(self.verb_names)

    def content_hash(self) -> bytes:
        digest = hashlib.sha256()
        for name in self.noun_names:
            digest.update(b"n:" + name.encode("utf-8"))
        for name in self.verb_names:
            digest.update(b"v:" + name.encode("utf-8"))
        return digest.digest()

    @classmethod
    def generic(cls, n_nouns: int, n_verbs: int) -> "Taxonomy":
        return cls(
            noun_names=tuple(f"noun_{i:03d}" for i in range(n_nouns)),
            verb_names=tuple(f"verb_{i:03d}" for i in range(n_verbs)),
        )

    @classmethod
    def ego4d_v1(cls) -> "Taxonomy":
        return cls.generic(87, 74)

    @classmethod
    def ego4d_v2(cls) -> "Taxonomy":
        return cls.generic(128, 81)

    @classmethod
    def epic_curated(cls) -> "Taxonomy":
        return cls.generic(104, 51)


# ---------------------------------------------------------------------------
# manifest I/O


def _record_to_json(record: StaRecord) -> dict:
    entry: dict = {
        "record_id": record.record_id,
        "frame_time": record.frame_time,
        "clip_span": list(record.clip_span),
        "image_size": list(record.image_size),
        "gts": [
            {
                "box": list(gt.box),
                "noun_id": gt.noun_id,
                "verb_id": gt.verb_id,
                "ttc": gt.ttc,
            }
            for gt in record.gts
        ],
    }
    if record.clip_path is not None:
        entry["clip_path"] = record.clip_path
    return entry


def _record_from_json(entry: dict) -> StaRecord:
    return StaRecord(
        record_id=str(entry["record_id"]),
        frame_time=float(entry["frame_time"]),
        clip_span=tuple(float(v) for v in entry["clip_span"]),
        image_size=tuple(int(v) for v in entry["image_size"]),
        gts=tuple(
            GroundTruth(
                box=tuple(float(v) for v in gt["box"]),
                noun_id=int(gt["noun_id"]),
                verb_id=int(gt["verb_id"]),
                ttc=float(gt["ttc"]),
            )
            for gt in entry.get("gts", [])
        ),
        clip_path=entry.get("clip_path"),
    )


def record_to_manifest_line(record: StaRecord) -> str:
    """Canonical single-line JSON encoding used by the golden-output tests."""
    return json.dumps(_record_to_json(record), sort_keys=True, separators=(",", ":"))


def write_manifest(path: str | Path, records: Iterable[StaRecord], taxonomy: Taxonomy) -> None:
    header = {
        "schema": MANIFEST_SCHEMA,
        "n_nouns": taxonomy.n_nouns,
        "n_verbs": taxonomy.n_verbs,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for record in records:
            fh.write(record_to_manifest_line(record) + "\n")


def read_manifest(path: str | Path) -> tuple[list[StaRecord], dict]:
    """Parse a ``sta-manifest/1`` file; returns (records, header)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise SchemaError(f"{path}: expected schema {MANIFEST_SCHEMA!r}, got {header.get('schema')!r}")
    records = [_record_from_json(json.loads(line)) for line in lines[1:]]
    return records, header


# ---------------------------------------------------------------------------
# prediction dump I/O


def write_predictions(
    path: str | Path,
    predictions: dict[str, list[StaPrediction]],
    taxonomy: Taxonomy,
    top_k: int | None = None,
) -> None:
    """Dump per-image predictions as ``sta-pred/1``, score-sorted, optionally truncated."""
    header = {
        "schema": PREDICTIONS_SCHEMA,
        "n_nouns": taxonomy.n_nouns,
        "n_verbs": taxonomy.n_verbs,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for record_id in predictions:
            preds = sorted(predictions[record_id], key=lambda p: -p.score)
            if top_k is not None:
                preds = preds[:top_k]
            entry = {
                "record_id": record_id,
                "predictions": [
                    {
                        "box": list(p.box),
                        "noun_id": p.noun_id,
                        "verb_id": p.verb_id,
                        "ttc": p.ttc,
                        "score": p.score,
                    }
                    for p in preds
                ],
            }
            fh.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")


def read_predictions(path: str | Path) -> tuple[dict[str, list[StaPrediction]], dict]:
    """Parse a ``sta-pred/1`` file; returns ({record_id: predictions}, header)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty prediction file")
    header = json.loads(lines[0])
    if header.get("schema") != PREDICTIONS_SCHEMA:
        raise SchemaError(
            f"{path}: expected schema {PREDICTIONS_SCHEMA!r}, got {header.get('schema')!r}"
        )
    out: dict[str, list[StaPrediction]] = {}
    for line in lines[1:]:
        entry = json.loads(line)
        out[str(entry["record_id"])] = [
            StaPrediction(
                box=tuple(float(v) for v in p["box"]),
                ttc=float(p["ttc"]),
                score=float(p["score"]),
                noun_id=int(p["noun_id"]),
                verb_id=int(p["verb_id"]),
            )
            for p in entry["predictions"]
        ]
    return out, header
