"""Curation of anticipation labels from active-object and action-segment annotations.

The procedure turns raw per-frame object boxes plus action segments into
anticipation records:

1. boxes of the same noun (and same track hint, when hints are present)
   within ``gap_frames`` of each other merge into a track;
2. a track holding two boxes of its class at the same timestamp is
   ambiguous and dropped;
3. each surviving track is matched to the nearest future action segment
   with the same noun (smallest segment start strictly after the track's
   first frame);
4. track frames at or after the matched segment start are removed, so
   every kept frame precedes the action;
5. each kept frame becomes one record with ttc = segment start - frame
   time and the segment's verb.

Unmatched tracks are dropped. All drops are silent but counted in the
returned report.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import StaError
from .records import Box, GroundTruth, StaRecord, check_box


@dataclass(frozen=True)
class ObjectBoxAnn:
    """One active-object box observed at a frame."""

    frame_time: float
    box: Box
    noun_id: int
    track_hint: str | None = None


@dataclass(frozen=True)
class ActionSegment:
    start: float
    end: float
    noun_id: int
    verb_id: int


@dataclass(frozen=True)
class EpicSourceAnnotations:
    video_id: str
    duration: float
    image_size: tuple[int, int]
    active_object_boxes: tuple[ObjectBoxAnn, ...]
    action_segments: tuple[ActionSegment, ...]


def validate_source(src: EpicSourceAnnotations) -> EpicSourceAnnotations:
    for seg in src.action_segments:
        if not seg.start < seg.end:
            raise StaError(f"segment ({seg.start}, {seg.end}) must satisfy start < end")
    for ann in src.active_object_boxes:
        check_box(ann.box)
        if not 0.0 <= ann.frame_time <= src.duration:
            raise StaError(f"box frame time {ann.frame_time} outside video duration {src.duration}")
    return src


@dataclass
class CurationReport:
    n_boxes: int = 0
    n_tracks: int = 0
    n_tracks_dropped_ambiguous: int = 0
    n_tracks_dropped_unmatched: int = 0
    n_frames_dropped_overlap: int = 0
    n_records: int = 0


@dataclass
class CurationResult:
    records: list[StaRecord]
    report: CurationReport


def _split_into_tracks(
    boxes: list[ObjectBoxAnn], gap_frames: int, fps: float
) -> list[list[ObjectBoxAnn]]:
    """Split a same-noun, same-hint box list into gap-limited tracks."""
    ordered = sorted(boxes, key=lambda b: b.frame_time)
    tracks: list[list[ObjectBoxAnn]] = []
    current: list[ObjectBoxAnn] = []
    for ann in ordered:
        if current and (ann.frame_time - current[-1].frame_time) * fps > gap_frames:
            tracks.append(current)
            current = []
        current.append(ann)
    if current:
        tracks.append(current)
    return tracks


def curate_epic(
    src: EpicSourceAnnotations,
    gap_frames: int = 30,
    fps: float = 30.0,
    clip_seconds: float = 2.0,
) -> CurationResult:
    """Run the full curation pipeline; see the module docstring for the rules."""
    validate_source(src)
    report = CurationReport(n_boxes=len(src.active_object_boxes))

    groups: dict[tuple[int, str], list[ObjectBoxAnn]] = {}
    for ann in src.active_object_boxes:
        groups.setdefault((ann.noun_id, ann.track_hint or ""), []).append(ann)

    records: list[StaRecord] = []
    track_index = 0
    for key in sorted(groups):
        noun_id = key[0]
        for track in _split_into_tracks(groups[key], gap_frames, fps):
            report.n_tracks += 1
            track_id = track_index
            track_index += 1

            times = [ann.frame_time for ann in track]
            if len(set(times)) != len(times):
                report.n_tracks_dropped_ambiguous += 1
                continue

            first_time = times[0]
            candidates = [
                seg
                for seg in src.action_segments
                if seg.noun_id == noun_id and seg.start > first_time
            ]
            if not candidates:
                report.n_tracks_dropped_unmatched += 1
                continue
            segment = min(candidates, key=lambda seg: (seg.start, seg.end, seg.verb_id))

            kept = [ann for ann in track if ann.frame_time < segment.start]
            report.n_frames_dropped_overlap += len(track) - len(kept)
            for frame_idx, ann in enumerate(kept):
                ttc = segment.start - ann.frame_time
                records.append(
                    StaRecord(
                        record_id=f"{src.video_id}-t{track_id:03d}-f{frame_idx:03d}",
                        frame_time=ann.frame_time,
                        clip_span=(max(0.0, ann.frame_time - clip_seconds), ann.frame_time),
                        image_size=src.image_size,
                        gts=(
                            GroundTruth(
                                box=ann.box,
                                noun_id=noun_id,
                                verb_id=segment.verb_id,
                                ttc=ttc,
                            ),
                        ),
                    )
                )
    report.n_records = len(records)
    return CurationResult(records=records, report=report)


# ---------------------------------------------------------------------------
# JSON source format for the CLI


def source_to_json(src: EpicSourceAnnotations) -> str:
    payload = {
        "video_id": src.video_id,
        "duration": src.duration,
        "image_size": list(src.image_size),
        "active_object_boxes": [asdict(a) for a in src.active_object_boxes],
        "action_segments": [asdict(s) for s in src.action_segments],
    }
    return json.dumps(payload, sort_keys=True, indent=2)


def source_from_json(path: str | Path) -> EpicSourceAnnotations:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return EpicSourceAnnotations(
        video_id=str(payload["video_id"]),
        duration=float(payload["duration"]),
        image_size=tuple(int(v) for v in payload["image_size"]),
        active_object_boxes=tuple(
            ObjectBoxAnn(
                frame_time=float(a["frame_time"]),
                box=tuple(float(v) for v in a["box"]),
                noun_id=int(a["noun_id"]),
                track_hint=a.get("track_hint"),
            )
            for a in payload["active_object_boxes"]
        ),
        action_segments=tuple(
            ActionSegment(
                start=float(s["start"]),
                end=float(s["end"]),
                noun_id=int(s["noun_id"]),
                verb_id=int(s["verb_id"]),
            )
            for s in payload["action_segments"]
        ),
    )
