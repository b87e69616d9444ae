"""Curation pipeline tests.

The golden fixture holds 3 tracks and 2 segments. Hand enumeration of the
rules: the noun-0 track (frames 3.0/3.5/4.0/4.6 s) matches the nearest
future noun-0 segment starting at 4.5 s, loses its 4.6 s frame to
truncation, and emits three records with ttc 1.5/1.0/0.5 s and verb 3.
The noun-1 track carries two boxes at t=2.4 s and is dropped as
ambiguous; the noun-2 track has no same-noun segment and is dropped as
unmatched.
"""

from pathlib import Path

import pytest

from stakit.epic import (
    ActionSegment,
    EpicSourceAnnotations,
    ObjectBoxAnn,
    curate_epic,
    source_from_json,
)
from stakit.errors import StaError
from stakit.records import Taxonomy, write_manifest

DATA = Path(__file__).parent / "data"


def fixture_source() -> EpicSourceAnnotations:
    return source_from_json(DATA / "epic_source.json")


def test_golden_fixture_byte_exact(tmp_path):
    result = curate_epic(fixture_source())
    out = tmp_path / "curated.jsonl"
    write_manifest(out, result.records, Taxonomy.epic_curated())
    assert out.read_bytes() == (DATA / "epic_golden.jsonl").read_bytes()


def test_fixture_report_counts():
    report = curate_epic(fixture_source()).report
    assert report.n_boxes == 9
    assert report.n_tracks == 3
    assert report.n_tracks_dropped_ambiguous == 1
    assert report.n_tracks_dropped_unmatched == 1
    assert report.n_frames_dropped_overlap == 1
    assert report.n_records == 3


def test_ttc_is_distance_to_segment_start():
    records = curate_epic(fixture_source()).records
    for record in records:
        assert record.gts[0].ttc == pytest.approx(4.5 - record.frame_time)
        assert record.gts[0].ttc > 0


def test_track_without_segment_yields_no_records():
    src = EpicSourceAnnotations(
        video_id="v",
        duration=10.0,
        image_size=(64, 64),
        active_object_boxes=(
            ObjectBoxAnn(frame_time=1.0, box=(0.1, 0.1, 0.2, 0.2), noun_id=7),
        ),
        action_segments=(ActionSegment(start=5.0, end=6.0, noun_id=3, verb_id=0),),
    )
    result = curate_epic(src)
    assert result.records == []
    assert result.report.n_tracks_dropped_unmatched == 1


def test_gap_splits_tracks():
    # two boxes 2 s apart at 30 fps exceed a 30-frame gap: two tracks
    src = EpicSourceAnnotations(
        video_id="v",
        duration=10.0,
        image_size=(64, 64),
        active_object_boxes=(
            ObjectBoxAnn(frame_time=1.0, box=(0.1, 0.1, 0.2, 0.2), noun_id=0),
            ObjectBoxAnn(frame_time=3.0, box=(0.1, 0.1, 0.2, 0.2), noun_id=0),
        ),
        action_segments=(ActionSegment(start=4.0, end=5.0, noun_id=0, verb_id=0),),
    )
    result = curate_epic(src, gap_frames=30, fps=30.0)
    assert result.report.n_tracks == 2
    assert result.report.n_records == 2


def test_track_hints_are_respected():
    # same noun, same timestamps, different hints: two tracks, no ambiguity
    src = EpicSourceAnnotations(
        video_id="v",
        duration=10.0,
        image_size=(64, 64),
        active_object_boxes=(
            ObjectBoxAnn(frame_time=1.0, box=(0.1, 0.1, 0.2, 0.2), noun_id=0, track_hint="a"),
            ObjectBoxAnn(frame_time=1.0, box=(0.4, 0.4, 0.6, 0.6), noun_id=0, track_hint="b"),
        ),
        action_segments=(ActionSegment(start=2.0, end=3.0, noun_id=0, verb_id=1),),
    )
    report = curate_epic(src).report
    assert report.n_tracks == 2
    assert report.n_tracks_dropped_ambiguous == 0
    assert report.n_records == 2


def test_nearest_future_segment_wins():
    src = EpicSourceAnnotations(
        video_id="v",
        duration=20.0,
        image_size=(64, 64),
        active_object_boxes=(
            ObjectBoxAnn(frame_time=1.0, box=(0.1, 0.1, 0.2, 0.2), noun_id=0),
        ),
        action_segments=(
            ActionSegment(start=9.0, end=10.0, noun_id=0, verb_id=5),
            ActionSegment(start=3.0, end=4.0, noun_id=0, verb_id=2),
        ),
    )
    records = curate_epic(src).records
    assert len(records) == 1
    assert records[0].gts[0].verb_id == 2
    assert records[0].gts[0].ttc == pytest.approx(2.0)


def test_validation_rejects_bad_segment():
    src = EpicSourceAnnotations(
        video_id="v",
        duration=10.0,
        image_size=(64, 64),
        active_object_boxes=(),
        action_segments=(ActionSegment(start=5.0, end=5.0, noun_id=0, verb_id=0),),
    )
    with pytest.raises(StaError):
        curate_epic(src)


def test_idempotent_on_own_output():
    first = curate_epic(fixture_source())
    degenerate = EpicSourceAnnotations(
        video_id="vid",
        duration=20.0,
        image_size=(100, 100),
        active_object_boxes=tuple(
            ObjectBoxAnn(frame_time=r.frame_time, box=r.gts[0].box, noun_id=r.gts[0].noun_id)
            for r in first.records
        ),
        action_segments=fixture_source().action_segments,
    )
    second = curate_epic(degenerate)
    assert second.records == first.records
