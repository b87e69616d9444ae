import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stakit.errors import InvalidConfig
from stakit.records import Taxonomy, read_manifest, validate_record
from stakit.synthetic import (
    SynthConfig,
    clip_signature,
    load_clip,
    synth_dataset,
    verb_for_speed,
    write_synth_dataset,
)

SMALL = SynthConfig(n_samples=12)


def test_same_seed_byte_identical():
    a = synth_dataset(SMALL, seed=0)
    b = synth_dataset(SMALL, seed=0)
    assert len(a) == len(b)
    for (clip_a, rec_a), (clip_b, rec_b) in zip(a, b):
        assert clip_a.clip.tobytes() == clip_b.clip.tobytes()
        assert rec_a == rec_b


def test_different_seeds_differ():
    a = synth_dataset(SMALL, seed=0)
    b = synth_dataset(SMALL, seed=1)
    assert any(ca.clip.tobytes() != cb.clip.tobytes() for (ca, _), (cb, _) in zip(a, b))


def test_noun_ids_in_range():
    cfg = SynthConfig(n_samples=40, n_nouns=5, n_environments=2)
    for _, record in synth_dataset(cfg, seed=3):
        assert 0 <= record.gts[0].noun_id < 5
        assert 0 <= record.gts[0].verb_id < cfg.n_verbs


def test_ttc_equals_distance_over_speed():
    for clip, record in synth_dataset(SMALL, seed=7):
        distance = float(np.linalg.norm(clip.hand_centers[-1] - np.array(clip.target_center)))
        assert record.gts[0].ttc == pytest.approx(distance / clip.hand_speed, rel=1e-9)


def test_records_validate_and_pixels_in_range():
    for clip, record in synth_dataset(SMALL, seed=5):
        validate_record(record)
        assert clip.clip.dtype == np.float32
        assert clip.clip.min() >= 0.0 and clip.clip.max() <= 1.0
        assert clip.clip.shape == (SMALL.clip_len, SMALL.image_size, SMALL.image_size, 3)


def test_label_coverage_at_ten_times_class_count():
    cfg = SynthConfig(n_samples=10 * max(SMALL.n_nouns, SMALL.n_verbs))
    pairs = synth_dataset(cfg, seed=11)
    nouns = {r.gts[0].noun_id for _, r in pairs}
    verbs = {r.gts[0].verb_id for _, r in pairs}
    assert nouns == set(range(cfg.n_nouns))
    assert verbs == set(range(cfg.n_verbs))


def test_verb_is_speed_bin():
    cfg = SynthConfig()
    lo, hi = cfg.speed_range
    assert verb_for_speed(lo, cfg) == 0
    assert verb_for_speed(hi, cfg) == cfg.n_verbs - 1
    for clip, record in synth_dataset(SMALL, seed=2):
        assert record.gts[0].verb_id == verb_for_speed(clip.hand_speed, cfg)


def test_invalid_configs_rejected():
    with pytest.raises(InvalidConfig):
        synth_dataset(SynthConfig(n_nouns=0), seed=0)
    with pytest.raises(InvalidConfig):
        synth_dataset(SynthConfig(n_environments=9, n_nouns=4), seed=0)
    with pytest.raises(InvalidConfig):
        synth_dataset(SynthConfig(clip_len=0), seed=0)
    with pytest.raises(InvalidConfig):
        synth_dataset(SynthConfig(speed_range=(5.0, 2.0)), seed=0)


@settings(max_examples=20, deadline=None)
@given(
    n_nouns=st.integers(min_value=1, max_value=8),
    n_verbs=st.integers(min_value=1, max_value=5),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_label_ranges_hold_for_random_configs(n_nouns, n_verbs, seed):
    cfg = SynthConfig(n_samples=4, n_nouns=n_nouns, n_verbs=n_verbs, n_environments=1)
    for _, record in synth_dataset(cfg, seed=seed):
        gt = record.gts[0]
        assert 0 <= gt.noun_id < n_nouns
        assert 0 <= gt.verb_id < n_verbs
        assert gt.ttc > 0


def test_write_and_reload_dataset(tmp_path):
    pairs = synth_dataset(SMALL, seed=0)
    manifest = write_synth_dataset(tmp_path, pairs, Taxonomy.generic(SMALL.n_nouns, SMALL.n_verbs))
    records, header = read_manifest(manifest)
    assert header["n_nouns"] == SMALL.n_nouns
    assert len(records) == len(pairs)
    clip = load_clip(manifest, records[0])
    assert clip.tobytes() == pairs[0][0].clip.tobytes()


def test_clip_signature_separates_environments():
    cfg = SynthConfig(n_samples=60, n_environments=3)
    pairs = synth_dataset(cfg, seed=0)
    sigs = {}
    for clip, _ in pairs:
        sigs.setdefault(clip.environment_id, []).append(clip_signature(clip.clip))

    def mean_cos(a, b):
        vals = [
            float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
            for x in a
            for y in b
        ]
        return sum(vals) / len(vals)

    envs = sorted(sigs)
    within = min(mean_cos(sigs[e], sigs[e]) for e in envs)
    across = max(mean_cos(sigs[a], sigs[b]) for a in envs for b in envs if a != b)
    assert within > across
