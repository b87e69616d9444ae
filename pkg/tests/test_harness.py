"""Harness tests: pipeline composition, ablation isolation, training, checkpoints."""

import dataclasses

import numpy as np
import pytest
import torch

from stakit.affordance import knn_affordance, late_fuse
from stakit.errors import DivergenceDetected, InvalidConfig
from stakit.harness import (
    RunConfig,
    build_affordance_db,
    build_model,
    evaluate_model,
    forward_pipeline,
    load_checkpoint,
    save_checkpoint,
    train,
)
from stakit.hotspot import HotspotMap
from stakit.records import Taxonomy
from stakit.sta_head import pyramid_reference_anchors, score_predictions
from stakit.synthetic import SynthConfig, clip_signature, synth_dataset

TINY_DATA = SynthConfig(n_samples=8, n_nouns=4, n_environments=2, n_distractors=0, object_size=12)
TINY_RUN = RunConfig(steps=6, batch_size=4, n_nouns=4, warmup_steps=2)


@pytest.fixture(scope="module")
def tiny_pairs():
    return synth_dataset(TINY_DATA, 0)


def test_config_round_trip():
    cfg = RunConfig(dim=32, affordance="off", seed=3)
    clone = RunConfig.from_json(cfg.to_json())
    assert clone == cfg


def test_config_validation():
    with pytest.raises(InvalidConfig):
        RunConfig(temporal_pooling="conv").validate()
    with pytest.raises(InvalidConfig):
        RunConfig(dim=30, n_heads=4).validate()
    with pytest.raises(InvalidConfig):
        RunConfig(affordance="fixed", affordance_db=None).validate()
    with pytest.raises(InvalidConfig):
        RunConfig(hotspot_map="/nonexistent/map.pgm").validate()
    assert RunConfig().validate()


def test_pipeline_bare_head_matches_uniform_refinements(tiny_pairs):
    clip, _ = tiny_pairs[0]
    cfg = TINY_RUN
    model = build_model(cfg)
    bare = forward_pipeline(model, clip.clip, cfg)
    uniform = HotspotMap(grid=np.ones((8, 8)), mode="per_pixel")
    reweighted = forward_pipeline(model, clip.clip, cfg, hotspot=uniform)
    assert [p.score for p in bare] == pytest.approx([p.score for p in reweighted])
    assert [p.box for p in bare] == [p.box for p in reweighted]


def test_pipeline_prediction_count_bounded_by_queries(tiny_pairs):
    cfg = dataclasses.replace(TINY_RUN, n_queries=10, no_object_threshold=0.0)
    model = build_model(cfg)
    preds = forward_pipeline(model, tiny_pairs[0][0].clip, cfg)
    assert len(preds) <= 10


def test_pipeline_matches_manual_composition(tiny_pairs):
    clip, _ = tiny_pairs[0]
    cfg = TINY_RUN
    model = build_model(cfg)
    preds = forward_pipeline(model, clip.clip, cfg)

    clip_t = torch.as_tensor(clip.clip, dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        image_scales = model.image_encoder(clip_t[-1])
        video = model.video_encoder(clip_t)
        p3d = model.pooling(video, image_scales)
        from stakit.fusion import FeaturePyramid

        p2d = FeaturePyramid(list(image_scales))
        fused = model.pyramid_fusion(p2d, p3d)
        memory = model.encoder(fused)
        refs = pyramid_reference_anchors(fused)
        queries = model.selector(memory, refs)
        output = model.decoder(queries, memory, video.class_token, memory_centers=refs[:, :2])
    manual = score_predictions(output, mode=cfg.score_mode, no_object_threshold=cfg.no_object_threshold)
    manual = sorted(manual, key=lambda p: -p.score)
    assert len(manual) == len(preds)
    for a, b in zip(manual, preds):
        assert a.score == pytest.approx(b.score, abs=1e-6)
        assert a.box == pytest.approx(b.box, abs=1e-6)


@pytest.mark.filterwarnings("ignore::stakit.errors.MissingTextDescriptors")
def test_fixed_affordance_late_fusion_recomputes_scores(tiny_pairs):
    taxonomy = Taxonomy.generic(4, 3)
    db = build_affordance_db(tiny_pairs, taxonomy, p_link=0.98)
    cfg = dataclasses.replace(TINY_RUN, affordance="fixed", affordance_k=1)
    model = build_model(cfg)
    clip, _ = tiny_pairs[0]
    bare_cfg = dataclasses.replace(cfg, affordance="off")
    bare = forward_pipeline(model, clip.clip, bare_cfg)
    fused = forward_pipeline(model, clip.clip, cfg, affordance_db=db)
    assert len(bare) == len(fused)
    aff = knn_affordance(clip_signature(clip.clip), db, 1)
    bare_by_box = {p.box: p for p in bare}
    for pred in fused:
        base = bare_by_box[pred.box]
        noun_probs = late_fuse(aff.noun_probs, base.noun_probs / base.noun_probs.sum())
        verb_probs = late_fuse(aff.verb_probs, base.verb_probs / base.verb_probs.sum())
        assert pred.score == pytest.approx(float(noun_probs.max() * verb_probs.max()), abs=1e-9)


def test_learned_affordance_changes_logits_but_hotspot_does_not(tiny_pairs):
    taxonomy = Taxonomy.generic(4, 3)
    db = build_affordance_db(tiny_pairs, taxonomy, p_link=0.98)
    clip, _ = tiny_pairs[0]
    clip_t = torch.as_tensor(clip.clip, dtype=torch.float32)

    cfg_off = TINY_RUN
    cfg_learned = dataclasses.replace(TINY_RUN, affordance="learned")
    base = build_model(cfg_off)
    learned = build_model(cfg_learned, db)
    with torch.no_grad():
        out_off = base(clip_t[-1], clip_t)
        out_learned = learned(clip_t[-1], clip_t)
    # same seed: identical trunk weights, so the difference is exactly the injection
    assert not torch.allclose(out_off.noun_logits, out_learned.noun_logits)
    assert torch.allclose(out_off.boxes, out_learned.boxes, atol=1e-6)

    # hotspot path is outside the model: raw logits unaffected
    with torch.no_grad():
        again = base(clip_t[-1], clip_t)
    assert torch.equal(out_off.noun_logits, again.noun_logits)


def test_training_zero_lr_keeps_loss_constant(tiny_pairs):
    # full-batch steps so the loss is over the same data every step
    cfg = dataclasses.replace(TINY_RUN, lr=0.0, steps=4, batch_size=len(tiny_pairs))
    result = train(tiny_pairs, cfg)
    assert len(set(round(v, 10) for v in result.loss_curve)) == 1


def test_training_deterministic_given_seed(tiny_pairs):
    a = train(tiny_pairs, TINY_RUN)
    b = train(tiny_pairs, TINY_RUN)
    assert a.loss_curve == b.loss_curve
    different = train(tiny_pairs, dataclasses.replace(TINY_RUN, seed=9))
    assert a.loss_curve != different.loss_curve


def test_training_reduces_loss_quickly(tiny_pairs):
    cfg = dataclasses.replace(TINY_RUN, steps=40, batch_size=8)
    result = train(tiny_pairs, cfg)
    assert result.loss_curve[-1] < result.loss_curve[0]
    assert set(result.component_curves) >= {"bce_noun", "bce_verb", "box_l1", "giou", "ttc", "objectness"}


def test_training_divergence_detected(tiny_pairs):
    cfg = dataclasses.replace(TINY_RUN, lr=1e6, steps=30, grad_clip=0.0)
    with pytest.raises(DivergenceDetected):
        train(tiny_pairs, cfg)


def test_checkpoint_round_trip_bit_identical(tiny_pairs, tmp_path):
    cfg = TINY_RUN
    result = train(tiny_pairs, cfg)
    path = tmp_path / "model.stk"
    save_checkpoint(result.model, cfg, path)
    restored, cfg_loaded = load_checkpoint(path)
    assert cfg_loaded == cfg
    clip = tiny_pairs[0][0].clip
    a = forward_pipeline(result.model, clip, cfg)
    b = forward_pipeline(restored, clip, cfg)
    assert len(a) == len(b)
    for pa, pb in zip(a, b):
        assert pa.score == pb.score
        assert pa.box == pb.box
        assert pa.ttc == pb.ttc


def test_evaluate_model_returns_all_modes(tiny_pairs):
    model = build_model(TINY_RUN)
    scores = evaluate_model(model, tiny_pairs[:4], TINY_RUN)
    assert set(scores) == {"noun", "noun_verb", "noun_ttc", "all"}


def test_mean_pooling_ablation_runs(tiny_pairs):
    cfg = dataclasses.replace(TINY_RUN, temporal_pooling="mean", steps=3)
    result = train(tiny_pairs, cfg)
    assert len(result.loss_curve) == 3


def test_dual_attention_ablation_runs(tiny_pairs):
    cfg = dataclasses.replace(TINY_RUN, dual_attention=True, steps=3)
    result = train(tiny_pairs, cfg)
    assert len(result.loss_curve) == 3
    model = result.model
    preds = forward_pipeline(model, tiny_pairs[0][0].clip, cfg)
    assert isinstance(preds, list)


def test_single_head_pooling_ablation_runs(tiny_pairs):
    cfg = dataclasses.replace(TINY_RUN, pooling_heads=1, per_scale_pooling=False, steps=3)
    result = train(tiny_pairs, cfg)
    assert len(result.loss_curve) == 3
