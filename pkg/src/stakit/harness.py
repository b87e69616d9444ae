"""Run configuration, the assembled model, training loop, and end-to-end pipeline.

The staged forward composition is: encode image (multi-scale) and clip,
temporally pool the video tokens per scale (optionally through dual
attention at the finest scale), sum-fuse the two pyramids, refine with
the sequence encoder, select and decode object queries, score. Learned
affordances inject log-odds into the class logits inside the model;
fixed affordances late-fuse probabilities and hotspot maps re-weight
confidence scores outside of it, so toggling those paths cannot change
the raw head logits.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import tensorio
from .affordance import (
    AffordanceDB,
    LearnedAffordance,
    ZoneFrame,
    build_zones,
    knn_affordance,
    late_fuse,
    logit_inject,
)
from .encoders import ToyMultiScaleImageEncoder, ToyVideoEncoder
from .errors import DivergenceDetected, InvalidConfig, StaError
from .fusion import DualAttention, FeaturePyramid, PyramidFusion, TemporalPyramidPooling, fuse_class_tokens
from .records import StaPrediction, StaRecord, Taxonomy
from .hotspot import reweight
from .sta_head import (
    FusedEncoder,
    HeadOutput,
    LossWeights,
    MatchResult,
    QuerySelector,
    StaDecoder,
    hungarian_match,
    match_cost,
    objectness_targets,
    pyramid_reference_anchors,
    score_predictions,
    sta_loss,
)
from .synthetic import SyntheticClip, clip_signature


def _clip_array(clip) -> np.ndarray:
    """Accept either a SyntheticClip or a raw [t, H, W, C] array."""
    return clip.clip if isinstance(clip, SyntheticClip) else np.asarray(clip)


@dataclass
class RunConfig:
    """Every knob of a run; serialized verbatim into reports and checkpoints."""

    # model dims
    dim: int = 64
    n_heads: int = 4
    n_scales: int = 2
    patch: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 2
    n_queries: int = 25
    # fusion options
    temporal_pooling: str = "attention"  # "attention" | "mean"
    pooling_heads: int = 4  # 1 = single-head pooling
    per_scale_pooling: bool = True
    dual_attention: bool = False
    # affordance options
    affordance: str = "off"  # "off" | "fixed" | "learned"
    affordance_k: int = 2
    affordance_db: str | None = None
    affordance_attn_dim: int = 32
    # hotspot
    hotspot_map: str | None = None
    # data/task dims
    image_size: int = 32
    clip_len: int = 4
    channels: int = 3
    n_nouns: int = 4
    n_verbs: int = 3
    # optimizer
    lr: float = 3e-3
    warmup_steps: int = 20
    steps: int = 300
    batch_size: int = 32
    weight_decay: float = 1e-6
    grad_clip: float = 0.5
    final_lr_fraction: float = 0.1  # linear decay floor after warmup
    seed: int = 0
    # loss / scoring
    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_ttc: float = 1.0
    pos_weight: float = 50.0
    w_objectness: float = 1.0  # auxiliary proposal loss on query selection
    no_object_threshold: float = 0.05
    score_mode: str = "argmax"  # "argmax" | "pairs"

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            w_class=self.w_class,
            w_l1=self.w_l1,
            w_giou=self.w_giou,
            w_ttc=self.w_ttc,
            pos_weight=self.pos_weight,
        )

    def taxonomy(self) -> Taxonomy:
        return Taxonomy.generic(self.n_nouns, self.n_verbs)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    def validate(self) -> "RunConfig":
        if self.temporal_pooling not in ("attention", "mean"):
            raise InvalidConfig(f"unknown temporal pooling {self.temporal_pooling!r}")
        if self.affordance not in ("off", "fixed", "learned"):
            raise InvalidConfig(f"unknown affordance mode {self.affordance!r}")
        if self.dim % self.n_heads or self.dim % self.pooling_heads:
            raise InvalidConfig("dim must be divisible by every head count")
        stride = self.patch * 2 ** (self.n_scales - 1)
        if self.image_size % stride:
            raise InvalidConfig(f"image size {self.image_size} not divisible by coarsest stride {stride}")
        for path_field in (self.affordance_db, self.hotspot_map):
            if path_field is not None and not Path(path_field).exists():
                raise InvalidConfig(f"referenced file does not exist: {path_field}")
        if self.affordance != "off" and self.affordance_db is None:
            raise InvalidConfig("affordance mode requires affordance_db")
        return self


class StaModel(nn.Module):
    """Full anticipation model assembled from the encoder/fusion/head modules."""

    def __init__(self, cfg: RunConfig, affordance_db: AffordanceDB | None = None):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ToyMultiScaleImageEncoder(
            cfg.patch, cfg.dim, cfg.n_scales, cfg.channels, cfg.n_heads
        )
        self.video_encoder = ToyVideoEncoder(cfg.patch, cfg.dim, cfg.channels, cfg.n_heads)
        self.pooling = TemporalPyramidPooling(
            cfg.dim,
            cfg.n_scales,
            n_heads=cfg.pooling_heads,
            pooling=cfg.temporal_pooling,
            per_scale=cfg.per_scale_pooling,
        )
        self.dual = None
        if cfg.dual_attention:
            n_tokens = (cfg.image_size // cfg.patch) ** 2
            self.dual = DualAttention(cfg.dim, n_tokens, n_tokens, n_heads=cfg.n_heads)
        self.pyramid_fusion = PyramidFusion(cfg.dim, cfg.n_scales)
        self.encoder = FusedEncoder(cfg.dim, cfg.n_heads, depth=cfg.encoder_layers)
        self.selector = QuerySelector(cfg.dim, cfg.n_queries)
        self.decoder = StaDecoder(cfg.dim, cfg.n_nouns, cfg.n_verbs, cfg.n_heads, depth=cfg.decoder_layers)
        self.learned_affordance = None
        if cfg.affordance == "learned":
            if affordance_db is None:
                raise StaError("learned affordance mode needs a zone database")
            self.learned_affordance = LearnedAffordance(affordance_db, cfg.dim, cfg.affordance_attn_dim)

    def forward(self, image: Tensor, clip: Tensor, return_extras: bool = False):
        image_scales = self.image_encoder(image)
        video = self.video_encoder(clip)
        p3d = self.pooling(video, image_scales)

        grids_2d = list(image_scales)
        if self.dual is not None:
            refined_img, refined_vid = self.dual(grids_2d[0], p3d.scales[0])
            grids_2d[0] = refined_img
            p3d = FeaturePyramid([refined_vid] + p3d.scales[1:])
        p2d = FeaturePyramid(grids_2d)

        fused = self.pyramid_fusion(p2d, p3d)
        memory = self.encoder(fused)
        references = pyramid_reference_anchors(fused)
        queries, objectness = self.selector(memory, references, return_scores=True)
        output = self.decoder(queries, memory, video.class_token, memory_centers=references[:, :2])

        if self.learned_affordance is not None:
            aff_nouns, aff_verbs = self.learned_affordance(video.class_token)
            output = HeadOutput(
                boxes=output.boxes,
                noun_logits=logit_inject(aff_nouns, output.noun_logits),
                verb_logits=logit_inject(aff_verbs, output.verb_logits),
                ttc=output.ttc,
            )
        if return_extras:
            extras = {
                "video_class_token": video.class_token,
                "fused_class_token": fuse_class_tokens(
                    grids_2d[0].class_token, p3d.scales[0].class_token
                ),
                "anchors": torch.stack([q.anchor for q in queries]),
                "objectness_logits": objectness,
                "reference_anchors": references,
            }
            return output, extras
        return output


def build_model(cfg: RunConfig, affordance_db: AffordanceDB | None = None) -> StaModel:
    """Construct a model with seed-deterministic initialization."""
    torch.manual_seed(cfg.seed)
    return StaModel(cfg, affordance_db)


# ---------------------------------------------------------------------------
# inference pipeline


def forward_pipeline(
    model: StaModel,
    clip: np.ndarray | Tensor,
    cfg: RunConfig,
    affordance_db: AffordanceDB | None = None,
    hotspot=None,
) -> list[StaPrediction]:
    """Run the staged composition on one clip and return scored predictions.

    The observed frame is the clip's last frame. Fixed affordances
    late-fuse the class distributions (scores are recomputed from the fused
    argmax), and a hotspot map re-weights the final confidence scores.
    """
    clip_t = torch.as_tensor(np.asarray(clip), dtype=torch.float32)
    image = clip_t[-1]
    model.eval()
    with torch.no_grad():
        output = model(image, clip_t)
    preds = score_predictions(
        output, mode=cfg.score_mode, no_object_threshold=cfg.no_object_threshold
    )

    if cfg.affordance == "fixed":
        if affordance_db is None:
            raise StaError("fixed affordance mode needs a zone database")
        signature = clip_signature(np.asarray(clip))
        aff = knn_affordance(signature, affordance_db, cfg.affordance_k)
        fused_preds = []
        for pred in preds:
            if pred.noun_probs is None or pred.verb_probs is None:
                raise StaError("late fusion needs full probability vectors")
            noun_probs = late_fuse(aff.noun_probs, pred.noun_probs / max(pred.noun_probs.sum(), 1e-12))
            verb_probs = late_fuse(aff.verb_probs, pred.verb_probs / max(pred.verb_probs.sum(), 1e-12))
            fused_preds.append(StaPrediction.from_probs(pred.box, noun_probs, verb_probs, pred.ttc))
        preds = fused_preds

    if hotspot is not None:
        preds = reweight(preds, hotspot)
    return sorted(preds, key=lambda p: -p.score)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: StaModel
    loss_curve: list[float]
    component_curves: dict[str, list[float]] = field(default_factory=dict)


def train(dataset, cfg: RunConfig, affordance_db: AffordanceDB | None = None) -> TrainResult:
    """Seeded training over (clip, record) pairs.

    Uses AdamW with a linear learning-rate warm-up. Raises
    :class:`DivergenceDetected` on a non-finite loss.
    """
    if not dataset:
        raise StaError("training needs a nonempty dataset")
    torch.set_num_threads(1)  # tiny tensors: thread fan-out costs more than it saves
    model = build_model(cfg, affordance_db)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed + 1))
    weights = cfg.loss_weights()

    clips = [torch.as_tensor(_clip_array(clip), dtype=torch.float32) for clip, _ in dataset]
    records: list[StaRecord] = [record for _, record in dataset]

    loss_curve: list[float] = []
    component_curves: dict[str, list[float]] = {}
    for step in range(cfg.steps):
        warm = min(1.0, (step + 1) / max(cfg.warmup_steps, 1))
        progress = step / max(cfg.steps - 1, 1)
        decay = 1.0 - (1.0 - cfg.final_lr_fraction) * progress
        for group in optimizer.param_groups:
            group["lr"] = cfg.lr * warm * decay

        if cfg.batch_size >= len(dataset):
            batch = np.arange(len(dataset))
        else:
            batch = rng.integers(0, len(dataset), size=cfg.batch_size)
        optimizer.zero_grad()
        total = torch.zeros((), dtype=torch.float32)
        step_components: dict[str, float] = {}
        for index in batch:
            clip_t = clips[index]
            output, extras = model(clip_t[-1], clip_t, return_extras=True)
            gts = list(records[index].gts)
            if gts:
                cost = match_cost(output, gts, weights)
                if not np.isfinite(cost).all():
                    raise DivergenceDetected(f"matching cost became non-finite at step {step}")
                match = hungarian_match(cost)
            else:
                match = MatchResult(pairs=[], total_cost=0.0)
            loss, components = sta_loss(output, gts, match, weights)
            if cfg.w_objectness > 0.0:
                targets = objectness_targets(extras["reference_anchors"].detach(), gts)
                aux = nn.functional.binary_cross_entropy_with_logits(
                    extras["objectness_logits"],
                    targets,
                    pos_weight=torch.tensor(10.0),
                )
                loss = loss + cfg.w_objectness * aux
                components = dict(components, objectness=float(aux.detach()))
            total = total + loss
            for key, value in components.items():
                step_components[key] = step_components.get(key, 0.0) + value / len(batch)
        total = total / len(batch)
        if not torch.isfinite(total):
            raise DivergenceDetected(f"loss became {float(total)} at step {step}")
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        loss_curve.append(float(total.detach()))
        for key, value in step_components.items():
            component_curves.setdefault(key, []).append(value)
    return TrainResult(model=model, loss_curve=loss_curve, component_curves=component_curves)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(model: StaModel, cfg: RunConfig, path: str | Path) -> None:
    tensorio.save_module(path, model, meta={"run_config": dataclasses.asdict(cfg)})


def load_checkpoint(path: str | Path, affordance_db: AffordanceDB | None = None) -> tuple[StaModel, RunConfig]:
    tensors, meta = tensorio.load_tensors(path)
    cfg = RunConfig(**meta["run_config"])
    model = build_model(cfg, affordance_db)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model, cfg


# ---------------------------------------------------------------------------
# affordance database construction from a dataset


def build_affordance_db(
    dataset,
    taxonomy: Taxonomy,
    p_link: float = 0.98,
    temporal_gap: int = 1,
    inlier_threshold: int = 10,
) -> AffordanceDB:
    """Build a zone database from (clip, record) pairs using clip signatures.

    Samples are treated as temporally unrelated (indices spaced beyond the
    temporal gap) so zones form purely from visual similarity.
    """
    frames = []
    for index, (clip, record) in enumerate(dataset):
        arr = _clip_array(clip)
        frames.append(
            ZoneFrame(
                frame_index=index * max(temporal_gap, 1) * 1000,
                clip_id=record.record_id,
                nouns=frozenset(gt.noun_id for gt in record.gts),
                verbs=frozenset(gt.verb_id for gt in record.gts),
                visual_embedding=clip_signature(arr),
            )
        )
    zones = build_zones(
        frames,
        temporal_gap=temporal_gap,
        inlier_threshold=inlier_threshold,
        p_link=p_link,
        n_nouns=taxonomy.n_nouns,
        n_verbs=taxonomy.n_verbs,
    )
    embed_dim = frames[0].visual_embedding.shape[0]
    return AffordanceDB(taxonomy=taxonomy, zones=tuple(zones), embed_dim=embed_dim)


# ---------------------------------------------------------------------------
# evaluation convenience


def evaluate_model(
    model: StaModel,
    dataset,
    cfg: RunConfig,
    affordance_db: AffordanceDB | None = None,
    hotspot=None,
    top_k: int = 5,
) -> dict[str, float | None]:
    """Top-K mAP of a model over (clip, record) pairs, all four modes."""
    from .evaluation import MAP_MODES, MatchCriteria, top5_map

    preds_per_image = []
    gts_per_image = []
    for clip, record in dataset:
        preds_per_image.append(forward_pipeline(model, _clip_array(clip), cfg, affordance_db, hotspot))
        gts_per_image.append(list(record.gts))
    scores: dict[str, float | None] = {}
    for name, mode in MAP_MODES.items():
        criteria = MatchCriteria(mode=mode)
        scores[name] = top5_map(preds_per_image, gts_per_image, criteria, top_k=top_k)
    return scores
