"""Set-prediction head: encoder refinement, query selection, decoding, matching, loss.

The head follows the detection-transformer recipe at desk scale: the fused
pyramid is flattened into a token sequence, refined by self-attention,
and the top-M tokens by a learned objectness score seed the positional
part (4D anchor boxes) of otherwise static learned queries. A stack of
decoder layers alternates query self-attention with cross-attention to
the encoded sequence; small MLPs regress boxes (as residuals on the
anchors through an inverse-sigmoid parameterization), per-class noun and
verb logits, and time-to-contact from the decoded query concatenated
with the video class token.

Classification uses per-class sigmoids, so there is no softmax slot for
"no object": a query counts as empty when all its class probabilities
fall below a threshold, and unmatched queries are trained toward the
all-zero target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

from .attention import Mlp, Mlp3, MultiheadAttention, TransformerBlock, sinusoidal_embedding
from .errors import MTooLarge, ShapeMismatch, StaError
from .fusion import FeaturePyramid
from .records import GroundTruth, StaPrediction


# ---------------------------------------------------------------------------
# box utilities (torch, differentiable)


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def box_xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def box_iou_xyxy(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise IoU between [M, 4] and [G, 4] xyxy boxes -> [M, G]."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=1e-12)


def generalized_iou_xyxy(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise generalized IoU between [M, 4] and [G, 4] xyxy boxes -> [M, G]."""
    iou = box_iou_xyxy(a, b)
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = (wh[..., 0] * wh[..., 1]).clamp(min=1e-12)
    inter_lt = torch.max(a[:, None, :2], b[None, :, :2])
    inter_rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    inter = ((inter_rb - inter_lt).clamp(min=0)).prod(dim=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return iou - (hull - union) / hull


def inverse_sigmoid(x: Tensor, eps: float = 1e-6) -> Tensor:
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x) - torch.log1p(-x)


# ---------------------------------------------------------------------------
# data containers


@dataclass
class ObjectQuery:
    """Static learned content vector plus a dynamic 4D anchor box (cx, cy, w, h)."""

    content: Tensor  # [D]
    anchor: Tensor  # [4] in [0, 1]


@dataclass
class HeadOutput:
    """Per-query predictions before scoring."""

    boxes: Tensor  # [M, 4] cxcywh in [0, 1]
    noun_logits: Tensor  # [M, N_nouns]
    verb_logits: Tensor  # [M, N_verbs]
    ttc: Tensor  # [M]

    @property
    def n_queries(self) -> int:
        return self.boxes.shape[0]


@dataclass
class MatchResult:
    """Injective query-to-ground-truth assignment."""

    pairs: list[tuple[int, int]]
    total_cost: float


# ---------------------------------------------------------------------------
# modules


class FusedEncoder(nn.Module):
    """Flatten the fused pyramid, add fixed positional encoding, self-attend."""

    def __init__(self, dim: int, n_heads: int = 4, depth: int = 1):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, n_heads) for _ in range(depth))

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        seq = torch.cat([grid.tokens for grid in pyramid], dim=0)
        seq = seq + sinusoidal_embedding(seq.shape[0], seq.shape[1], device=seq.device, dtype=seq.dtype)
        for block in self.blocks:
            seq, _ = block(seq)
        return seq


def pyramid_reference_anchors(pyramid: FeaturePyramid, size_scale: float = 1.5) -> Tensor:
    """Per-token reference boxes for the flattened pyramid sequence.

    Each token proposes a box centered on its own grid cell with a width
    and height of ``size_scale`` cells, so anchor regression only has to
    learn residuals.
    """
    refs = []
    for grid in pyramid:
        ys = (torch.arange(grid.h_tok, dtype=torch.float64) + 0.5) / grid.h_tok
        xs = (torch.arange(grid.w_tok, dtype=torch.float64) + 0.5) / grid.w_tok
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        w = torch.full_like(cx, min(size_scale / grid.w_tok, 0.99))
        h = torch.full_like(cy, min(size_scale / grid.h_tok, 0.99))
        refs.append(torch.stack([cx, cy, w, h], dim=-1).reshape(-1, 4))
    device = pyramid.scales[0].tokens.device
    dtype = pyramid.scales[0].tokens.dtype
    return torch.cat(refs, dim=0).to(device=device, dtype=dtype)


class QuerySelector(nn.Module):
    """Mixed query selection: dynamic anchors from top-scored encoder tokens.

    Content vectors are static learned parameters; only the anchors are
    data-dependent. When per-token reference boxes are supplied, the
    anchor head regresses residuals on them in inverse-sigmoid space.
    """

    def __init__(self, dim: int, n_queries: int):
        super().__init__()
        self.n_queries = n_queries
        self.objectness = nn.Linear(dim, 1)
        self.anchor_head = nn.Linear(dim, 4)
        self.content = nn.Parameter(torch.randn(n_queries, dim) * 0.02)

    def forward(
        self,
        encoded: Tensor,
        reference_anchors: Tensor | None = None,
        return_scores: bool = False,
    ):
        n_tokens = encoded.shape[0]
        if self.n_queries > n_tokens:
            raise MTooLarge(f"{self.n_queries} queries requested from {n_tokens} tokens")
        scores = self.objectness(encoded).squeeze(-1)
        order = torch.argsort(-scores, stable=True)[: self.n_queries]
        deltas = self.anchor_head(encoded[order])
        if reference_anchors is not None:
            if reference_anchors.shape != (n_tokens, 4):
                raise ShapeMismatch(
                    f"reference anchors {tuple(reference_anchors.shape)} != ({n_tokens}, 4)"
                )
            anchors = torch.sigmoid(inverse_sigmoid(reference_anchors[order]) + deltas)
        else:
            anchors = torch.sigmoid(deltas)
        queries = [
            ObjectQuery(content=self.content[m], anchor=anchors[m])
            for m in range(self.n_queries)
        ]
        return (queries, scores) if return_scores else queries


def objectness_targets(reference_anchors: Tensor, gts, iou_floor: float = 0.25) -> Tensor:
    """Binary proposal targets: 1 where a token's reference box overlaps a GT.

    Every GT additionally marks its single best-overlap token positive so
    the target is never all-zero for an annotated instance.
    """
    targets = torch.zeros(reference_anchors.shape[0], dtype=reference_anchors.dtype)
    if not gts:
        return targets
    gt_boxes = torch.tensor([gt.box for gt in gts], dtype=reference_anchors.dtype)
    ious = box_iou_xyxy(box_cxcywh_to_xyxy(reference_anchors), gt_boxes)
    targets[(ious >= iou_floor).any(dim=1)] = 1.0
    targets[ious.argmax(dim=0)] = 1.0
    return targets


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, n_heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = MultiheadAttention(dim, n_heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor, memory: Tensor, cross_bias: Tensor | None = None) -> Tensor:
        normed = self.norm_self(x)
        attended, _ = self.self_attn(normed, normed)
        x = x + attended
        attended, _ = self.cross_attn(self.norm_cross(x), memory, score_bias=cross_bias)
        x = x + attended
        return x + self.mlp(self.norm_mlp(x))


def anchor_locality_bias(anchors: Tensor, token_centers: Tensor) -> Tensor:
    """Gaussian cross-attention prior centered on each query's anchor box.

    bias[m, n] = -||anchor_center_m - token_center_n||^2 / (2 sigma_m^2)
    with sigma_m tied to the anchor size, so each query starts by looking
    at its own region instead of needing hundreds of steps to discover
    locality. The attention stays dense and row-stochastic.
    """
    centers = anchors[:, :2]
    sigma = (0.5 * (anchors[:, 2] + anchors[:, 3]) / 2.0).clamp(min=1e-3)
    delta = centers.unsqueeze(1) - token_centers.unsqueeze(0)
    sq_dist = (delta**2).sum(dim=-1)
    return -sq_dist / (2.0 * sigma.unsqueeze(1) ** 2)


class StaDecoder(nn.Module):
    """Decode object queries into boxes, class logits, and time-to-contact."""

    def __init__(self, dim: int, n_nouns: int, n_verbs: int, n_heads: int = 4, depth: int = 2):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(dim, n_heads) for _ in range(depth))
        self.anchor_embed = nn.Linear(4, dim)
        self.box_mlp = Mlp3(dim, dim, 4)
        self.noun_mlp = Mlp3(dim, dim, n_nouns)
        self.verb_mlp = Mlp3(dim, dim, n_verbs)
        self.ttc_mlp = Mlp3(2 * dim, dim, 1)

    def forward(
        self,
        queries: list[ObjectQuery],
        memory: Tensor,
        video_class_token: Tensor,
        memory_centers: Tensor | None = None,
    ) -> HeadOutput:
        if not queries:
            raise StaError("decoder needs at least one query")
        content = torch.stack([q.content for q in queries])
        anchors = torch.stack([q.anchor for q in queries])
        bias = None
        if memory_centers is not None:
            bias = anchor_locality_bias(anchors, memory_centers)
        x = content + self.anchor_embed(anchors)
        for layer in self.layers:
            x = layer(x, memory, cross_bias=bias)
        boxes = torch.sigmoid(inverse_sigmoid(anchors) + self.box_mlp(x))
        cls = video_class_token.unsqueeze(0).expand(x.shape[0], -1)
        ttc = self.ttc_mlp(torch.cat([x, cls], dim=-1)).squeeze(-1)
        return HeadOutput(
            boxes=boxes,
            noun_logits=self.noun_mlp(x),
            verb_logits=self.verb_mlp(x),
            ttc=ttc,
        )


# ---------------------------------------------------------------------------
# scoring


def top_score_pairs(noun_probs: np.ndarray, verb_probs: np.ndarray, k: int) -> list[tuple[int, int, float]]:
    """Highest-scoring (noun, verb) pairs of one query by product score."""
    scores = np.asarray(noun_probs, dtype=np.float64)[:, None] * np.asarray(verb_probs, dtype=np.float64)[None, :]
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:k]
    n_verbs = scores.shape[1]
    return [(int(i // n_verbs), int(i % n_verbs), float(flat[i])) for i in order]


def score_predictions(
    output: HeadOutput,
    mode: str = "argmax",
    no_object_threshold: float = 0.05,
    pairs_per_query: int = 5,
) -> list[StaPrediction]:
    """Turn head outputs into scored prediction tuples.

    ``argmax`` emits one tuple per query from the per-axis argmax classes;
    ``pairs`` enumerates the top (noun, verb) pairs of each query instead.
    Queries whose class probabilities all fall below
    ``no_object_threshold`` (on either axis) are suppressed as empty.
    """
    if mode not in ("argmax", "pairs"):
        raise ValueError(f"unknown scoring mode {mode!r}")
    noun_probs = torch.sigmoid(output.noun_logits).detach().cpu().numpy().astype(np.float64)
    verb_probs = torch.sigmoid(output.verb_logits).detach().cpu().numpy().astype(np.float64)
    boxes = box_cxcywh_to_xyxy(output.boxes).detach().cpu().numpy()
    ttcs = output.ttc.detach().cpu().numpy()

    predictions: list[StaPrediction] = []
    for m in range(output.n_queries):
        if noun_probs[m].max() < no_object_threshold or verb_probs[m].max() < no_object_threshold:
            continue
        x1, y1, x2, y2 = (float(v) for v in np.clip(boxes[m], 0.0, 1.0))
        if not (x1 < x2 and y1 < y2):
            continue
        box = (x1, y1, x2, y2)
        ttc = float(ttcs[m])
        if mode == "argmax":
            predictions.append(StaPrediction.from_probs(box, noun_probs[m], verb_probs[m], ttc))
        else:
            for noun_id, verb_id, score in top_score_pairs(noun_probs[m], verb_probs[m], pairs_per_query):
                predictions.append(
                    StaPrediction(
                        box=box,
                        ttc=ttc,
                        score=score,
                        noun_id=noun_id,
                        verb_id=verb_id,
                        noun_probs=noun_probs[m],
                        verb_probs=verb_probs[m],
                    )
                )
    return predictions


# ---------------------------------------------------------------------------
# matching and loss


def hungarian_match(cost: np.ndarray | Tensor) -> MatchResult:
    """Minimum-total-cost injective assignment covering min(M, G) pairs."""
    if isinstance(cost, Tensor):
        cost = cost.detach().cpu().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeMismatch(f"cost must be a 2D matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise StaError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return MatchResult(pairs=pairs, total_cost=float(cost[rows, cols].sum()))


@dataclass(frozen=True)
class LossWeights:
    """Weights for the matching cost and training loss terms.

    ``pos_weight`` scales the positive BCE terms; with M queries and one
    object, positives are ~1/(M * n_classes) of the targets and would be
    drowned by the no-object background without it.
    """

    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_ttc: float = 1.0
    pos_weight: float = 50.0


def gts_to_tensors(gts: list[GroundTruth] | tuple[GroundTruth, ...], like: Tensor):
    boxes = torch.tensor([gt.box for gt in gts], dtype=like.dtype, device=like.device)
    nouns = torch.tensor([gt.noun_id for gt in gts], dtype=torch.long, device=like.device)
    verbs = torch.tensor([gt.verb_id for gt in gts], dtype=torch.long, device=like.device)
    ttcs = torch.tensor([gt.ttc for gt in gts], dtype=like.dtype, device=like.device)
    return boxes, nouns, verbs, ttcs


def match_cost(output: HeadOutput, gts, weights: LossWeights = LossWeights()) -> np.ndarray:
    """[M, G] matching cost: class affinity + L1 box distance + GIoU penalty.

    Time-to-contact is deliberately excluded from matching.
    """
    with torch.no_grad():
        gt_boxes, gt_nouns, gt_verbs, _ = gts_to_tensors(gts, output.boxes)
        noun_probs = torch.sigmoid(output.noun_logits)
        verb_probs = torch.sigmoid(output.verb_logits)
        cls_cost = 1.0 - 0.5 * (noun_probs[:, gt_nouns] + verb_probs[:, gt_verbs])
        pred_xyxy = box_cxcywh_to_xyxy(output.boxes)
        l1_cost = torch.cdist(output.boxes, box_xyxy_to_cxcywh(gt_boxes), p=1)
        giou_cost = 1.0 - generalized_iou_xyxy(pred_xyxy, gt_boxes)
        cost = weights.w_class * cls_cost + weights.w_l1 * l1_cost + weights.w_giou * giou_cost
    return cost.cpu().numpy()


def sta_loss(
    output: HeadOutput,
    gts,
    match: MatchResult,
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, dict[str, float]]:
    """Training loss over one instance.

    Noun and verb binary cross-entropies run over all queries with one-hot
    targets on matched rows and all-zero targets elsewhere; box L1, GIoU,
    and smooth-L1 time-to-contact terms cover matched pairs only.
    """
    device, dtype = output.boxes.device, output.boxes.dtype
    noun_targets = torch.zeros_like(output.noun_logits)
    verb_targets = torch.zeros_like(output.verb_logits)

    if gts and match.pairs:
        gt_boxes, gt_nouns, gt_verbs, gt_ttcs = gts_to_tensors(gts, output.boxes)
        q_idx = torch.tensor([q for q, _ in match.pairs], dtype=torch.long, device=device)
        g_idx = torch.tensor([g for _, g in match.pairs], dtype=torch.long, device=device)
        noun_targets[q_idx, gt_nouns[g_idx]] = 1.0
        verb_targets[q_idx, gt_verbs[g_idx]] = 1.0

        matched_boxes = output.boxes[q_idx]
        target_cxcywh = box_xyxy_to_cxcywh(gt_boxes[g_idx])
        l1 = torch.abs(matched_boxes - target_cxcywh).sum(dim=-1).mean()
        giou = generalized_iou_xyxy(box_cxcywh_to_xyxy(matched_boxes), gt_boxes[g_idx])
        giou_term = (1.0 - giou.diagonal()).mean()
        ttc_term = nn.functional.smooth_l1_loss(output.ttc[q_idx], gt_ttcs[g_idx])
    else:
        l1 = torch.zeros((), device=device, dtype=dtype)
        giou_term = torch.zeros((), device=device, dtype=dtype)
        ttc_term = torch.zeros((), device=device, dtype=dtype)

    pos = torch.tensor(weights.pos_weight, device=device, dtype=dtype)
    bce_noun = nn.functional.binary_cross_entropy_with_logits(
        output.noun_logits, noun_targets, pos_weight=pos
    )
    bce_verb = nn.functional.binary_cross_entropy_with_logits(
        output.verb_logits, verb_targets, pos_weight=pos
    )

    total = (
        weights.w_class * (bce_noun + bce_verb)
        + weights.w_l1 * l1
        + weights.w_giou * giou_term
        + weights.w_ttc * ttc_term
    )
    components = {
        "bce_noun": float(bce_noun.detach()),
        "bce_verb": float(bce_verb.detach()),
        "box_l1": float(l1.detach()),
        "giou": float(giou_term.detach()),
        "ttc": float(ttc_term.detach()),
        "total": float(total.detach()),
    }
    return total, components
