"""Official metric families: Top-5 mAP modes and class-agnostic Top-5 AP combos.

All metrics share one machinery. Per image, predictions are truncated to
the ``top_k`` highest scores. Detections are then processed in global
descending-score order; each detection targets the ground truth with the
highest IoU inside its pool (same noun class for mAP, any for AP) and
counts as a true positive iff that fixed target passes every active
criterion and is still unclaimed. Average precision integrates the
resulting ranked precision/recall curve (AP = sum of precision at each
newly recalled rank / number of ground truths).

Fixing each detection's target independently of the active criteria is
what makes the mode ordering (All <= N+V <= N and All <= N+delta <= N)
hold on every input: stricter criteria can only delay or remove claims.

Classes with zero ground truth are excluded from the mAP mean; a fixture
with no ground truth at all yields ``None`` rather than 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaError, StaError, TaxonomyMismatch
from .records import (
    Box,
    GroundTruth,
    StaPrediction,
    read_manifest,
    read_predictions,
)

MAP_MODES: dict[str, frozenset[str]] = {
    "noun": frozenset({"noun"}),
    "noun_verb": frozenset({"noun", "verb"}),
    "noun_ttc": frozenset({"noun", "ttc"}),
    "all": frozenset({"noun", "verb", "ttc"}),
}

AP_COMBOS: dict[str, frozenset[str]] = {
    "box": frozenset(),
    "box_noun": frozenset({"noun"}),
    "box_verb": frozenset({"verb"}),
    "box_ttc": frozenset({"ttc"}),
    "box_noun_verb": frozenset({"noun", "verb"}),
    "box_noun_ttc": frozenset({"noun", "ttc"}),
    "box_verb_ttc": frozenset({"verb", "ttc"}),
    "box_noun_verb_ttc": frozenset({"noun", "verb", "ttc"}),
}


@dataclass(frozen=True)
class MatchCriteria:
    """Box IoU is always required; ``mode`` adds noun/verb/ttc equality terms."""

    iou_threshold: float = 0.5
    ttc_tolerance: float = 0.25
    mode: frozenset[str] = frozenset({"noun"})

    def __post_init__(self) -> None:
        if self.iou_threshold <= 0 or self.ttc_tolerance <= 0:
            raise StaError("criteria thresholds must be positive")
        unknown = set(self.mode) - {"noun", "verb", "ttc", "box"}
        if unknown:
            raise StaError(f"unknown criteria components {sorted(unknown)}")


def iou(a: Box, b: Box) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def is_match(pred: StaPrediction, gt: GroundTruth, criteria: MatchCriteria) -> bool:
    """True iff the prediction satisfies IoU plus every component in the mode."""
    if iou(pred.box, gt.box) < criteria.iou_threshold:
        return False
    if "noun" in criteria.mode and pred.noun_id != gt.noun_id:
        return False
    if "verb" in criteria.mode and pred.verb_id != gt.verb_id:
        return False
    if "ttc" in criteria.mode and abs(pred.ttc - gt.ttc) > criteria.ttc_tolerance:
        return False
    return True


def _truncate_top_k(preds: list[StaPrediction], k: int) -> list[StaPrediction]:
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    return [preds[i] for i in order[:k]]


def _average_precision(
    detections: list[tuple[int, StaPrediction]],
    gts_by_image: dict[int, list[tuple[int, GroundTruth]]],
    criteria: MatchCriteria,
) -> float | None:
    """Ranked AP over pre-pooled detections and ground truths.

    ``detections`` are (image_idx, prediction); ``gts_by_image`` maps
    image_idx to (gt_key, gt) pairs, where gt_key identifies the ground
    truth for one-to-one claiming.
    """
    n_gt = sum(len(v) for v in gts_by_image.values())
    if n_gt == 0:
        return None
    ranked = sorted(range(len(detections)), key=lambda i: (-detections[i][1].score, i))
    claimed: set[tuple[int, int]] = set()
    tp_count = 0
    ap = 0.0
    for rank, det_idx in enumerate(ranked, start=1):
        image_idx, pred = detections[det_idx]
        candidates = gts_by_image.get(image_idx, [])
        if not candidates:
            continue
        best_key, best_gt = max(
            candidates, key=lambda pair: (iou(pred.box, pair[1].box), -pair[0])
        )
        if is_match(pred, best_gt, criteria) and (image_idx, best_key) not in claimed:
            claimed.add((image_idx, best_key))
            tp_count += 1
            ap += tp_count / rank / n_gt
    return ap


def top5_map(
    preds_per_image: list[list[StaPrediction]],
    gts_per_image: list[list[GroundTruth]],
    criteria: MatchCriteria,
    top_k: int = 5,
) -> float | None:
    """Mean over noun classes (with >= 1 ground truth) of per-class Top-K AP."""
    if len(preds_per_image) != len(gts_per_image):
        raise StaError("prediction and ground-truth lists must align per image")
    truncated = [_truncate_top_k(preds, top_k) for preds in preds_per_image]
    classes = sorted({gt.noun_id for gts in gts_per_image for gt in gts})
    if not classes:
        return None
    per_class = []
    for noun_id in classes:
        detections = [
            (img, pred)
            for img, preds in enumerate(truncated)
            for pred in preds
            if pred.noun_id == noun_id
        ]
        gts_by_image: dict[int, list[tuple[int, GroundTruth]]] = {}
        for img, gts in enumerate(gts_per_image):
            pool = [(gi, gt) for gi, gt in enumerate(gts) if gt.noun_id == noun_id]
            if pool:
                gts_by_image[img] = pool
        ap = _average_precision(detections, gts_by_image, criteria)
        if ap is not None:
            per_class.append(ap)
    return sum(per_class) / len(per_class)


def top5_ap(
    preds_per_image: list[list[StaPrediction]],
    gts_per_image: list[list[GroundTruth]],
    combo: frozenset[str] | set[str],
    iou_threshold: float = 0.5,
    ttc_tolerance: float = 0.25,
    top_k: int = 5,
) -> float | None:
    """Class-agnostic Top-K AP; the box IoU requirement is always active."""
    if len(preds_per_image) != len(gts_per_image):
        raise StaError("prediction and ground-truth lists must align per image")
    criteria = MatchCriteria(
        iou_threshold=iou_threshold,
        ttc_tolerance=ttc_tolerance,
        mode=frozenset(combo) - {"box"},
    )
    truncated = [_truncate_top_k(preds, top_k) for preds in preds_per_image]
    detections = [(img, pred) for img, preds in enumerate(truncated) for pred in preds]
    gts_by_image = {
        img: [(gi, gt) for gi, gt in enumerate(gts)]
        for img, gts in enumerate(gts_per_image)
        if gts
    }
    return _average_precision(detections, gts_by_image, criteria)


# ---------------------------------------------------------------------------
# full evaluation runs


@dataclass
class EvalReport:
    """All metric families plus the exact configuration that produced them."""

    map_scores: dict[str, float | None]
    ap_scores: dict[str, float | None]
    per_class_ap: dict[str, dict[int, float]]
    n_predictions: int
    n_ground_truths: int
    config: dict = field(default_factory=dict)
    schema: str = "sta-report/1"

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": self.schema,
                "config": self.config,
                "map": self.map_scores,
                "ap": self.ap_scores,
                "per_class_ap": {
                    mode: {str(k): v for k, v in table.items()}
                    for mode, table in self.per_class_ap.items()
                },
                "counts": {
                    "predictions": self.n_predictions,
                    "ground_truths": self.n_ground_truths,
                },
            },
            indent=2,
            sort_keys=True,
        )


def _per_class_table(
    truncated: list[list[StaPrediction]],
    gts_per_image: list[list[GroundTruth]],
    criteria: MatchCriteria,
) -> dict[int, float]:
    table = {}
    for noun_id in sorted({gt.noun_id for gts in gts_per_image for gt in gts}):
        detections = [
            (img, pred)
            for img, preds in enumerate(truncated)
            for pred in preds
            if pred.noun_id == noun_id
        ]
        gts_by_image = {}
        for img, gts in enumerate(gts_per_image):
            pool = [(gi, gt) for gi, gt in enumerate(gts) if gt.noun_id == noun_id]
            if pool:
                gts_by_image[img] = pool
        ap = _average_precision(detections, gts_by_image, criteria)
        if ap is not None:
            table[noun_id] = ap
    return table


def evaluate_run(
    pred_path: str | Path,
    manifest_path: str | Path,
    iou_threshold: float = 0.5,
    ttc_tolerance: float = 0.25,
    top_k: int = 5,
) -> EvalReport:
    """Evaluate a ``sta-pred/1`` dump against a ``sta-manifest/1`` manifest."""
    records, gt_header = read_manifest(manifest_path)
    predictions, pred_header = read_predictions(pred_path)
    for key in ("n_nouns", "n_verbs"):
        if gt_header.get(key) != pred_header.get(key):
            raise TaxonomyMismatch(
                f"{key} differs: manifest {gt_header.get(key)} vs predictions {pred_header.get(key)}"
            )
    unknown = set(predictions) - {r.record_id for r in records}
    if unknown:
        raise SchemaError(f"predictions reference unknown records: {sorted(unknown)[:5]}")

    preds_per_image = [predictions.get(r.record_id, []) for r in records]
    gts_per_image = [list(r.gts) for r in records]
    truncated = [_truncate_top_k(p, top_k) for p in preds_per_image]

    map_scores = {}
    per_class = {}
    for name, mode in MAP_MODES.items():
        criteria = MatchCriteria(iou_threshold=iou_threshold, ttc_tolerance=ttc_tolerance, mode=mode)
        map_scores[name] = top5_map(preds_per_image, gts_per_image, criteria, top_k=top_k)
        per_class[name] = _per_class_table(truncated, gts_per_image, criteria)
    ap_scores = {}
    for name, combo in AP_COMBOS.items():
        score = top5_ap(
            preds_per_image,
            gts_per_image,
            combo,
            iou_threshold=iou_threshold,
            ttc_tolerance=ttc_tolerance,
            top_k=top_k,
        )
        ap_scores[name] = score
    return EvalReport(
        map_scores=map_scores,
        ap_scores=ap_scores,
        per_class_ap=per_class,
        n_predictions=sum(len(p) for p in preds_per_image),
        n_ground_truths=sum(len(g) for g in gts_per_image),
        config={
            "iou_threshold": iou_threshold,
            "ttc_tolerance": ttc_tolerance,
            "top_k": top_k,
            "n_nouns": gt_header.get("n_nouns"),
            "n_verbs": gt_header.get("n_verbs"),
        },
    )
