"""Synthetic anticipation scenes for desk-scale training.

Each sample is a short clip of a static room: a handful of colored square
objects on an environment-specific background, plus a white "hand" blob
that moves in a straight line toward one of the objects (the target).
The labels are fully determined by the scene script:

* noun  — the target object's color (one palette entry per noun id),
* verb  — the bin of the hand's speed,
* ttc   — distance from the hand center to the target center at the last
          frame, divided by the hand speed,
* box   — the target square in normalized coordinates.

Environments restrict which nouns can appear (round-robin partition) and
tint the background, which is what makes affordance retrieval informative
on this data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .records import GroundTruth, StaRecord, Taxonomy, write_manifest


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 32
    channels: int = 3
    clip_len: int = 4
    fps: float = 2.0
    n_nouns: int = 4
    n_verbs: int = 3
    n_environments: int = 2
    n_distractors: int = 0
    n_samples: int = 256
    object_size: int = 12
    hand_size: int = 4
    speed_range: tuple[float, float] = (2.0, 14.0)
    gap_range: tuple[float, float] = (2.0, 8.0)
    noise: float = 0.02


def validate_config(cfg: SynthConfig) -> SynthConfig:
    if cfg.image_size < 8:
        raise InvalidConfig("image_size must be at least 8 px")
    if cfg.clip_len < 1:
        raise InvalidConfig("clip_len must be >= 1")
    if cfg.n_nouns < 1 or cfg.n_verbs < 1:
        raise InvalidConfig("need at least one noun and one verb class")
    if cfg.n_environments < 1 or cfg.n_environments > cfg.n_nouns:
        raise InvalidConfig("n_environments must be in [1, n_nouns]")
    if cfg.n_samples < 1:
        raise InvalidConfig("n_samples must be >= 1")
    if cfg.object_size + 2 > cfg.image_size or cfg.hand_size + 2 > cfg.image_size:
        raise InvalidConfig("blobs do not fit in the image")
    if not 0.0 < cfg.speed_range[0] < cfg.speed_range[1]:
        raise InvalidConfig("speed_range must be increasing and positive")
    if not 0.0 < cfg.gap_range[0] <= cfg.gap_range[1]:
        raise InvalidConfig("gap_range must be increasing and positive")
    return cfg


@dataclass
class SyntheticClip:
    """Rendered frames plus the trajectory log they were rendered from."""

    clip: np.ndarray  # [t, H, W, C] float32 in [0, 1]
    environment_id: int
    hand_speed: float
    hand_centers: np.ndarray  # [t, 2] (x, y) pixel coordinates
    target_center: tuple[float, float]
    frame_times: np.ndarray  # [t] seconds


def noun_palette(n_nouns: int) -> np.ndarray:
    """Distinct, saturated colors per noun id; avoids the white hand color."""
    colors = np.zeros((n_nouns, 3), dtype=np.float32)
    for i in range(n_nouns):
        hue = i / n_nouns
        colors[i] = _hsv_to_rgb(hue, 1.0, 0.9)
    return colors


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return (v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)).astype(np.float32)


def environment_background(env_id: int, n_environments: int) -> np.ndarray:
    """Muted background tint per environment."""
    hue = (env_id + 0.5) / n_environments
    return 0.10 + 0.12 * _hsv_to_rgb(hue, 0.8, 1.0)


def allowed_nouns(env_id: int, cfg: SynthConfig) -> list[int]:
    """Round-robin partition of the noun taxonomy across environments."""
    return [n for n in range(cfg.n_nouns) if n % cfg.n_environments == env_id]


def verb_for_speed(speed: float, cfg: SynthConfig) -> int:
    lo, hi = cfg.speed_range
    frac = (speed - lo) / (hi - lo)
    return min(int(frac * cfg.n_verbs), cfg.n_verbs - 1)


def _draw_square(frame: np.ndarray, cx: float, cy: float, size: int, color: np.ndarray) -> None:
    h, w = frame.shape[:2]
    x1 = int(round(cx - size / 2.0))
    y1 = int(round(cy - size / 2.0))
    x1 = max(0, min(w - size, x1))
    y1 = max(0, min(h - size, y1))
    frame[y1 : y1 + size, x1 : x1 + size] = color


def _sample_positions(rng: np.random.Generator, n: int, size: int, image: int) -> list[tuple[float, float]]:
    """Non-overlapping blob centers; falls back to overlap after 200 rejections."""
    half = size / 2.0
    centers: list[tuple[float, float]] = []
    for _ in range(n):
        for _attempt in range(200):
            cx = rng.uniform(half + 1, image - half - 1)
            cy = rng.uniform(half + 1, image - half - 1)
            if all(max(abs(cx - ox), abs(cy - oy)) >= size + 1 for ox, oy in centers):
                centers.append((cx, cy))
                break
        else:
            centers.append((cx, cy))
    return centers


def synth_dataset(cfg: SynthConfig, seed: int) -> list[tuple[SyntheticClip, StaRecord]]:
    """Generate ``cfg.n_samples`` (clip, record) pairs, deterministic in ``seed``."""
    validate_config(cfg)
    rng = np.random.default_rng(np.random.PCG64(seed))
    palette = noun_palette(cfg.n_nouns)
    dt = 1.0 / cfg.fps
    frame_time = (cfg.clip_len - 1) * dt
    pairs: list[tuple[SyntheticClip, StaRecord]] = []

    for index in range(cfg.n_samples):
        env = int(rng.integers(cfg.n_environments))
        nouns = allowed_nouns(env, cfg)
        target_noun = int(rng.choice(nouns))
        others = [n for n in nouns if n != target_noun] or nouns
        distractor_nouns = [int(rng.choice(others)) for _ in range(cfg.n_distractors)]

        centers = _sample_positions(rng, 1 + cfg.n_distractors, cfg.object_size, cfg.image_size)
        target_center = centers[0]

        speed = float(rng.uniform(*cfg.speed_range))
        verb_id = verb_for_speed(speed, cfg)
        gap = float(rng.uniform(*cfg.gap_range))
        standoff = gap + (cfg.object_size + cfg.hand_size) / 2.0

        # Last hand position sits `standoff` px from the target along a random
        # heading; earlier positions walk backwards along the same line. Retry
        # headings until the whole trajectory stays inside the image.
        margin = cfg.hand_size / 2.0 + 1.0
        hand_centers = None
        for _attempt in range(64):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            direction = np.array([math.cos(angle), math.sin(angle)])
            last = np.array(target_center) - direction * standoff
            steps = np.arange(cfg.clip_len - 1, -1, -1, dtype=np.float64)
            candidate = last[None, :] - direction[None, :] * (speed * dt) * steps[:, None]
            if (candidate.min() >= margin) and (candidate.max() <= cfg.image_size - margin):
                hand_centers = candidate
                break
        if hand_centers is None:
            hand_centers = np.clip(candidate, margin, cfg.image_size - margin)

        background = environment_background(env, cfg.n_environments)
        clip = np.empty((cfg.clip_len, cfg.image_size, cfg.image_size, cfg.channels), dtype=np.float32)
        noise = rng.normal(0.0, cfg.noise, size=clip.shape).astype(np.float32)
        for k in range(cfg.clip_len):
            frame = np.tile(background[: cfg.channels], (cfg.image_size, cfg.image_size, 1)).astype(np.float32)
            for noun, (cx, cy) in zip([target_noun] + distractor_nouns, centers):
                _draw_square(frame, cx, cy, cfg.object_size, palette[noun][: cfg.channels])
            _draw_square(frame, hand_centers[k, 0], hand_centers[k, 1], cfg.hand_size, np.ones(cfg.channels, dtype=np.float32))
            clip[k] = frame
        clip = np.clip(clip + noise, 0.0, 1.0)

        distance = float(np.linalg.norm(hand_centers[-1] - np.array(target_center)))
        ttc = distance / speed

        half = cfg.object_size / 2.0
        box = (
            max(0.0, (target_center[0] - half) / cfg.image_size),
            max(0.0, (target_center[1] - half) / cfg.image_size),
            min(1.0, (target_center[0] + half) / cfg.image_size),
            min(1.0, (target_center[1] + half) / cfg.image_size),
        )
        record = StaRecord(
            record_id=f"synth-{seed}-{index:05d}",
            frame_time=frame_time,
            clip_span=(0.0, frame_time),
            image_size=(cfg.image_size, cfg.image_size),
            gts=(GroundTruth(box=box, noun_id=target_noun, verb_id=verb_id, ttc=ttc),),
        )
        pairs.append(
            (
                SyntheticClip(
                    clip=clip,
                    environment_id=env,
                    hand_speed=speed,
                    hand_centers=hand_centers,
                    target_center=target_center,
                    frame_times=np.arange(cfg.clip_len, dtype=np.float64) * dt,
                ),
                record,
            )
        )
    return pairs


def clip_signature(clip: np.ndarray) -> np.ndarray:
    """Cheap deterministic clip embedding: global and per-quadrant color medians.

    Used as the visual descriptor space of the affordance memory. Medians
    are dominated by the background (objects cover a minority of pixels),
    so the embedding tracks the environment tint and same-environment
    clips are close in cosine similarity.
    """
    last = clip[-1]
    h, w = last.shape[:2]
    halves_y, halves_x = h // 2, w // 2
    parts = [np.median(last.reshape(-1, last.shape[-1]), axis=0)]
    for ys in (slice(0, halves_y), slice(halves_y, h)):
        for xs in (slice(0, halves_x), slice(halves_x, w)):
            quadrant = last[ys, xs]
            parts.append(np.median(quadrant.reshape(-1, quadrant.shape[-1]), axis=0))
    return np.concatenate(parts).astype(np.float32)


def write_synth_dataset(
    out_dir: str | Path,
    pairs: list[tuple[SyntheticClip, StaRecord]],
    taxonomy: Taxonomy,
) -> Path:
    """Save clips as ``.npy`` files plus a ``sta-manifest/1`` manifest; returns its path."""
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for clip, record in pairs:
        rel = f"clips/{record.record_id}.npy"
        np.save(out_dir / rel, clip.clip)
        records.append(
            StaRecord(
                record_id=record.record_id,
                frame_time=record.frame_time,
                clip_span=record.clip_span,
                image_size=record.image_size,
                gts=record.gts,
                clip_path=rel,
            )
        )
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records, taxonomy)
    return manifest


def load_clip(manifest_path: str | Path, record: StaRecord) -> np.ndarray:
    """Load the clip tensor referenced by a manifest record."""
    if record.clip_path is None:
        raise FileNotFoundError(f"record {record.record_id} has no clip_path")
    return np.load(Path(manifest_path).parent / record.clip_path)
