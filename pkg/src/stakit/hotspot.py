"""Interaction-hotspot maps and confidence re-weighting.

The hotspot predictor itself is out of scope; this module consumes its
output: a nonnegative grid over the last observed frame. Each prediction's
confidence is multiplied by the map value sampled bilinearly at its box
center (centers outside [0, 1] clamp to the border), so detections far
from the hotspot lose confidence while the list order is preserved.

Maps are accepted either as PGM grayscale images (P2/P5, values scaled
by maxval) or as raw little-endian float32 grids next to a JSON sidecar
``{"height": H, "width": W, "mode": ...}``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AllZeroMap, ShapeMismatch, StaError
from .records import StaPrediction

MODES = ("probability", "per_pixel")


@dataclass
class HotspotMap:
    grid: np.ndarray  # [H, W] nonnegative
    mode: str

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2 or self.grid.size == 0:
            raise ShapeMismatch(f"hotspot grid must be 2D and nonempty, got {self.grid.shape}")
        if not np.isfinite(self.grid).all() or (self.grid < 0).any():
            raise StaError("hotspot grid must be finite and nonnegative")
        if self.mode not in MODES:
            raise StaError(f"unknown hotspot mode {self.mode!r}")
        if self.mode == "probability" and abs(self.grid.sum() - 1.0) > 1e-6:
            raise StaError("probability-mode map must sum to 1")


def normalize_map(raw: np.ndarray, mode: str = "per_pixel") -> HotspotMap:
    """Normalize a raw grid by its sum (probability) or max (per-pixel)."""
    raw = np.asarray(raw, dtype=np.float64)
    if (raw < 0).any():
        raise StaError("raw hotspot values must be nonnegative")
    total = raw.sum()
    peak = raw.max() if raw.size else 0.0
    if total <= 0.0 or peak <= 0.0:
        raise AllZeroMap("hotspot map has no positive entry")
    if mode == "probability":
        return HotspotMap(grid=raw / total, mode=mode)
    if mode == "per_pixel":
        return HotspotMap(grid=raw / peak, mode=mode)
    raise StaError(f"unknown hotspot mode {mode!r}")


def sample_bilinear(grid: np.ndarray, x: float, y: float) -> float:
    """Bilinear lookup of normalized (x, y) in [0, 1]^2; clamps to the border."""
    h, w = grid.shape
    x = min(max(x, 0.0), 1.0)
    y = min(max(y, 0.0), 1.0)
    gx = x * w - 0.5
    gy = y * h - 0.5
    x0 = int(np.floor(gx))
    y0 = int(np.floor(gy))
    fx = gx - x0
    fy = gy - y0
    x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
    y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
    top = grid[y0c, x0c] * (1 - fx) + grid[y0c, x1c] * fx
    bottom = grid[y1c, x0c] * (1 - fx) + grid[y1c, x1c] * fx
    return float(top * (1 - fy) + bottom * fy)


def reweight(predictions: list[StaPrediction], hotspot: HotspotMap) -> list[StaPrediction]:
    """Multiply each score by the map value at its box center; order preserved."""
    out = []
    for pred in predictions:
        cx = (pred.box[0] + pred.box[2]) / 2.0
        cy = (pred.box[1] + pred.box[3]) / 2.0
        value = sample_bilinear(hotspot.grid, cx, cy)
        out.append(dataclasses.replace(pred, score=pred.score * value))
    return out


# ---------------------------------------------------------------------------
# file I/O


def save_pgm(path: str | Path, grid: np.ndarray, maxval: int = 255) -> None:
    """Write a grid scaled by its max to a binary PGM (P5) image."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max() if grid.size else 0.0
    scaled = np.zeros_like(grid) if peak <= 0 else grid / peak
    data = np.round(scaled * maxval).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def _load_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(raw):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        data = np.frombuffer(raw[pos + 1 : pos + 1 + width * height], dtype=np.uint8)
    elif magic == b"P2":
        data = np.array(raw[pos:].split()[: width * height], dtype=np.float64)
    else:
        raise StaError(f"{path}: unsupported PGM magic {magic!r}")
    return data.astype(np.float64).reshape(height, width) / maxval


def load_hotspot(path: str | Path, mode: str = "per_pixel") -> HotspotMap:
    """Load a hotspot map from a PGM image or a raw float grid + JSON sidecar."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return normalize_map(_load_pgm(path), mode=mode)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise StaError(f"raw hotspot grid {path} needs a JSON sidecar at {sidecar}")
    with open(sidecar, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    grid = np.fromfile(path, dtype="<f4").astype(np.float64)
    h, w = int(meta["height"]), int(meta["width"])
    if grid.size != h * w:
        raise ShapeMismatch(f"{path}: expected {h}x{w} values, found {grid.size}")
    return normalize_map(grid.reshape(h, w), mode=str(meta.get("mode", mode)))


def save_hotspot_raw(path: str | Path, grid: np.ndarray, mode: str = "per_pixel") -> None:
    path = Path(path)
    np.asarray(grid, dtype="<f4").tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"height": grid.shape[0], "width": grid.shape[1], "mode": mode}, fh)
