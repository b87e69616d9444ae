"""Toy image and video encoders honoring the token contracts of the fusion stack.

These are deliberately shallow (patch embedding plus one self-attention
block) so desk-scale training stays fast; the fusion and head modules
carry the interesting machinery. Both encoders operate on single
instances: images are ``[H, W, C]`` float grids, clips ``[t, H, W, C]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .attention import TransformerBlock
from .errors import ShapeMismatch


@dataclass
class TokenGrid:
    """Spatial feature tokens plus a class token at one scale."""

    tokens: Tensor  # [h_tok * w_tok, D]
    class_token: Tensor  # [D]
    h_tok: int
    w_tok: int
    scale_id: int = 0

    def __post_init__(self) -> None:
        if self.tokens.shape[0] != self.h_tok * self.w_tok:
            raise ShapeMismatch(
                f"token count {self.tokens.shape[0]} != {self.h_tok}x{self.w_tok}"
            )
        if self.class_token.shape[-1] != self.tokens.shape[-1]:
            raise ShapeMismatch("class token dim differs from grid dim")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def as_map(self) -> Tensor:
        """View as a [D, h_tok, w_tok] feature map for convolution/resizing."""
        return self.tokens.transpose(0, 1).reshape(self.dim, self.h_tok, self.w_tok)

    @classmethod
    def from_map(cls, fmap: Tensor, class_token: Tensor, scale_id: int = 0) -> "TokenGrid":
        d, h, w = fmap.shape
        return cls(
            tokens=fmap.reshape(d, h * w).transpose(0, 1),
            class_token=class_token,
            h_tok=h,
            w_tok=w,
            scale_id=scale_id,
        )


@dataclass
class VideoTokens:
    """Per-frame token grids plus a clip-level class token."""

    tokens: Tensor  # [t, h_tok * w_tok, D]
    class_token: Tensor  # [D]
    frame_times: tuple[float, ...]
    h_tok: int
    w_tok: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3 or self.tokens.shape[0] < 1:
            raise ShapeMismatch("video tokens must be [t >= 1, N, D]")
        if self.tokens.shape[1] != self.h_tok * self.w_tok:
            raise ShapeMismatch("per-frame token count does not match grid shape")
        if len(self.frame_times) != self.tokens.shape[0]:
            raise ShapeMismatch("frame_times length differs from frame count")

    @property
    def t(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class MultiScaleTokens:
    """Token grids at strictly halving resolutions, finest first."""

    scales: list[TokenGrid] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.scales) < 2:
            raise ShapeMismatch("need at least 2 scales")
        for prev, cur in zip(self.scales, self.scales[1:]):
            if cur.h_tok * 2 != prev.h_tok or cur.w_tok * 2 != prev.w_tok:
                raise ShapeMismatch(
                    f"resolutions must halve: {prev.h_tok}x{prev.w_tok} -> {cur.h_tok}x{cur.w_tok}"
                )

    def __iter__(self):
        return iter(self.scales)

    def __len__(self) -> int:
        return len(self.scales)


def patchify(image: Tensor, patch: int) -> Tensor:
    """[H, W, C] -> [H/patch * W/patch, patch*patch*C] row-major patches."""
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ShapeMismatch(f"image {h}x{w} not divisible by patch {patch}")
    grid = image.reshape(h // patch, patch, w // patch, patch, c)
    return grid.permute(0, 2, 1, 3, 4).reshape((h // patch) * (w // patch), patch * patch * c)


class ToyImageEncoder(nn.Module):
    """Patch embedding, a learned pooling (class) token, one attention block."""

    def __init__(self, patch: int, dim: int, channels: int = 3, n_heads: int = 4):
        super().__init__()
        self.patch = patch
        self.dim = dim
        self.channels = channels
        self.embed = nn.Linear(patch * patch * channels, dim)
        self.cls_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.block = TransformerBlock(dim, n_heads)

    def forward(self, image: Tensor, scale_id: int = 0) -> TokenGrid:
        if image.ndim != 3 or image.shape[2] != self.channels:
            raise ShapeMismatch(f"expected [H, W, {self.channels}] image, got {tuple(image.shape)}")
        h, w, _ = image.shape
        tokens = self.embed(patchify(image, self.patch))
        seq = torch.cat([tokens, self.cls_token.to(tokens.dtype).unsqueeze(0)], dim=0)
        seq, _ = self.block(seq)
        return TokenGrid(
            tokens=seq[:-1],
            class_token=seq[-1],
            h_tok=h // self.patch,
            w_tok=w // self.patch,
            scale_id=scale_id,
        )


class ToyMultiScaleImageEncoder(nn.Module):
    """Independent toy encoders at strides patch * 2**s, finest first."""

    def __init__(self, patch: int, dim: int, n_scales: int, channels: int = 3, n_heads: int = 4):
        super().__init__()
        if n_scales < 2:
            raise ShapeMismatch("need at least 2 scales")
        self.n_scales = n_scales
        self.stages = nn.ModuleList(
            ToyImageEncoder(patch * 2**s, dim, channels, n_heads) for s in range(n_scales)
        )

    def forward(self, image: Tensor) -> MultiScaleTokens:
        return MultiScaleTokens([stage(image, scale_id=s) for s, stage in enumerate(self.stages)])


class ToyVideoEncoder(nn.Module):
    """Shared per-frame encoder plus a learned map over mean class tokens.

    ``max_frames`` models backbones that only accept short clips; longer
    inputs are a shape error rather than being silently subsampled.
    """

    def __init__(
        self,
        patch: int,
        dim: int,
        channels: int = 3,
        n_heads: int = 4,
        max_frames: int | None = None,
    ):
        super().__init__()
        self.frame_encoder = ToyImageEncoder(patch, dim, channels, n_heads)
        self.clip_head = nn.Linear(dim, dim)
        self.max_frames = max_frames

    def forward(self, clip: Tensor, frame_times: tuple[float, ...] | None = None) -> VideoTokens:
        if clip.ndim != 4 or clip.shape[0] < 1:
            raise ShapeMismatch(f"expected [t >= 1, H, W, C] clip, got {tuple(clip.shape)}")
        t = clip.shape[0]
        if self.max_frames is not None and t > self.max_frames:
            raise ShapeMismatch(f"clip has {t} frames, encoder cap is {self.max_frames}")
        grids = [self.frame_encoder(clip[k]) for k in range(t)]
        tokens = torch.stack([g.tokens for g in grids])
        class_token = self.clip_head(torch.stack([g.class_token for g in grids]).mean(dim=0))
        if frame_times is None:
            frame_times = tuple(float(k) for k in range(t))
        return VideoTokens(
            tokens=tokens,
            class_token=class_token,
            frame_times=tuple(frame_times),
            h_tok=grids[0].h_tok,
            w_tok=grids[0].w_tok,
        )
