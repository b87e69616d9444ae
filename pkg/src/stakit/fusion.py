"""Image/video token fusion: temporal pooling, dual cross-attention, pyramids.

Frame-guided temporal pooling compresses a spatio-temporal token volume
onto the spatial grid of the last frame: queries come from last-frame
tokens, keys and values from all frames, and the attended value is added
residually, so zeroing the output projection leaves the last frame
untouched. Dual attention is the symmetric pair of residual
cross-attentions between the image grid and the pooled video grid, each
followed by a residual MLP.

Positional handling follows two regimes: fixed sinusoidal (temporal +
spatial) embeddings for temporal pooling, learned per-slot embeddings for
dual attention; both can be disabled via ``positional="none"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import Mlp, MultiheadAttention, sinusoidal_embedding
from .encoders import MultiScaleTokens, TokenGrid, VideoTokens
from .errors import ScaleMismatch, ShapeMismatch


@dataclass
class FeaturePyramid:
    """Ordered per-scale token grids, finest first."""

    scales: list[TokenGrid] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.scales:
            raise ScaleMismatch("pyramid must hold at least one scale")
        for prev, cur in zip(self.scales, self.scales[1:]):
            if cur.h_tok >= prev.h_tok or cur.w_tok >= prev.w_tok:
                raise ScaleMismatch("pyramid resolutions must strictly decrease")

    def resolutions(self) -> list[tuple[int, int]]:
        return [(g.h_tok, g.w_tok) for g in self.scales]

    def __iter__(self):
        return iter(self.scales)

    def __len__(self) -> int:
        return len(self.scales)


class FrameGuidedPooling(nn.Module):
    """Residual cross-attention from last-frame tokens onto the whole clip."""

    def __init__(self, dim: int, n_heads: int = 4, positional: str = "sinusoidal"):
        super().__init__()
        if positional not in ("sinusoidal", "none"):
            raise ValueError(f"unknown positional mode {positional!r}")
        self.attn = MultiheadAttention(dim, n_heads)
        self.positional = positional

    def forward(self, video: VideoTokens, return_attn: bool = False):
        t, n, d = video.tokens.shape
        last = video.tokens[-1]
        keys = video.tokens.reshape(t * n, d)
        if self.positional == "sinusoidal":
            spatial = sinusoidal_embedding(n, d, device=last.device, dtype=last.dtype)
            temporal = sinusoidal_embedding(t, d, device=last.device, dtype=last.dtype)
            q_in = last + spatial + temporal[-1]
            k_in = keys + (spatial.repeat(t, 1) + temporal.repeat_interleave(n, dim=0))
        else:
            q_in, k_in = last, keys
        attended, weights = self.attn(q_in, k_in)
        pooled = TokenGrid(
            tokens=last + attended,
            class_token=video.class_token,
            h_tok=video.h_tok,
            w_tok=video.w_tok,
        )
        return (pooled, weights) if return_attn else pooled

    def zero_output_projection(self) -> None:
        self.attn.zero_output_projection()


def mean_pool(video: VideoTokens) -> TokenGrid:
    """Plain temporal mean baseline for the pooling ablation."""
    return TokenGrid(
        tokens=video.tokens.mean(dim=0),
        class_token=video.class_token,
        h_tok=video.h_tok,
        w_tok=video.w_tok,
    )


def resize_grid(grid: TokenGrid, h: int, w: int, scale_id: int = 0) -> TokenGrid:
    """Bilinear resize of a token grid to a new spatial resolution."""
    fmap = grid.as_map().unsqueeze(0)
    resized = F.interpolate(fmap, size=(h, w), mode="bilinear", align_corners=False)
    return TokenGrid.from_map(resized.squeeze(0), grid.class_token, scale_id=scale_id)


class TemporalPyramidPooling(nn.Module):
    """Temporal pooling repeated (or shared) per image scale, then resize + conv.

    ``pooling`` selects attention pooling or the mean baseline;
    ``per_scale=True`` runs an independent attention pooler per scale.
    """

    def __init__(
        self,
        dim: int,
        n_scales: int,
        n_heads: int = 4,
        pooling: str = "attention",
        per_scale: bool = True,
        positional: str = "sinusoidal",
    ):
        super().__init__()
        if pooling not in ("attention", "mean"):
            raise ValueError(f"unknown pooling mode {pooling!r}")
        self.pooling = pooling
        self.per_scale = per_scale and pooling == "attention"
        n_poolers = n_scales if self.per_scale else (1 if pooling == "attention" else 0)
        self.poolers = nn.ModuleList(
            FrameGuidedPooling(dim, n_heads, positional) for _ in range(n_poolers)
        )
        self.convs = nn.ModuleList(
            nn.Conv2d(dim, dim, kernel_size=3, padding=1) for _ in range(n_scales)
        )

    def forward(self, video: VideoTokens, image_scales: MultiScaleTokens) -> FeaturePyramid:
        if len(image_scales) != len(self.convs):
            raise ScaleMismatch(
                f"pooling built for {len(self.convs)} scales, got {len(image_scales)}"
            )
        shared = None
        if not self.per_scale:
            shared = self.poolers[0](video) if self.pooling == "attention" else mean_pool(video)
        grids = []
        for s, target in enumerate(image_scales):
            pooled = self.poolers[s](video) if self.per_scale else shared
            resized = resize_grid(pooled, target.h_tok, target.w_tok, scale_id=target.scale_id)
            fmap = self.convs[s](resized.as_map().unsqueeze(0)).squeeze(0)
            grids.append(TokenGrid.from_map(fmap, pooled.class_token, scale_id=target.scale_id))
        return FeaturePyramid(grids)


class DualAttention(nn.Module):
    """Symmetric residual cross-attention between image and pooled video grids.

    Both streams get learned per-slot positional embeddings (token slots
    plus the class slot) and a LayerNorm before attention; each branch ends
    in a residual MLP. Token counts are fixed at construction because the
    positional tables are per slot.
    """

    def __init__(
        self,
        dim: int,
        n_tokens_image: int,
        n_tokens_video: int,
        n_heads: int = 4,
        positional: str = "learned",
    ):
        super().__init__()
        if positional not in ("learned", "none"):
            raise ValueError(f"unknown positional mode {positional!r}")
        self.positional = positional
        self.pos_image = nn.Parameter(torch.randn(n_tokens_image + 1, dim) * 0.02)
        self.pos_video = nn.Parameter(torch.randn(n_tokens_video + 1, dim) * 0.02)

        self.img_norm_q = nn.LayerNorm(dim)
        self.img_norm_kv = nn.LayerNorm(dim)
        self.img_attn = MultiheadAttention(dim, n_heads)
        self.img_norm_mlp = nn.LayerNorm(dim)
        self.img_mlp = Mlp(dim)

        self.vid_norm_q = nn.LayerNorm(dim)
        self.vid_norm_kv = nn.LayerNorm(dim)
        self.vid_attn = MultiheadAttention(dim, n_heads)
        self.vid_norm_mlp = nn.LayerNorm(dim)
        self.vid_mlp = Mlp(dim)

    def _with_pos(self, seq: Tensor, table: Tensor) -> Tensor:
        if self.positional == "none":
            return seq
        if seq.shape[0] != table.shape[0]:
            raise ShapeMismatch(
                f"sequence length {seq.shape[0]} != positional table {table.shape[0]}"
            )
        return seq + table

    def forward(self, image: TokenGrid, video: TokenGrid, return_attn: bool = False):
        if image.dim != video.dim:
            raise ShapeMismatch(f"feature dims differ: {image.dim} vs {video.dim}")
        img_seq = torch.cat([image.tokens, image.class_token.unsqueeze(0)], dim=0)
        vid_seq = torch.cat([video.tokens, video.class_token.unsqueeze(0)], dim=0)

        img_q = self.img_norm_q(self._with_pos(img_seq, self.pos_image))
        img_kv = self.img_norm_kv(self._with_pos(vid_seq, self.pos_video))
        img_att, img_weights = self.img_attn(img_q, img_kv)
        refined_img = img_seq + img_att
        refined_img = refined_img + self.img_mlp(self.img_norm_mlp(refined_img))

        vid_q = self.vid_norm_q(self._with_pos(vid_seq, self.pos_video))
        vid_kv = self.vid_norm_kv(self._with_pos(img_seq, self.pos_image))
        vid_att, vid_weights = self.vid_attn(vid_q, vid_kv)
        refined_vid = vid_seq + vid_att
        refined_vid = refined_vid + self.vid_mlp(self.vid_norm_mlp(refined_vid))

        out_img = TokenGrid(
            tokens=refined_img[:-1],
            class_token=refined_img[-1],
            h_tok=image.h_tok,
            w_tok=image.w_tok,
            scale_id=image.scale_id,
        )
        out_vid = TokenGrid(
            tokens=refined_vid[:-1],
            class_token=refined_vid[-1],
            h_tok=video.h_tok,
            w_tok=video.w_tok,
            scale_id=video.scale_id,
        )
        if return_attn:
            return out_img, out_vid, {"image_to_video": img_weights, "video_to_image": vid_weights}
        return out_img, out_vid

    def zero_output_projections(self) -> None:
        """Make both branches exact identities."""
        self.img_attn.zero_output_projection()
        self.vid_attn.zero_output_projection()
        self.img_mlp.zero_output_layer()
        self.vid_mlp.zero_output_layer()


class PyramidFusion(nn.Module):
    """Elementwise sum of two pyramids followed by a per-scale 3x3 convolution."""

    def __init__(self, dim: int, n_scales: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(dim, dim, kernel_size=3, padding=1) for _ in range(n_scales)
        )

    def forward(self, p2d: FeaturePyramid, p3d: FeaturePyramid) -> FeaturePyramid:
        if len(p2d) != len(self.convs) or len(p3d) != len(self.convs):
            raise ScaleMismatch(
                f"fusion built for {len(self.convs)} scales, got {len(p2d)} and {len(p3d)}"
            )
        if p2d.resolutions() != p3d.resolutions():
            raise ScaleMismatch(f"pyramid resolutions differ: {p2d.resolutions()} vs {p3d.resolutions()}")
        grids = []
        for s, (a, b) in enumerate(zip(p2d, p3d)):
            summed = a.as_map() + b.as_map()
            fused = self.convs[s](summed.unsqueeze(0)).squeeze(0)
            grids.append(
                TokenGrid.from_map(fused, a.class_token + b.class_token, scale_id=a.scale_id)
            )
        return FeaturePyramid(grids)

    def set_identity(self) -> None:
        """Dirac-initialize every convolution so fusion reduces to the sum."""
        for conv in self.convs:
            nn.init.dirac_(conv.weight)
            nn.init.zeros_(conv.bias)


def fuse_class_tokens(c_image: Tensor, c_video: Tensor) -> Tensor:
    """Global pair representation: the sum of the two refined class tokens."""
    if c_image.shape != c_video.shape:
        raise ShapeMismatch(f"class token shapes differ: {tuple(c_image.shape)} vs {tuple(c_video.shape)}")
    return c_image + c_video
