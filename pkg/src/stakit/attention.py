"""Multi-head attention, MLP, and positional-encoding primitives.

Every attention forward also returns its softmax weight map so tests and
the ``dump-attn`` command can inspect row-stochasticity and saliency.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .errors import ShapeMismatch


def sinusoidal_embedding(n_positions: int, dim: int, device=None, dtype=None) -> Tensor:
    """Fixed sin/cos positional table of shape [n_positions, dim]."""
    position = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    half = (dim + 1) // 2
    freq = torch.exp(torch.arange(half, dtype=torch.float64) * (-math.log(10000.0) / max(half - 1, 1)))
    angles = position * freq.unsqueeze(0)
    table = torch.zeros(n_positions, 2 * half, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles)
    table = table[:, :dim]
    return table.to(device=device, dtype=dtype if dtype is not None else torch.float32)


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, dim: int, n_heads: int = 4):
        super().__init__()
        if dim % n_heads != 0:
            raise ShapeMismatch(f"dim {dim} not divisible by n_heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: Tensor, key_value: Tensor, score_bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """query [Nq, D], key_value [Nk, D] -> (output [Nq, D], weights [heads, Nq, Nk]).

        ``score_bias`` [Nq, Nk] is added to the pre-softmax scores of every
        head (e.g. a spatial locality prior); rows stay stochastic.
        """
        if query.shape[-1] != self.dim or key_value.shape[-1] != self.dim:
            raise ShapeMismatch(
                f"expected feature dim {self.dim}, got {query.shape[-1]} / {key_value.shape[-1]}"
            )
        nq, nk = query.shape[0], key_value.shape[0]
        head_dim = self.dim // self.n_heads
        q = self.q_proj(query).reshape(nq, self.n_heads, head_dim).transpose(0, 1)
        k = self.k_proj(key_value).reshape(nk, self.n_heads, head_dim).transpose(0, 1)
        v = self.v_proj(key_value).reshape(nk, self.n_heads, head_dim).transpose(0, 1)
        scores = (q @ k.transpose(1, 2)) / math.sqrt(head_dim)
        if score_bias is not None:
            scores = scores + score_bias.unsqueeze(0)
        weights = torch.softmax(scores, dim=-1)
        attended = (weights @ v).transpose(0, 1).reshape(nq, self.dim)
        return self.out_proj(attended), weights

    def zero_output_projection(self) -> None:
        """Make the attention branch contribute exactly zero (residual identity)."""
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)


class Mlp(nn.Module):
    """Two-layer feed-forward block."""

    def __init__(self, dim: int, hidden: int | None = None, out_dim: int | None = None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.relu(self.fc1(x)))

    def zero_output_layer(self) -> None:
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)


class Mlp3(nn.Module):
    """Three-layer prediction MLP used by the detection head."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc3(torch.relu(self.fc2(torch.relu(self.fc1(x)))))

    def zero_output_layer(self) -> None:
        nn.init.zeros_(self.fc3.weight)
        nn.init.zeros_(self.fc3.bias)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim: int, n_heads: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        normed = self.norm1(x)
        attended, weights = self.attn(normed, normed)
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, weights
