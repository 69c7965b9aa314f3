"""Conformer block shared by the coarse codec and the phoneme encoder.

Macaron layout with pre-normalisation: half feed-forward, self-attention, depthwise
convolution module, half feed-forward, final LayerNorm.
"""

from __future__ import annotations

import torch
from torch import nn


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim * mult),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(dim * mult, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, dim: int, kernel_size: int = 7, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.depth_norm = nn.GroupNorm(1, dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        h = self.norm(x)
        if pad_mask is not None:
            h = h.masked_fill(pad_mask.unsqueeze(-1), 0.0)
        h = nn.functional.glu(self.pointwise_in(h.transpose(1, 2)), dim=1)
        if pad_mask is None:
            h = self.depth_norm(self.depthwise(h))
        else:
            # keep padding out of both the convolution and the normalisation statistics
            valid = (~pad_mask).unsqueeze(1).to(h.dtype)
            h = self._masked_norm(self.depthwise(h * valid), valid)
        h = nn.functional.silu(h)
        return self.dropout(self.pointwise_out(h).transpose(1, 2))


    def _masked_norm(self, h, valid):
        n = valid.sum((1, 2), keepdim=True) * h.shape[1]
        mean = (h * valid).sum((1, 2), keepdim=True) / n
        var = ((h - mean).pow(2) * valid).sum((1, 2), keepdim=True) / n
        h = (h - mean) / torch.sqrt(var + self.depth_norm.eps)
        return h * self.depth_norm.weight[:, None] + self.depth_norm.bias[:, None]


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 4, ff_mult: int = 4, kernel_size: int = 7, dropout: float = 0.0):
        super().__init__()
        self.ff1 = FeedForward(dim, ff_mult, dropout)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.conv = ConvModule(dim, kernel_size, dropout)
        self.ff2 = FeedForward(dim, ff_mult, dropout)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``pad_mask`` is (B, T) with True on padding positions."""
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        x = x + self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)[0]
        x = x + self.conv(x, pad_mask)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class ConformerStack(nn.Module):
    def __init__(self, dim: int, n_blocks: int, heads: int = 4, ff_mult: int = 4, kernel_size: int = 7,
                 dropout: float = 0.0):
        super().__init__()
        if n_blocks < 1:
            raise ValueError("need at least one conformer block")
        self.blocks = nn.ModuleList(
            [ConformerBlock(dim, heads, ff_mult, kernel_size, dropout) for _ in range(n_blocks)]
        )

    def forward(self, x, pad_mask=None):
        for block in self.blocks:
            x = block(x, pad_mask)
        return x
