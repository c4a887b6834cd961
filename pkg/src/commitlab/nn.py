"""Small pre-norm Transformer encoder shared by the backbone and the controller."""

import math

import torch
from torch import nn


class EncoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, ff_dim, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.GELU(), nn.Linear(ff_dim, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.drop(a)
        return x + self.drop(self.ff(self.norm2(x)))


class Encoder(nn.Module):
    """Stack of blocks; ``forward`` returns every block's output."""

    def __init__(self, d_model, n_layers, n_heads, ff_dim, dropout):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderBlock(d_model, n_heads, ff_dim, dropout) for _ in range(n_layers)
        )

    def forward(self, x, pad_mask=None):
        outs = []
        for block in self.blocks:
            x = block(x, pad_mask)
            outs.append(x)
        return outs


def sinusoidal_encoding(positions, dim):
    """Fixed sinusoidal encoding of integer positions, shape (len(positions), dim)."""
    positions = torch.as_tensor(positions, dtype=torch.float64).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = positions * freqs
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if enc.shape[1] < dim:
        enc = torch.cat([enc, torch.zeros(enc.shape[0], dim - enc.shape[1], dtype=enc.dtype)], dim=1)
    return enc
