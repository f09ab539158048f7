"""Shared transformer and conformer building blocks.

Everything here is deliberately small and torch-native. Models in this
package run on a single CPU core at toy scale, so the blocks favor
clarity over throughput tricks.
"""

import math

import torch
from torch import nn


def sinusoidal_positions(length: int, dim: int, device=None, dtype=None) -> torch.Tensor:
    """Standard fixed sin/cos position table, shape [length, dim]."""
    if dim % 2 != 0:
        raise ValueError("position dim must be even")
    pos = torch.arange(length, device=device, dtype=torch.float64)
    half = torch.arange(dim // 2, device=device, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * half / (dim // 2))
    angles = pos[:, None] * freq[None, :]
    table = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    return table.to(dtype=dtype or torch.float32)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(d),
            nn.Linear(d, d * mult),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(d * mult, d),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention with optional causal masking."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0, causal: bool = False):
        super().__init__()
        if d % heads != 0:
            raise ValueError("model dim must divide evenly across heads")
        self.norm = nn.LayerNorm(d)
        self.heads = heads
        self.causal = causal
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_padding: torch.Tensor | None = None) -> torch.Tensor:
        """x: [B, T, d]; key_padding: [B, T] bool, True where padded."""
        b, t, d = x.shape
        h = self.norm(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        dh = d // self.heads
        q = q.view(b, t, self.heads, dh).transpose(1, 2)
        k = k.view(b, t, self.heads, dh).transpose(1, 2)
        v = v.view(b, t, self.heads, dh).transpose(1, 2)
        mask = None
        if key_padding is not None:
            # broadcast to [B, 1, 1, T]: padded keys never attended
            mask = ~key_padding[:, None, None, :]
        out = nn.functional.scaled_dot_product_attention(
            q, k, v, attn_mask=mask, is_causal=self.causal
        )
        out = out.transpose(1, 2).reshape(b, t, d)
        return self.dropout(self.out(out))


class ConvModule(nn.Module):
    """Conformer convolution module: pointwise GLU, depthwise conv, pointwise."""

    def __init__(self, d: int, kernel_size: int, dropout: float = 0.0):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("depthwise kernel must be odd so the block is shape-preserving")
        self.norm = nn.LayerNorm(d)
        self.pointwise_in = nn.Conv1d(d, 2 * d, 1)
        self.depthwise = nn.Conv1d(d, d, kernel_size, padding=kernel_size // 2, groups=d)
        self.bn = nn.GroupNorm(1, d)  # batch-size-1 friendly stand-in for batchnorm
        self.pointwise_out = nn.Conv1d(d, d, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = self.norm(x).transpose(1, 2)
        h = nn.functional.glu(self.pointwise_in(h), dim=1)
        h = self.bn(self.depthwise(h))
        h = nn.functional.silu(h)
        h = self.pointwise_out(h).transpose(1, 2)
        return self.dropout(h)


class ConformerBlock(nn.Module):
    """FF/2 + MHSA + conv + FF/2 with a final layer norm."""

    def __init__(self, d: int, heads: int, conv_kernel: int = 7, dropout: float = 0.0):
        super().__init__()
        self.ff1 = FeedForward(d, dropout=dropout)
        self.attn = SelfAttention(d, heads, dropout=dropout, causal=False)
        self.conv = ConvModule(d, conv_kernel, dropout=dropout)
        self.ff2 = FeedForward(d, dropout=dropout)
        self.norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, key_padding: torch.Tensor | None = None) -> torch.Tensor:
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x, key_padding)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class TransformerBlock(nn.Module):
    """Pre-norm attention + feed-forward, causal or bidirectional."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0, causal: bool = False):
        super().__init__()
        self.attn = SelfAttention(d, heads, dropout=dropout, causal=causal)
        self.ff = FeedForward(d, dropout=dropout)

    def forward(self, x: torch.Tensor, key_padding: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(x, key_padding)
        x = x + self.ff(x)
        return x
