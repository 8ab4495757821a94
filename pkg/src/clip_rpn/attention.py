"""Mask-guided cross-attention over rainy and non-rainy feature regions.

The predicted rain confidence splits a feature map into complementary rainy
and non-rainy parts. Each part queries the original features through
transposed (channel-axis) cross-attention, the two branches exchange
spatial/channel gates, and a final cross-attention pass refines the fused
result. Attention operates on C x C matrices, so cost is linear in spatial
size.
"""

from __future__ import annotations

import math

import torch
from einops import rearrange
from torch import nn

SPATIAL_GATE_KERNEL = 7
CHANNEL_GATE_REDUCTION = 8


def split_regions(f: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """F_r = F * mask, F_n = F * (1 - mask); the two sum back to F exactly."""
    if f.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"mask resolution {tuple(mask.shape[-2:])} does not match "
            f"features {tuple(f.shape[-2:])}"
        )
    return f * mask, f * (1.0 - mask)


def channel_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, alpha: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Transposed attention core on (B, heads, C_head, N) projections.

    Rows of the C_head x C_head attention matrix are softmax-normalized, so
    each output channel is a convex combination of value channels.
    """
    attn = torch.softmax(q @ k.transpose(-2, -1) / alpha, dim=-1)
    return attn @ v, attn


class ChannelCrossAttention(nn.Module):
    """Multi-dconv-head transposed cross-attention.

    Q, K, V come from a 1x1 conv followed by a 3x3 depthwise conv on the
    respective source. The per-head scale alpha divides the channel Gram
    matrix and stays positive through an exp parameterization.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels ({channels}) must divide by heads ({heads})")
        self.heads = heads
        head_dim = channels // heads
        self.q_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.k_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.v_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.q_dconv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)
        self.k_dconv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)
        self.v_dconv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)
        self.out_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.log_alpha = nn.Parameter(torch.full((heads, 1, 1), math.log(math.sqrt(head_dim))))

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def forward(
        self, q_src: torch.Tensor, k_src: torch.Tensor, v_src: torch.Tensor
    ) -> torch.Tensor:
        if not (q_src.shape == k_src.shape == v_src.shape):
            raise ValueError("query, key, and value sources must share a shape")
        _, _, h, w = q_src.shape
        q = self.q_dconv(self.q_proj(q_src))
        k = self.k_dconv(self.k_proj(k_src))
        v = self.v_dconv(self.v_proj(v_src))
        q, k, v = (rearrange(t, "b (hd c) h w -> b hd c (h w)", hd=self.heads) for t in (q, k, v))
        out, _ = channel_attention(q, k, v, self.alpha)
        out = rearrange(out, "b hd c (h w) -> b (hd c) h w", h=h, w=w)
        return self.out_proj(out)


class SpatialGate(nn.Module):
    """Per-pixel gate from channel-wise avg and max maps of the rainy branch."""

    def __init__(self, kernel_size: int = SPATIAL_GATE_KERNEL):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([f.mean(dim=1, keepdim=True), f.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class ChannelGate(nn.Module):
    """Per-channel gate from global avg and max pooling of the non-rainy branch.

    The two pooled descriptors pass through separate bottleneck MLPs (1x1
    convs with ReLU) and are summed before the sigmoid.
    """

    def __init__(self, channels: int, reduction: int = CHANNEL_GATE_REDUCTION):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.avg_mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, channels, 1)
        )
        self.max_mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, channels, 1)
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        avg = f.mean(dim=(2, 3), keepdim=True)
        mx = f.amax(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.avg_mlp(avg) + self.max_mlp(mx))


class MaskGuidedCrossAttention(nn.Module):
    """One routed sub-network: split, cross-attend, gate-exchange, fuse, refine.

    Both gates are computed from the un-gated post-attention branches, then
    applied: the rainy branch's spatial gate modulates the non-rainy branch
    and the non-rainy branch's channel gate modulates the rainy branch.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.ca_nonrain = ChannelCrossAttention(channels, heads)
        self.ca_rain = ChannelCrossAttention(channels, heads)
        self.ca_refine = ChannelCrossAttention(channels, heads)
        self.spatial_gate = SpatialGate()
        self.channel_gate = ChannelGate(channels)

    def forward(self, f: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        f_r, f_n = split_regions(f, mask)
        f_n_ca = self.ca_nonrain(f_n, f, f)
        f_r_ca = self.ca_rain(f_r, f, f)
        w_r = self.spatial_gate(f_r_ca)
        w_n = self.channel_gate(f_n_ca)
        f_s = f_r_ca * w_n + f_n_ca * w_r
        return self.ca_refine(f, f_s, f_s)
