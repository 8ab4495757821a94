"""U-shaped four-level window-transformer restoration backbone.

The encoder halves resolution and widens channels three times; the decoder
mirrors it with skip concatenation. At each of the three decoder levels a
mask predictor estimates rain confidence and the routed mask-guided
cross-attention sub-network transforms the features. The network predicts a
residual added to the input, so a zero output head is an identity mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .attention import MaskGuidedCrossAttention
from .perception import MaskPredictor

DOWNSAMPLE_FACTOR = 2
N_LEVELS = 4
# three halvings: inputs must divide by this
SIZE_DIVISOR = DOWNSAMPLE_FACTOR ** (N_LEVELS - 1)


@dataclass(frozen=True)
class BackboneConfig:
    level_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    blocks_per_level: tuple[int, int, int, int] = (2, 2, 2, 2)
    heads_per_level: tuple[int, int, int, int] = (1, 2, 4, 8)
    n_subnets: int = 2
    window_size: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        for name in ("level_channels", "blocks_per_level", "heads_per_level"):
            seq = getattr(self, name)
            if len(seq) != N_LEVELS:
                raise ValueError(f"{name} must list {N_LEVELS} levels, got {len(seq)}")
            if any(v < 1 for v in seq):
                raise ValueError(f"{name} entries must be positive")
        if list(self.level_channels) != sorted(self.level_channels):
            raise ValueError("channels must be non-decreasing with depth")
        for c, h in zip(self.level_channels, self.heads_per_level):
            if c % h:
                raise ValueError(f"channels {c} not divisible by heads {h}")
        if self.n_subnets < 1:
            raise ValueError("need at least one sub-network")
        if self.window_size < 1:
            raise ValueError("window size must be positive")

    @classmethod
    def desk(cls, n_subnets: int = 2) -> "BackboneConfig":
        return cls(n_subnets=n_subnets)

    @classmethod
    def full_scale(cls, n_subnets: int = 2) -> "BackboneConfig":
        return cls(
            level_channels=(64, 128, 256, 512),
            blocks_per_level=(4, 4, 4, 6),
            heads_per_level=(2, 4, 8, 16),
            n_subnets=n_subnets,
        )

    def to_dict(self) -> dict:
        return {
            "level_channels": list(self.level_channels),
            "blocks_per_level": list(self.blocks_per_level),
            "heads_per_level": list(self.heads_per_level),
            "n_subnets": self.n_subnets,
            "window_size": self.window_size,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "BackboneConfig":
        return cls(
            level_channels=tuple(record["level_channels"]),
            blocks_per_level=tuple(record["blocks_per_level"]),
            heads_per_level=tuple(record["heads_per_level"]),
            n_subnets=record["n_subnets"],
            window_size=record.get("window_size", 8),
            mlp_ratio=record.get("mlp_ratio", 4.0),
        )


class WindowAttention(nn.Module):
    """Self-attention within non-overlapping square token windows."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k, v = rearrange(
            self.qkv(tokens), "n t (three hd c) -> three n hd t c", three=3, hd=self.heads
        )
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = rearrange(attn @ v, "n hd t c -> n t (hd c)")
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm window attention + MLP with residual connections.

    Feature maps are padded (reflect) to a window multiple and cropped back,
    so any spatial size passes through unchanged. The effective window never
    exceeds the feature map, which keeps the reflect padding valid.
    """

    def __init__(self, channels: int, heads: int, window_size: int, mlp_ratio: float):
        super().__init__()
        self.window_size = window_size
        self.norm1 = nn.LayerNorm(channels)
        self.attn = WindowAttention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        hidden = int(channels * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        ws = min(self.window_size, h, w)
        pad_h = (ws - h % ws) % ws
        pad_w = (ws - w % ws) % ws
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        hp, wp = x.shape[-2:]
        t = rearrange(x, "b c (nh ws1) (nw ws2) -> (b nh nw) (ws1 ws2) c", ws1=ws, ws2=ws)
        t = t + self.attn(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        x = rearrange(
            t,
            "(b nh nw) (ws1 ws2) c -> b c (nh ws1) (nw ws2)",
            nh=hp // ws,
            nw=wp // ws,
            ws1=ws,
        )
        return x[:, :, :h, :w]


def _level_stack(cfg: BackboneConfig, level: int) -> nn.Sequential:
    return nn.Sequential(
        *[
            TransformerBlock(
                cfg.level_channels[level],
                cfg.heads_per_level[level],
                cfg.window_size,
                cfg.mlp_ratio,
            )
            for _ in range(cfg.blocks_per_level[level])
        ]
    )


class DerainModel(nn.Module):
    """Residual restoration network with routed mask-guided sub-networks.

    forward returns the restored image and the three predicted rain masks
    (shallow to deep: full, half, quarter resolution). The output is clamped
    to [0,1] only in eval mode so training gradients pass through
    out-of-range values.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.level_channels
        self.patch_embed = nn.Conv2d(3, ch[0], 3, padding=1)
        self.encoder = nn.ModuleList([_level_stack(cfg, i) for i in range(N_LEVELS)])
        self.downs = nn.ModuleList(
            [nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1) for i in range(N_LEVELS - 1)]
        )
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(N_LEVELS - 1)]
        )
        self.fuses = nn.ModuleList(
            [nn.Conv2d(2 * ch[i], ch[i], 1) for i in range(N_LEVELS - 1)]
        )
        self.decoder = nn.ModuleList([_level_stack(cfg, i) for i in range(N_LEVELS - 1)])
        # one mask head per decoder level, shared by all sub-networks
        self.mask_heads = nn.ModuleList([MaskPredictor(ch[i]) for i in range(N_LEVELS - 1)])
        self.mgca = nn.ModuleList(
            [
                nn.ModuleList(
                    [
                        MaskGuidedCrossAttention(ch[i], cfg.heads_per_level[i])
                        for _ in range(cfg.n_subnets)
                    ]
                )
                for i in range(N_LEVELS - 1)
            ]
        )
        self.head = nn.Conv2d(ch[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self, x: torch.Tensor, route: int, use_mgca: bool = True
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        _, _, h, w = x.shape
        if h % SIZE_DIVISOR or w % SIZE_DIVISOR:
            raise ValueError(f"input dims ({h}, {w}) must divide by {SIZE_DIVISOR}")
        if not 0 <= route < self.cfg.n_subnets:
            raise ValueError(f"route {route} out of range for {self.cfg.n_subnets} sub-networks")

        skips = []
        feat = self.patch_embed(x)
        for i in range(N_LEVELS - 1):
            feat = self.encoder[i](feat)
            skips.append(feat)
            feat = self.downs[i](feat)
        feat = self.encoder[-1](feat)

        masks_deep_first = []
        for i in reversed(range(N_LEVELS - 1)):
            feat = self.ups[i](feat)
            feat = self.fuses[i](torch.cat([feat, skips[i]], dim=1))
            feat = self.decoder[i](feat)
            if use_mgca:
                mask = self.mask_heads[i](feat)
                feat = self.mgca[i][route](feat, mask)
                masks_deep_first.append(mask)

        out = x + self.head(feat)
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out, masks_deep_first[::-1]

    def subnet_parameters(self, route: int) -> list[nn.Parameter]:
        params = []
        for level in self.mgca:
            params.extend(level[route].parameters())
        return params


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
