"""Causal temporal adapter: per-frame conditioning maps → latent-aligned frames.

Two stride-2 stages of CausalConv3D → GroupNorm → SiLU compress T = 49 frames
to 25 and then 13, the temporal grid of the video latents. Temporal padding is
applied on the past side only, so output frame j of a stage sees input frames
≤ stride·j and, after both stages, frames ≤ 4j.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .errors import ContractError

PAD_REPLICATE = "replicate"
PAD_ZEROS = "zeros"
PAD_CHOICES = (PAD_REPLICATE, PAD_ZEROS)


@dataclass
class CausalConvSpec:
    in_channels: int
    out_channels: int
    kernel_t: int = 3
    stride_t: int = 2
    spatial_kernel: int = 3
    norm_groups: int = 8
    pad_mode: str = PAD_REPLICATE
    # Normalising across time mixes future frames into past outputs (non-causal).
    norm_over_time: bool = False

    def __post_init__(self):
        if self.stride_t not in (1, 2):
            raise ContractError(f"stride_t must be 1 or 2, got {self.stride_t}")
        if self.kernel_t < 1:
            raise ContractError("kernel_t must be >= 1")
        if self.spatial_kernel % 2 == 0:
            raise ContractError("spatial_kernel must be odd to preserve h, w")
        if self.out_channels % self.norm_groups:
            raise ContractError(f"out_channels={self.out_channels} not divisible by norm_groups={self.norm_groups}")
        if self.pad_mode not in PAD_CHOICES:
            raise ContractError(f"pad_mode must be one of {PAD_CHOICES}")

    @property
    def temporal_padding(self) -> int:
        return self.kernel_t - 1

    def output_frames(self, frames: int) -> int:
        if frames < 1 or (frames - 1) % self.stride_t:
            raise ContractError(f"T={frames} must satisfy T ≡ 1 (mod {self.stride_t})")
        return (frames - 1) // self.stride_t + 1


class CausalStage(nn.Module):
    """SiLU(GroupNorm(CausalConv3D(x))) on a (T, D, h, w) sequence."""

    def __init__(self, spec: CausalConvSpec):
        super().__init__()
        self.spec = spec
        k = spec.spatial_kernel
        self.conv = nn.Conv3d(
            spec.in_channels, spec.out_channels,
            kernel_size=(spec.kernel_t, k, k),
            stride=(spec.stride_t, 1, 1),
            padding=(0, k // 2, k // 2),
        )
        self.norm = nn.GroupNorm(spec.norm_groups, spec.out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        spec.output_frames(x.shape[0])
        x = rearrange(x, "t d h w -> 1 d t h w")
        pad = spec.temporal_padding
        if pad:
            if spec.pad_mode == PAD_REPLICATE:
                past = x[:, :, :1].expand(-1, -1, pad, -1, -1)
            else:
                past = torch.zeros_like(x[:, :, :1]).expand(-1, -1, pad, -1, -1)
            x = torch.cat([past, x], dim=2)
        y = self.conv(x)
        if spec.norm_over_time:
            y = rearrange(self.norm(y), "1 d t h w -> t d h w")
        else:
            # each frame is its own GroupNorm sample
            y = self.norm(rearrange(y, "1 d t h w -> t d h w"))
        return F.silu(y)


@dataclass
class AdapterConfig:
    channels: tuple = (256, 256)
    kernel_t: int = 3
    spatial_kernel: int = 3
    norm_groups: int = 8
    pad_mode: str = PAD_REPLICATE
    norm_over_time: bool = False

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


class TemporalAdapter(nn.Module):
    """Two causal stride-2 stages: T → (T−1)/2+1 → (T−1)/4+1."""

    def __init__(self, feature_dim: int, cfg: AdapterConfig | None = None):
        super().__init__()
        cfg = cfg or AdapterConfig()
        self.cfg = cfg
        if len(cfg.channels) != 2:
            raise ContractError("adapter.channels must list two stage widths")
        stages = []
        in_channels = feature_dim
        for out_channels in cfg.channels:
            stages.append(CausalStage(CausalConvSpec(
                in_channels, out_channels,
                kernel_t=cfg.kernel_t, stride_t=2, spatial_kernel=cfg.spatial_kernel,
                norm_groups=cfg.norm_groups, pad_mode=cfg.pad_mode, norm_over_time=cfg.norm_over_time,
            )))
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        frames = features.shape[0]
        if (frames - 1) % 4:
            raise ContractError(f"conditioning length T={frames} must satisfy T ≡ 1 (mod 4)")
        x = features
        for stage in self.stages:
            x = stage(x)
        return x
