"""Control branch: adapted conditioning → zero-initialised residuals for the backbone.

The branch concatenates the adapted feature maps with the noisy latent along the
channel axis, patchifies on the backbone's token grid, runs L lightweight adaLN
blocks and projects each block output back to the backbone width through a
zero-initialised linear layer Z_l. Residual l is added after backbone block l as
h_l + s·(M ⊙ Z_l(h^c_l)).
"""

import logging
from dataclasses import dataclass
from functools import partial

import torch
from einops import rearrange
from torch import nn

from .backbone import AdaLNBlock, BackboneConfig, TokenState, ToyVideoDiT, patchify
from .errors import ContractError
from .temporal import TemporalAdapter

logger = logging.getLogger(__name__)

TRAIN_SCALE = 1.0
INFERENCE_SCALE = 0.8


@dataclass
class ControlConfig:
    blocks: int = 16
    branch_width: int = 256
    residual_scale: float = INFERENCE_SCALE
    spatial_mixing: bool = True
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.blocks < 1:
            raise ContractError("control.blocks must be >= 1")
        if self.residual_scale < 0:
            raise ContractError("control.scale must be >= 0")
        if self.branch_width % self.heads:
            raise ContractError(f"control.branch_width={self.branch_width} not divisible by heads={self.heads}")


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ControlBranch(nn.Module):
    def __init__(self, cfg: ControlConfig, backbone_cfg: BackboneConfig, cond_channels: int):
        super().__init__()
        if cfg.blocks > backbone_cfg.num_blocks:
            raise ContractError(f"control.blocks={cfg.blocks} exceeds backbone.num_blocks={backbone_cfg.num_blocks}")
        self.cfg = cfg
        self.backbone_cfg = backbone_cfg
        self.cond_channels = cond_channels
        p, bw = backbone_cfg.patch, cfg.branch_width
        self.in_proj = nn.Linear((backbone_cfg.latent_channels + cond_channels) * p * p, bw)
        self.time_proj = nn.Linear(backbone_cfg.width, bw)
        self.blocks = nn.ModuleList(
            AdaLNBlock(bw, cfg.heads, cfg.mlp_ratio, bw, mixing=cfg.spatial_mixing) for _ in range(cfg.blocks)
        )
        self.zero_projs = nn.ModuleList(
            zero_module(nn.Linear(bw, backbone_cfg.width)) for _ in range(cfg.blocks)
        )

    def forward(self, z_t: torch.Tensor, cond: torch.Tensor, temb: torch.Tensor) -> list:
        """L residual TokenStates for latent `z_t` (T', C, h, w) and adapted `cond` (T', D', h, w)."""
        if cond.dim() != 4:
            raise ContractError(f"adapted conditioning must be (T', D', h, w), got {tuple(cond.shape)}")
        for axis, got, want in zip(("time", "height", "width"),
                                   (cond.shape[0], *cond.shape[2:]), (z_t.shape[0], *z_t.shape[2:])):
            if got != want:
                raise ContractError(f"conditioning {axis} {got} does not match latent {axis} {want}")
        if cond.shape[1] != self.cond_channels:
            raise ContractError(f"conditioning has {cond.shape[1]} channels, branch expects {self.cond_channels}")

        x = patchify(torch.cat([z_t, cond.to(z_t.dtype)], dim=1), self.backbone_cfg)
        h = self.in_proj(x.tokens)
        c = self.time_proj(temb)
        residuals = []
        for block, proj in zip(self.blocks, self.zero_projs):
            h = block(h, c)
            residuals.append(TokenState(proj(h), x.grid))
        return residuals


def branch_forward(branch: ControlBranch, z_t: torch.Tensor, cond: torch.Tensor, temb: torch.Tensor) -> list:
    """One residual per branch block, each already projected by its Z_l."""
    residuals = branch(z_t, cond, temb)
    if len(residuals) != branch.cfg.blocks:
        raise ContractError(f"branch returned {len(residuals)} residuals for {branch.cfg.blocks} blocks")
    return residuals


def _check_mask(mask: torch.Tensor):
    if not torch.all((mask == 0) | (mask == 1)):
        raise ContractError("control mask must be binary (entries in {0, 1})")


def apply_residuals(h: TokenState, residual: TokenState, mask: torch.Tensor | None = None,
                    scale: float = TRAIN_SCALE) -> TokenState:
    """h + s·(M ⊙ residual); M is (T', 1, h_tok, w_tok) and broadcast over channels."""
    if residual.shape != h.shape:
        raise ContractError(f"residual shape {tuple(residual.shape)} != hidden shape {tuple(h.shape)}")
    if mask is None:
        return h.replace(h.tokens + scale * residual.tokens)
    _check_mask(mask)
    t, hh, ww = h.grid
    if tuple(mask.shape) != (t, 1, hh, ww):
        raise ContractError(f"mask shape {tuple(mask.shape)} does not match token grid {h.grid}")
    m = rearrange(mask, "t 1 h w -> (t h w) 1").to(h.tokens.dtype)
    return h.replace(h.tokens + scale * (m * residual.tokens))


def conditioning_dropout(cond: torch.Tensor, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Zero the whole conditioning tensor with probability p (one draw per call)."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"dropout probability {p} outside [0, 1]")
    draw = torch.rand(1, generator=generator).item()
    return torch.zeros_like(cond) if draw < p else cond


@dataclass
class Conditioning:
    """Everything one denoiser call is conditioned on.

    `features` are raw per-frame maps (T, D, h, w) before the temporal adapter;
    None skips the control branch. `mask` is at token resolution.
    """

    features: torch.Tensor | None = None
    text_emb: torch.Tensor | None = None
    first_frame: torch.Tensor | None = None
    mask: torch.Tensor | None = None
    scale: float = TRAIN_SCALE


class ControlDinoModel(nn.Module):
    """Frozen backbone + trainable temporal adapter and control branch."""

    def __init__(self, backbone: ToyVideoDiT, adapter: TemporalAdapter, branch: ControlBranch):
        super().__init__()
        self.backbone = backbone
        self.adapter = adapter
        self.branch = branch

    def trainable_parameters(self):
        return [p for m in (self.adapter, self.branch) for p in m.parameters()]

    def residuals(self, z_t, t, features, temb=None):
        temb = self.backbone.time_embedding(t) if temb is None else temb
        adapted = self.adapter(features.to(z_t.dtype))
        return branch_forward(self.branch, z_t, adapted, temb)

    def forward(self, z_t: torch.Tensor, t: float, cond: Conditioning | None = None) -> torch.Tensor:
        if cond is None:
            return self.backbone.denoise(z_t, t)
        temb = self.backbone.time_embedding(t)
        residuals = None
        if cond.features is not None:
            residuals = self.residuals(z_t, t, cond.features, temb)
        inject = partial(apply_residuals, mask=cond.mask, scale=cond.scale)
        return self.backbone.denoise(z_t, t, cond.text_emb, cond.first_frame, residuals, inject, temb)
