"""Toy frozen video transformer denoiser.

The backbone predicts v from a noisy latent video, the timestep, a text embedding
and (optionally) the first latent frame. Hidden states after every block are
exposed through `residuals` / `inject` so the control branch can steer it.
"""

import logging
import math
from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from .errors import ContractError
from .utils import text_seed

logger = logging.getLogger(__name__)

# The frozen base model this toy stands in for. Documentation only: never built.
PAPER_BACKBONE = {
    "num_blocks": 42,
    "width": 3072,
    "patch": 2,
    "heads": 48,
    "text_dim": 4096,
    "latent_channels": 16,
}


@dataclass
class BackboneConfig:
    num_blocks: int = 8
    width: int = 64
    patch: int = 2
    heads: int = 4
    text_dim: int = 16
    latent_channels: int = 4
    mlp_ratio: int = 2
    max_frames: int = 16
    max_grid: int = 32
    pos_embed: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ContractError("backbone.num_blocks must be >= 1")
        if self.patch < 1:
            raise ContractError("backbone.patch must be >= 1")
        if self.width % self.heads:
            raise ContractError(f"backbone.width={self.width} not divisible by heads={self.heads}")

    def token_grid(self, frames: int, height: int, width: int):
        """(T', h_tok, w_tok) for a latent of the given size."""
        for axis, size in (("height", height), ("width", width)):
            if size % self.patch:
                raise ContractError(f"latent {axis} {size} not divisible by patch {self.patch}")
        return frames, height // self.patch, width // self.patch


@dataclass
class TokenState:
    """Tokens (N_tok × channels) laid out on a (T', h_tok, w_tok) grid."""

    tokens: torch.Tensor
    grid: tuple

    def __post_init__(self):
        t, h, w = self.grid
        if self.tokens.dim() != 2 or self.tokens.shape[0] != t * h * w:
            raise ContractError(f"{tuple(self.tokens.shape)} tokens do not factor as grid {self.grid}")

    @property
    def shape(self):
        return self.tokens.shape

    def replace(self, tokens: torch.Tensor) -> "TokenState":
        return TokenState(tokens, self.grid)


def patchify(z: torch.Tensor, cfg: BackboneConfig) -> TokenState:
    """(T', C, h, w) → raw patch tokens of C·p² channels."""
    if z.dim() != 4:
        raise ContractError(f"expected (T', C, h, w), got {tuple(z.shape)}")
    grid = cfg.token_grid(z.shape[0], z.shape[2], z.shape[3])
    p = cfg.patch
    tokens = rearrange(z, "t c (h p1) (w p2) -> (t h w) (c p1 p2)", p1=p, p2=p)
    return TokenState(tokens, grid)


def unpatchify(tok: TokenState, cfg: BackboneConfig) -> torch.Tensor:
    t, h, w = tok.grid
    p = cfg.patch
    if tok.tokens.shape[1] % (p * p):
        raise ContractError(f"token channels {tok.tokens.shape[1]} not divisible by patch area {p * p}")
    return rearrange(tok.tokens, "(t h w) (c p1 p2) -> t c (h p1) (w p2)", t=t, h=h, w=w, p1=p, p2=p)


def timestep_embedding(t: float, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of t ∈ [0, 1] (scaled to the usual 0..1000 range)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = 1000.0 * float(t) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=torch.float64)])
    return emb.to(dtype)


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x):
        q, k, v = rearrange(self.qkv(x), "n (three h d) -> three h n d", three=3, h=self.heads)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return self.out(rearrange(att @ v, "h n d -> n (h d)"))


class AdaLNBlock(nn.Module):
    """Pre-norm transformer block with adaptive layer-norm shift/scale.

    With `mixing=False` the attention sublayer is dropped and the block acts on
    each token independently.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: int, cond_dim: int, mixing: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = SelfAttention(width, heads) if mixing else None
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * mlp_ratio),
            nn.GELU(approximate="tanh"),
            nn.Linear(width * mlp_ratio, width),
        )
        self.modulation = nn.Linear(cond_dim, 4 * width)

    def forward(self, x, c):
        shift1, scale1, shift2, scale2 = self.modulation(c).chunk(4, dim=-1)
        if self.attn is not None:
            x = x + self.attn(self.norm1(x) * (1 + scale1) + shift1)
        return x + self.mlp(self.norm2(x) * (1 + scale2) + shift2)


def _add_residual(h: TokenState, r: TokenState) -> TokenState:
    return h.replace(h.tokens + r.tokens)


class ToyVideoDiT(nn.Module):
    """Small video DiT: first-frame channel concat, adaLN text/time conditioning."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c, p, width = cfg.latent_channels, cfg.patch, cfg.width
        # noisy latent + replicated first frame + first-frame indicator
        self.embed = nn.Linear((2 * c + 1) * p * p, width)
        self.pos_t = nn.Parameter(0.02 * torch.randn(cfg.max_frames, width))
        self.pos_h = nn.Parameter(0.02 * torch.randn(cfg.max_grid, width))
        self.pos_w = nn.Parameter(0.02 * torch.randn(cfg.max_grid, width))
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.text_proj = nn.Linear(cfg.text_dim, width)
        self.blocks = nn.ModuleList(
            AdaLNBlock(width, cfg.heads, cfg.mlp_ratio, width) for _ in range(cfg.num_blocks)
        )
        self.head = nn.Linear(width, c * p * p)
        self.frozen = False

    def time_embedding(self, t: float) -> torch.Tensor:
        dtype = self.embed.weight.dtype
        return self.time_mlp(timestep_embedding(t, self.cfg.width, dtype))

    def _positions(self, grid):
        t, h, w = grid
        if t > self.cfg.max_frames or h > self.cfg.max_grid or w > self.cfg.max_grid:
            raise ContractError(f"token grid {grid} exceeds positional table "
                                f"({self.cfg.max_frames}, {self.cfg.max_grid}, {self.cfg.max_grid})")
        pos = self.pos_t[:t, None, None] + self.pos_h[None, :h, None] + self.pos_w[None, None, :w]
        return rearrange(pos, "t h w d -> (t h w) d")

    def embed_tokens(self, z_t: torch.Tensor, first_frame: torch.Tensor | None) -> TokenState:
        frames = z_t.shape[0]
        indicator = torch.zeros(frames, 1, *z_t.shape[2:], dtype=z_t.dtype)
        if first_frame is None:
            ff = torch.zeros_like(z_t)
        else:
            if first_frame.shape[1:] != z_t.shape[1:]:
                raise ContractError(f"first frame {tuple(first_frame.shape)} does not match latent {tuple(z_t.shape)}")
            ff = first_frame[:1].expand_as(z_t)
            indicator[0] = 1.0
        raw = patchify(torch.cat([z_t, ff, indicator], dim=1), self.cfg)
        tokens = self.embed(raw.tokens)
        if self.cfg.pos_embed:
            tokens = tokens + self._positions(raw.grid)
        return raw.replace(tokens)

    def denoise(self, z_t, t, text_emb=None, first_frame=None, residuals=None, inject=None, temb=None):
        """v-prediction for one latent video.

        residuals[l] (TokenState or None) is merged into the hidden state right
        after block l by `inject(h, r)`; addition by default.
        """
        if residuals is not None and len(residuals) > self.cfg.num_blocks:
            raise ContractError(f"{len(residuals)} residuals for {self.cfg.num_blocks} blocks")
        inject = inject or _add_residual
        if text_emb is None:
            text_emb = torch.zeros(self.cfg.text_dim, dtype=z_t.dtype)
        if temb is None:
            temb = self.time_embedding(t)
        c = temb + self.text_proj(text_emb)

        h = self.embed_tokens(z_t, first_frame)
        for index, block in enumerate(self.blocks):
            h = h.replace(block(h.tokens, c))
            if residuals is not None and index < len(residuals) and residuals[index] is not None:
                r = residuals[index]
                if r.shape != h.shape:
                    raise ContractError(f"residual for block {index} has shape {tuple(r.shape)}, "
                                        f"hidden state is {tuple(h.shape)}")
                h = inject(h, r)
        return unpatchify(h.replace(self.head(h.tokens)), self.cfg)

    def forward(self, z_t, t, text_emb=None, first_frame=None, residuals=None):
        return self.denoise(z_t, t, text_emb, first_frame, residuals)


def build_backbone(cfg: BackboneConfig) -> ToyVideoDiT:
    """Deterministically initialised backbone (seeded by cfg.seed, global RNG untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return ToyVideoDiT(cfg)


def freeze(model: nn.Module) -> nn.Module:
    for param in model.parameters():
        param.requires_grad_(False)
    model.eval()
    model.frozen = True
    logger.debug("froze %s (%d parameters)", type(model).__name__, sum(p.numel() for p in model.parameters()))
    return model


class ToyTextEncoder:
    """Hashed bag-of-words prompt embedding; identical prompts give identical vectors."""

    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, prompt: str, dtype=torch.float32) -> torch.Tensor:
        words = prompt.lower().replace(",", " ").split()
        if not words:
            return torch.zeros(self.dim, dtype=dtype)
        vectors = []
        for word in words:
            g = torch.Generator().manual_seed(text_seed(word))
            vectors.append(torch.randn(self.dim, generator=g, dtype=torch.float64))
        return (torch.stack(vectors).sum(0) / math.sqrt(len(words))).to(dtype)
