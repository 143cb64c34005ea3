"""Dense per-frame feature maps aligned with the latent grid.

Frames are bicubic-upsampled, cut into patch×patch tiles and encoded to
`feature_dim` channels per tile. The built-in encoder is a fixed random
orthogonal projection; real encoders run elsewhere and hand their output over
as CDKT tensor files (see `load_features`).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from PIL import Image

from .errors import ContractError, NumericError
from .services import tensorfile

logger = logging.getLogger(__name__)

SOURCE_TOY = "toy"
SOURCE_FILE = "file"
SOURCE_EXTERNAL = "external"
SOURCE_CHOICES = (SOURCE_TOY, SOURCE_FILE, SOURCE_EXTERNAL)


@dataclass
class FeatureGrid:
    data: torch.Tensor  # T × D × h × w
    patch: int = 16
    source: str = SOURCE_TOY

    def __post_init__(self):
        if self.source not in SOURCE_CHOICES:
            raise ContractError(f"feature source must be one of {SOURCE_CHOICES}, got {self.source!r}")
        if self.data.dim() != 4:
            raise ContractError(f"feature grid must be (T, D, h, w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise NumericError("feature grid has non-finite entries")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[1]

    @property
    def grid(self):
        return tuple(self.data.shape[2:])

    def replace(self, data: torch.Tensor) -> "FeatureGrid":
        return FeatureGrid(data, self.patch, self.source)


@dataclass
class EncoderSpec:
    patch: int = 16
    feature_dim: int = 32
    upscale: float = 2.0
    normalize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.patch < 1:
            raise ContractError("encoder.patch must be >= 1")
        if not self.upscale > 0:
            raise ContractError("encoder.upscale must be > 0")
        if self.feature_dim < 1:
            raise ContractError("encoder.feature_dim must be >= 1")


# DINO ViT-S/16 style setting on 480×720 video: 384 × 60 × 90 per frame.
PAPER_ENCODER = EncoderSpec(patch=16, feature_dim=384, upscale=2.0)


def scaled_size(size: int, factor: float) -> int:
    return math.ceil(size * factor)


def feature_grid_shape(height: int, width: int, spec: EncoderSpec):
    """(h, w) token grid for frames of the given size; non-divisible sizes are rejected."""
    grid = []
    for axis, size in (("height", height), ("width", width)):
        scaled = scaled_size(size, spec.upscale)
        rem = scaled % spec.patch
        if rem:
            need = spec.patch - rem
            raise ContractError(
                f"upscaled {axis} {scaled} not divisible by patch {spec.patch}; "
                f"pad the frame {axis} so the upscaled size grows by {need} pixels"
            )
        grid.append(scaled // spec.patch)
    return tuple(grid)


def bicubic_upscale(frame: torch.Tensor, factor: float) -> torch.Tensor:
    """Resize C×H×W to C×⌈fH⌉×⌈fW⌉ with Pillow's bicubic filter (a = −0.5, pixel-centre aligned)."""
    if not factor > 0:
        raise ContractError(f"upscale factor must be > 0, got {factor}")
    if factor == 1:
        return frame.clone()
    _, height, width = frame.shape
    size = (scaled_size(width, factor), scaled_size(height, factor))
    arr = frame.detach().cpu().to(torch.float32).numpy()
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(c)).resize(size, Image.Resampling.BICUBIC))
        for c in arr
    ]
    return torch.from_numpy(np.stack(channels)).to(frame.dtype)


class ToyPatchEncoder:
    """Fixed orthogonal projection of flattened patches followed by per-token L2 normalisation."""

    def __init__(self, spec: EncoderSpec, channels: int = 3):
        in_dim = channels * spec.patch * spec.patch
        if spec.feature_dim > in_dim:
            raise ContractError(f"feature_dim {spec.feature_dim} exceeds patch size {in_dim} "
                                f"({channels}×{spec.patch}×{spec.patch})")
        self.spec = spec
        g = torch.Generator().manual_seed(spec.seed)
        q, _ = torch.linalg.qr(torch.randn(in_dim, spec.feature_dim, generator=g, dtype=torch.float64))
        self.projection = q.to(torch.float32)

    def __call__(self, frame: torch.Tensor) -> torch.Tensor:
        p = self.spec.patch
        patches = rearrange(frame.to(torch.float32), "c (h p1) (w p2) -> h w (c p1 p2)", p1=p, p2=p)
        feats = patches @ self.projection
        feats = feats / feats.norm(dim=-1, keepdim=True).clamp_min(1e-6)
        return rearrange(feats, "h w d -> d h w")


def normalize_features(data: torch.Tensor) -> torch.Tensor:
    """Layer norm over the feature channel of a (T, D, h, w) tensor."""
    x = rearrange(data, "t d h w -> t h w d")
    return rearrange(F.layer_norm(x, x.shape[-1:]), "t h w d -> t d h w")


def encode_frames(video: torch.Tensor, spec: EncoderSpec, encoder=None) -> FeatureGrid:
    """Encode a (T, C, H, W) video in [0, 1] frame by frame.

    `encoder` is any callable mapping an upscaled C×H'×W' frame to D×h×w; the
    toy encoder is used when omitted.
    """
    if video.dim() != 4:
        raise ContractError(f"video must be (T, C, H, W), got {tuple(video.shape)}")
    frames, channels, height, width = video.shape
    grid = feature_grid_shape(height, width, spec)
    source = SOURCE_EXTERNAL if encoder is not None else SOURCE_TOY
    encoder = encoder or ToyPatchEncoder(spec, channels)

    out = []
    for index in range(frames):
        feats = encoder(bicubic_upscale(video[index], spec.upscale))
        if tuple(feats.shape) != (spec.feature_dim, *grid):
            raise ContractError(f"encoder returned {tuple(feats.shape)} for frame {index}, "
                                f"expected {(spec.feature_dim, *grid)}")
        out.append(feats)
    data = torch.stack(out)
    if spec.normalize:
        data = normalize_features(data)
    logger.debug("encoded %d frames to %s features", frames, tuple(data.shape[1:]))
    return FeatureGrid(data, spec.patch, source)


def check_conditioning_shape(shape, frames: int, height: int, width: int, spec: EncoderSpec):
    """Raise unless `shape` is a (T, D, h, w) conditioning tensor for this video config."""
    expected = (frames, spec.feature_dim, *feature_grid_shape(height, width, spec))
    if tuple(shape) != expected:
        raise ContractError(f"conditioning shape {list(shape)} != expected {list(expected)}")
    return expected


def check_alignment(grid: FeatureGrid, latent: torch.Tensor):
    """Feature (h, w) must equal latent (h_z, w_z)."""
    for axis, got, want in zip(("height", "width"), grid.grid, latent.shape[-2:]):
        if got != want:
            raise ContractError(f"feature {axis} {got} does not match latent {axis} {want}")


def downscale_features(grid: FeatureGrid, factor: int) -> FeatureGrid:
    """Area-average pooling of each feature channel by an integer factor."""
    if factor < 1:
        raise ContractError("downscale factor must be >= 1")
    if factor == 1:
        return grid.replace(grid.data.clone())
    for axis, size in zip(("height", "width"), grid.grid):
        if size % factor:
            raise ContractError(f"feature {axis} {size} not divisible by {factor}")
    return grid.replace(F.avg_pool2d(grid.data, factor))


def upsample_features(grid: FeatureGrid, size) -> FeatureGrid:
    """Nearest-neighbour resize back to `size` = (h, w)."""
    if tuple(size) == grid.grid:
        return grid
    return grid.replace(F.interpolate(grid.data, size=tuple(size), mode="nearest"))


def load_features(path) -> FeatureGrid:
    data = tensorfile.read_tensor(path)
    if data.dim() != 4:
        raise ContractError(f"{path}: feature file holds shape {list(data.shape)}, expected (T, D, h, w)")
    return FeatureGrid(data, source=SOURCE_FILE)


def save_features(grid: FeatureGrid, path) -> None:
    tensorfile.write_tensor(path, grid.data)
