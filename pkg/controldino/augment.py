"""Appearance-decoupled training pairs.

Features always come from the original clip; the target latents come from an
appearance-augmented copy of it. Augmentations are drawn from a mixture over
four groups (real, photometric, neural style, blur) and applied with the same
parameters to every frame.
"""

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from einops import rearrange
from PIL import ImageFilter, ImageOps

from .diffusion import latent_frame_count
from .errors import ContractError, StyleLookupError
from .features import EncoderSpec, FeatureGrid, check_alignment, encode_frames

logger = logging.getLogger(__name__)

KIND_REAL = "real"
KIND_PHOTOMETRIC = "photometric"
KIND_NEURAL_STYLE = "neural_style"
KIND_BLUR = "blur"
KIND_CHOICES = (
    (KIND_REAL, "Real"),
    (KIND_PHOTOMETRIC, "Photometric"),
    (KIND_NEURAL_STYLE, "Neural style"),
    (KIND_BLUR, "Blur"),
)
KINDS = tuple(k for k, _ in KIND_CHOICES)

PHOTOMETRIC_IDENTITY = {
    "gamma": 1.0,
    "brightness": 0.0,
    "contrast": 1.0,
    "saturation": 1.0,
    "hue": 0.0,
    "grayscale": False,
}


@dataclass
class AugmentConfig:
    weights: dict = field(default_factory=lambda: {k: 1.0 for k in KINDS})
    hue: tuple = (-0.1, 0.1)
    gamma: tuple = (0.7, 1.4)
    brightness: tuple = (-0.2, 0.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.7, 1.3)
    grayscale_p: float = 0.2
    blur_sigma: tuple = (0.5, 2.0)
    styles: tuple = ("drawing contour", "posterize")
    photometric_keyword: str = "soft light"
    blur_keyword: str = "blurry"

    def __post_init__(self):
        unknown = set(self.weights) - set(KINDS)
        if unknown:
            raise ContractError(f"unknown augmentation group(s) {sorted(unknown)}; choices are {list(KINDS)}")
        if any(w < 0 for w in self.weights.values()) or sum(self.weights.values()) <= 0:
            raise ContractError("augment.weights must be non-negative with a positive sum")
        if self.weights.get(KIND_NEURAL_STYLE, 0) > 0 and not self.styles:
            raise ContractError("neural_style group enabled with no styles")


def _check_range(video: torch.Tensor):
    if video.numel() and (video.min() < 0 or video.max() > 1):
        raise ContractError(f"pixel values must lie in [0, 1], got [{video.min():.4g}, {video.max():.4g}]")


def apply_photometric(video: torch.Tensor, params: dict) -> torch.Tensor:
    """Closed-form colour transforms on a (T, 3, H, W) video, identical for every frame.

    Parameters equal to their identity value are skipped, so identity params
    return the input unchanged.
    """
    _check_range(video)
    unknown = set(params) - set(PHOTOMETRIC_IDENTITY)
    if unknown:
        raise ContractError(f"unknown photometric parameter(s) {sorted(unknown)}")
    p = {**PHOTOMETRIC_IDENTITY, **params}
    out = video
    if p["gamma"] != 1.0:
        out = TF.adjust_gamma(out, p["gamma"])
    if p["brightness"] != 0.0:
        out = TF.adjust_brightness(out, 1.0 + p["brightness"])
    if p["contrast"] != 1.0:
        out = TF.adjust_contrast(out, p["contrast"])
    if p["saturation"] != 1.0:
        out = TF.adjust_saturation(out, p["saturation"])
    if p["hue"] != 0.0:
        out = TF.adjust_hue(out, p["hue"])
    if p["grayscale"]:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    return out.clamp(0.0, 1.0)


def blur_kernel_size(sigma: float) -> int:
    return 2 * math.ceil(3 * sigma) + 1


def apply_blur(video: torch.Tensor, sigma: float) -> torch.Tensor:
    """Gaussian blur with the same kernel on every frame; sigma = 0 is the identity."""
    if sigma < 0:
        raise ContractError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return video
    k = blur_kernel_size(sigma)
    return TF.gaussian_blur(video, [k, k], [sigma, sigma])


def _pil_hook(fn):
    def transform(frame: torch.Tensor) -> torch.Tensor:
        image = TF.to_pil_image(frame.clamp(0, 1).to(torch.float32))
        return TF.to_tensor(fn(image)).to(frame.dtype)
    return transform


class StyleRegistry:
    """Named frame transforms standing in for neural style transfer models."""

    def __init__(self):
        self._hooks = {}

    def register(self, name: str, transform):
        if not name or not name.strip():
            raise ContractError("style name must be non-empty")
        self._hooks[name] = transform
        logger.debug("registered style hook %r", name)

    def names(self):
        return sorted(self._hooks)

    def get(self, name: str):
        try:
            return self._hooks[name]
        except KeyError:
            raise StyleLookupError(
                f"unknown style {name!r}; registered styles: {', '.join(self.names()) or '(none)'}"
            ) from None

    def apply(self, video: torch.Tensor, name: str) -> torch.Tensor:
        transform = self.get(name)
        return torch.stack([transform(frame) for frame in video])


styles = StyleRegistry()
styles.register("drawing contour", _pil_hook(lambda im: im.filter(ImageFilter.CONTOUR)))
styles.register("posterize", _pil_hook(lambda im: ImageOps.posterize(im, 3)))


def register_style_hook(name: str, transform) -> None:
    styles.register(name, transform)


def apply_style(video: torch.Tensor, name: str) -> torch.Tensor:
    return styles.apply(video, name)


@dataclass
class AugmentationGroup:
    kind: str
    params: dict = field(default_factory=dict)
    keyword: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown augmentation group {self.kind!r}")

    def transform(self, video: torch.Tensor) -> torch.Tensor:
        if self.kind == KIND_PHOTOMETRIC:
            return apply_photometric(video, self.params)
        if self.kind == KIND_BLUR:
            return apply_blur(video, self.params["sigma"])
        if self.kind == KIND_NEURAL_STYLE:
            return apply_style(video, self.params["style"])
        return video

    __call__ = transform


def _uniform(generator, lo, hi) -> float:
    return lo + (hi - lo) * torch.rand(1, generator=generator, dtype=torch.float64).item()


def sample_kind(generator: torch.Generator, weights: dict | None = None) -> str:
    weights = weights or {k: 1.0 for k in KINDS}
    probs = torch.tensor([float(weights.get(k, 0.0)) for k in KINDS], dtype=torch.float64)
    return KINDS[torch.multinomial(probs, 1, generator=generator).item()]


def sample_group(generator: torch.Generator, cfg: AugmentConfig | None = None) -> AugmentationGroup:
    """Draw a group from the mixture, then its clip-wide parameters."""
    cfg = cfg or AugmentConfig()
    kind = sample_kind(generator, cfg.weights)
    if kind == KIND_PHOTOMETRIC:
        params = {
            "gamma": _uniform(generator, *cfg.gamma),
            "brightness": _uniform(generator, *cfg.brightness),
            "contrast": _uniform(generator, *cfg.contrast),
            "saturation": _uniform(generator, *cfg.saturation),
            "hue": _uniform(generator, *cfg.hue),
            "grayscale": _uniform(generator, 0.0, 1.0) < cfg.grayscale_p,
        }
        return AugmentationGroup(kind, params, cfg.photometric_keyword)
    if kind == KIND_BLUR:
        return AugmentationGroup(kind, {"sigma": _uniform(generator, *cfg.blur_sigma)}, cfg.blur_keyword)
    if kind == KIND_NEURAL_STYLE:
        style = cfg.styles[torch.randint(len(cfg.styles), (1,), generator=generator).item()]
        return AugmentationGroup(kind, {"style": style}, style)
    return AugmentationGroup(KIND_REAL)


class ToyVAE:
    """Causal 4× temporal / 8× spatial average pool plus a fixed orthonormal 3 → C_z projection.

    Frame 0 is encoded alone, later frames in groups of four. `decode` is the
    exact pseudo-inverse, so encode(decode(encode(x))) == encode(x).
    """

    def __init__(self, latent_channels: int = 4, spatial: int = 8, seed: int = 0):
        if latent_channels < 3:
            raise ContractError("toy VAE needs at least 3 latent channels")
        self.latent_channels = latent_channels
        self.spatial = spatial
        g = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(latent_channels, 3, generator=g, dtype=torch.float64))
        self.projection = q.to(torch.float32)  # C_z × 3, orthonormal columns

    def latent_shape(self, frames: int, height: int, width: int):
        for axis, size in (("height", height), ("width", width)):
            if size % self.spatial:
                raise ContractError(f"frame {axis} {size} not divisible by {self.spatial}")
        return latent_frame_count(frames), self.latent_channels, height // self.spatial, width // self.spatial

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        frames, _, height, width = video.shape
        self.latent_shape(frames, height, width)
        x = video.to(torch.float32)
        grouped = torch.cat([x[:1], rearrange(x[1:], "(t g) c h w -> t g c h w", g=4).mean(1)])
        pooled = F.avg_pool2d(grouped, self.spatial)
        return torch.einsum("zc,tchw->tzhw", self.projection, pooled)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        rgb = torch.einsum("zc,tzhw->tchw", self.projection, latent.to(torch.float32))
        rgb = F.interpolate(rgb, scale_factor=self.spatial, mode="nearest")
        return torch.cat([rgb[:1], rgb[1:].repeat_interleave(4, dim=0)])


@dataclass
class TrainingPair:
    features: FeatureGrid
    target_latents: torch.Tensor
    group: str
    style_keyword: str = ""
    prompt: str = ""
    clip_id: str = ""
    features_from_original: bool = True
    latents_from_augmented: bool = True

    def __post_init__(self):
        if not (self.features_from_original and self.latents_from_augmented):
            raise ContractError("training pair provenance: features must come from the original clip "
                                "and latents from the augmented clip")
        if bool(self.style_keyword) != (self.group != KIND_REAL):
            raise ContractError(f"style keyword {self.style_keyword!r} inconsistent with group {self.group!r}")


def build_pair(video: torch.Tensor, group: AugmentationGroup, spec: EncoderSpec, vae: ToyVAE,
               encoder=None, prompt: str = "", clip_id: str = "",
               features: FeatureGrid | None = None) -> TrainingPair:
    """Features from `video` as given (or precomputed from it); latents from `group(video)`."""
    if features is None:
        features = encode_frames(video, spec, encoder)
    elif features.frames != len(video):
        raise ContractError(f"{features.frames} feature frames for a clip of {len(video)} frames")
    augmented = group(video)
    if augmented.shape != video.shape:
        raise ContractError(f"augmentation {group.kind} changed the clip shape "
                            f"{tuple(video.shape)} → {tuple(augmented.shape)}")
    latents = vae.encode(augmented)
    check_alignment(features, latents)
    return TrainingPair(features, latents, group.kind, group.keyword, prompt, clip_id)
