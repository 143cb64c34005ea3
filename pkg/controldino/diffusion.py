"""v-prediction diffusion on latent videos.

The forward process is z_t = α_t z_0 + σ_t ε with the variance-preserving cosine
schedule α_t = cos(πt/2), σ_t = sin(πt/2).

Convention: t=0 is clean data, t=1 is pure noise.

A latent video is a plain tensor of shape (T', C_z, h_z, w_z); a source clip of
T pixel frames (T ≡ 1 mod 4) maps to T' = (T - 1) / 4 + 1 latent frames.
"""

import logging
import math

import torch

from .errors import ContractError, DomainError, NumericError

logger = logging.getLogger(__name__)


def latent_frame_count(num_frames: int) -> int:
    """Latent frames for a clip of `num_frames` pixel frames (causal 4x compression)."""
    if num_frames < 1 or (num_frames - 1) % 4:
        raise ContractError(f"frame count {num_frames} must satisfy T ≡ 1 (mod 4)")
    return (num_frames - 1) // 4 + 1


def check_latent(z: torch.Tensor, name: str = "latent") -> torch.Tensor:
    """Shape and finiteness check for a single latent video."""
    if z.dim() != 4:
        raise ContractError(f"{name} must have shape (T', C, h, w), got {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise NumericError(f"{name} has non-finite entries")
    return z


class NoiseSchedule:
    """Variance-preserving cosine schedule α_t = cos(πt/2), σ_t = sin(πt/2).

    `num_steps` is the default number of sampling steps. Scalars in, scalars out;
    tensors in, tensors out.
    """

    def __init__(self, num_steps: int = 50):
        if num_steps < 1:
            raise ContractError("num_steps must be a positive integer")
        self.num_steps = int(num_steps)

    def alpha(self, t):
        if isinstance(t, torch.Tensor):
            return torch.where(t == 1, torch.zeros_like(t), torch.cos(math.pi / 2 * t))
        # cos(π/2) is 6e-17 in floating point; the endpoint must be exact
        return 0.0 if t == 1 else math.cos(math.pi / 2 * t)

    def sigma(self, t):
        if isinstance(t, torch.Tensor):
            return torch.sin(math.pi / 2 * t)
        return math.sin(math.pi / 2 * t)

    def coefficients(self, t):
        _check_t(t)
        return self.alpha(t), self.sigma(t)

    def __repr__(self):
        return f"NoiseSchedule(kind='cosine', num_steps={self.num_steps})"


def _check_t(t):
    value = float(t)
    if not (0.0 <= value <= 1.0):
        raise DomainError(f"t={value} outside [0, 1]")


def _check_pair(z0: torch.Tensor, eps: torch.Tensor):
    if z0.shape != eps.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} does not match latent shape {tuple(z0.shape)}")


def forward_diffuse(z0: torch.Tensor, eps: torch.Tensor, t: float, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = α_t z0 + σ_t eps."""
    _check_pair(z0, eps)
    a, s = sched.coefficients(t)
    return a * z0 + s * eps


def v_target(z0: torch.Tensor, eps: torch.Tensor, t: float, sched: NoiseSchedule) -> torch.Tensor:
    """v_t = α_t eps − σ_t z0."""
    _check_pair(z0, eps)
    a, s = sched.coefficients(t)
    return a * eps - s * z0


def diffusion_loss(denoiser, z0_batch, cond_batch, rng: torch.Generator, sched: NoiseSchedule | None = None,
                   t=None, eps=None) -> torch.Tensor:
    """Mean squared v-prediction error over a batch.

    `denoiser(z_t, t, c)` is called once per sample with that sample's conditioning
    `cond_batch[i]` (or None). `t` (shape B) and `eps` (one tensor per sample) may be
    supplied; otherwise t ~ U(0, 1) and eps ~ N(0, I) are drawn from `rng`.
    """
    sched = sched or NoiseSchedule()
    batch = len(z0_batch)
    if batch == 0:
        raise ContractError("empty batch")
    conds = cond_batch if cond_batch is not None else [None] * batch
    if len(conds) != batch:
        raise ContractError(f"{len(conds)} conditionings for a batch of {batch}")

    if t is None:
        t = torch.rand(batch, generator=rng, dtype=torch.float64)
    losses = []
    for i in range(batch):
        z0 = z0_batch[i]
        noise = eps[i] if eps is not None else torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
        ti = float(t[i])
        z_t = forward_diffuse(z0, noise, ti, sched)
        target = v_target(z0, noise, ti, sched)
        pred = denoiser(z_t, ti, conds[i])
        if pred.shape != z_t.shape:
            raise ContractError(f"denoiser output {tuple(pred.shape)} != input {tuple(z_t.shape)} at batch index {i}")
        if not torch.isfinite(pred).all():
            raise NumericError(f"non-finite denoiser output at batch index {i}", index=i)
        losses.append(torch.mean((pred - target) ** 2))
    return torch.stack(losses).mean()


@torch.no_grad()
def sample(denoiser, z_T: torch.Tensor, cond, steps: int | None, sched: NoiseSchedule,
           guidance_scale: float = 1.0) -> torch.Tensor:
    """Deterministic v-prediction sampler from t=1 to t=0.

    Each step predicts v, recovers x̂0 = α z − σ v and ε̂ = σ z + α v, and
    re-noises them at the next time on a uniform grid. With guidance_scale != 1
    the unconditional prediction `denoiser(z, t, None)` is mixed in.
    """
    steps = sched.num_steps if steps is None else int(steps)
    if steps < 1:
        raise ContractError("steps must be >= 1")

    z = check_latent(z_T, "z_T")
    times = [1.0 - i / steps for i in range(steps + 1)]
    for i in range(steps):
        t, s = times[i], times[i + 1]
        v = denoiser(z, t, cond)
        if guidance_scale != 1.0:
            v_uncond = denoiser(z, t, None)
            v = v_uncond + guidance_scale * (v - v_uncond)
        a_t, s_t = sched.coefficients(t)
        x0 = a_t * z - s_t * v
        eps = s_t * z + a_t * v
        a_s, s_s = sched.coefficients(s)
        z = a_s * x0 + s_s * eps
        if not torch.isfinite(z).all():
            raise NumericError(f"non-finite latent at sampler step {i}", index=i)
        logger.debug("sampler step %d/%d t=%.4f", i + 1, steps, t)
    return z
