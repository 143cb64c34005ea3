"""Training loop for the adapter and control branch on top of a frozen backbone."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import ToyTextEncoder, build_backbone, freeze
from .control import TRAIN_SCALE, Conditioning, ControlBranch, ControlDinoModel, conditioning_dropout
from .diffusion import NoiseSchedule, diffusion_loss
from .errors import ContractError, FormatError, NumericError
from .features import FeatureGrid, downscale_features, upsample_features
from .pca import TAIL_DROP_KS, FeatureMatrix, ProjectionBasis, project_features, tail_drop_basis
from .rollout import build_prompt
from .services import checkpoint
from .temporal import TemporalAdapter
from .utils import module_checksum

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_peak: float = 2e-4
    betas: tuple = (0.9, 0.95)
    warmup_steps: int = 500
    batch_size: int = 8
    grad_clip: float = 1.0
    cond_dropout: float = 0.1
    total_steps: int = 2000
    weight_decay: float = 0.0
    seed: int = 0
    tail_drop: bool = False
    tail_drop_components: int = 64
    feature_downscale: int = 1  # >1 pools features by this factor and re-upsamples (nearest) before the branch

    def __post_init__(self):
        if not self.lr_peak > 0:
            raise ContractError("train.lr_peak must be > 0")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ContractError("train.cond_dropout must lie in [0, 1]")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ContractError(f"train.warmup_steps={self.warmup_steps} must be < total_steps={self.total_steps}")
        if self.batch_size < 1:
            raise ContractError("train.batch_size must be >= 1")
        if not self.grad_clip > 0:
            raise ContractError("train.grad_clip must be > 0")
        if self.feature_downscale < 1:
            raise ContractError("train.feature_downscale must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    tau = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * (1.0 + math.cos(math.pi * tau)) / 2.0


def build_model(run) -> ControlDinoModel:
    """Frozen backbone plus freshly initialised adapter and branch, seeded by run.train.seed."""
    backbone = freeze(build_backbone(run.backbone))
    feature_dim = run.encoder.feature_dim
    if run.train.tail_drop:
        feature_dim = min(run.train.tail_drop_components, feature_dim)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(run.train.seed)
        adapter = TemporalAdapter(feature_dim, run.adapter)
        branch = ControlBranch(run.control, run.backbone, adapter.cfg.out_channels)
    return ControlDinoModel(backbone, adapter, branch)


def build_optimizer(model: ControlDinoModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.trainable_parameters(), lr=lr_at(0, cfg), betas=tuple(cfg.betas),
                             weight_decay=cfg.weight_decay)


@dataclass
class TrainState:
    model: ControlDinoModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    basis: ProjectionBasis | None = None  # tail-drop basis, recomputed from data on resume

    @classmethod
    def create(cls, run) -> "TrainState":
        model = build_model(run)
        return cls(model, build_optimizer(model, run.train))


def fit_tail_drop_basis(grids, cfg: TrainConfig) -> ProjectionBasis:
    rows = np.concatenate([FeatureMatrix.from_grid(g).rows for g in grids])
    full = min(cfg.tail_drop_components, rows.shape[1])
    _check_tail_drop_width(full)
    return tail_drop_basis(FeatureMatrix(rows), full, full=full)


def _check_tail_drop_width(k: int):
    if k < min(TAIL_DROP_KS):
        raise ContractError(f"tail drop needs at least {min(TAIL_DROP_KS)} feature components, got {k}")


def degrade_features(grid: FeatureGrid, factor: int) -> FeatureGrid:
    """Pool by `factor` and resize back (nearest) to the original grid."""
    if factor == 1:
        return grid
    return upsample_features(downscale_features(grid, factor), grid.grid)


def _global_norm(params) -> float:
    grads = [p.grad.detach().double().norm() for p in params if p.grad is not None]
    return float(torch.stack(grads).norm()) if grads else 0.0


def train_step(state: TrainState, batch: list, cfg: TrainConfig, generator: torch.Generator,
               sched: NoiseSchedule | None = None):
    """One AdamW update of adapter + branch; returns (state, metrics)."""
    model = state.model
    if not getattr(model.backbone, "frozen", False):
        raise ContractError("backbone must be frozen before training")
    if not batch:
        raise ContractError("empty batch")
    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    rng = np.random.default_rng(int(torch.randint(2 ** 31, (1,), generator=generator)))
    conds, dropped = [], 0
    text_encoder = ToyTextEncoder(model.backbone.cfg.text_dim)
    for pair in batch:
        grid = degrade_features(pair.features, cfg.feature_downscale)
        if state.basis is not None:
            _check_tail_drop_width(state.basis.k)
            kept = state.basis.prefix(int(rng.choice([k for k in TAIL_DROP_KS if k <= state.basis.k])))
            grid = project_features(grid, kept, pad_to=state.basis.k)
        feats = conditioning_dropout(grid.data, cfg.cond_dropout, generator)
        dropped += feats is not grid.data
        prompt = build_prompt(pair.prompt, pair.style_keyword) if pair.prompt else pair.style_keyword
        conds.append(Conditioning(
            features=feats,
            text_emb=text_encoder(prompt),
            first_frame=pair.target_latents[:1],
            scale=TRAIN_SCALE,
        ))

    params = model.trainable_parameters()
    state.optimizer.zero_grad(set_to_none=True)
    try:
        loss = diffusion_loss(model, [p.target_latents for p in batch], conds, generator, sched)
    except NumericError as e:
        clip = batch[e.index].clip_id if e.index is not None else "?"
        raise NumericError(f"step {state.step}: {e} (clip {clip!r})", index=e.index) from e
    if not torch.isfinite(loss):
        clips = [p.clip_id for p in batch]
        raise NumericError(f"non-finite loss at step {state.step} for clips {clips}", index=state.step)

    loss.backward()
    raw = nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    post = _global_norm(params)
    state.optimizer.step()
    state.step += 1
    metrics = {
        "step": state.step,
        "loss": float(loss.detach()),
        "grad_norm": post,
        "grad_norm_raw": float(raw),
        "lr": lr,
        "dropped": int(dropped),
    }
    return state, metrics


class MetricsLog:
    """JSON-lines metrics file, one object per logged step."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = None

    def __enter__(self):
        self._fh = self.path.open("a", encoding="utf-8")
        return self

    def __exit__(self, *exc):
        self._fh.close()
        self._fh = None

    def write(self, metrics: dict):
        record = {k: metrics[k] for k in ("step", "loss", "grad_norm", "lr")}
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()


def read_metrics(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_checkpoint(state: TrainState, path, run) -> None:
    tensors = {}
    for prefix, module in (("adapter", state.model.adapter), ("branch", state.model.branch)):
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value.detach().cpu()
    opt = state.optimizer.state_dict()
    for idx, slots in opt["state"].items():
        for key, value in slots.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value, dtype=torch.float32).detach().cpu()
    manifest = {
        "step": state.step,
        "config": run.to_dict(),
        "backbone_checksum": module_checksum(state.model.backbone),
        "param_groups": opt["param_groups"],
    }
    checkpoint.write_archive(path, manifest, tensors)
    logger.info("saved checkpoint at step %d to %s", state.step, path)


def load_checkpoint(path, run_cls=None):
    """(TrainState, RunConfig) from an archive; the archive is fully verified first."""
    from .config import RunConfig

    run_cls = run_cls or RunConfig
    manifest, tensors = checkpoint.read_archive(path)
    run = run_cls.from_dict(manifest["config"])
    state = TrainState.create(run)
    if module_checksum(state.model.backbone) != manifest["backbone_checksum"]:
        raise FormatError(f"{path}: backbone does not match the checkpoint's backbone checksum")

    for prefix, module in (("adapter", state.model.adapter), ("branch", state.model.branch)):
        own = module.state_dict()
        loaded = {}
        for name, value in own.items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise FormatError(f"checkpoint lacks tensor {key}", tensor=key)
            if tensors[key].shape != value.shape:
                raise FormatError(f"tensor {key} has shape {list(tensors[key].shape)}, "
                                  f"model expects {list(value.shape)}", tensor=key)
            loaded[name] = tensors[key]
        module.load_state_dict(loaded)

    opt_state = {}
    for key, value in tensors.items():
        if key.startswith("optim."):
            _, idx, slot = key.split(".", 2)
            opt_state.setdefault(int(idx), {})[slot] = value
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": manifest["param_groups"]})
    state.step = int(manifest["step"])
    return state, run
