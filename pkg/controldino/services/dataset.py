# controldino/services/dataset.py
"""Clip datasets on disk.

Layout::

    <root>/manifest.json                  {"clips": [{"id", "frames", "prompt"}, ...]}
    <root>/<clip_id>/frames/%06d.png
    <root>/<clip_id>/features.cdkt        optional, precomputed (T, D, h, w)
"""

import json
import logging
import math
from pathlib import Path

import torch

from ..errors import ContractError, FormatError
from ..features import FeatureGrid, load_features, save_features
from . import frames as frame_io

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def read_manifest(root) -> list:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise ContractError(f"dataset root {root} has no {MANIFEST}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e.msg})", offset=e.pos) from e
    clips = data.get("clips") if isinstance(data, dict) else None
    if not isinstance(clips, list) or not all(isinstance(c, dict) and "id" in c for c in clips):
        raise FormatError(f"{path}: expected {{\"clips\": [{{\"id\": ...}}, ...]}}")
    return clips


def write_manifest(root, clips: list) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST).write_text(json.dumps({"clips": clips}, indent=2))


def write_clip(root, clip_id: str, video: torch.Tensor, features: FeatureGrid | None = None) -> None:
    clip_dir = Path(root) / clip_id
    frame_io.write_frames(clip_dir / "frames", video)
    if features is not None:
        save_features(features, clip_dir / "features.cdkt")


def read_clip(root, clip_id: str):
    """(video, features or None) for one clip."""
    clip_dir = Path(root) / clip_id
    video = frame_io.read_frames(clip_dir / "frames")
    feature_path = clip_dir / "features.cdkt"
    features = load_features(feature_path) if feature_path.is_file() else None
    if features is not None and features.frames != len(video):
        raise ContractError(f"clip {clip_id}: {features.frames} feature frames for {len(video)} video frames")
    return video, features


def synthetic_clip(frames: int, height: int, width: int, seed: int = 0) -> torch.Tensor:
    """A coloured square drifting over a smooth gradient, in [0, 1] and on the 8-bit grid."""
    g = torch.Generator().manual_seed(seed)
    base = torch.rand(3, generator=g)
    tint = torch.rand(3, generator=g)
    velocity = (torch.rand(2, generator=g) - 0.5) * 2.0
    side = max(2, min(height, width) // 3)

    ys = torch.linspace(0.0, 1.0, height)[:, None]
    xs = torch.linspace(0.0, 1.0, width)[None, :]
    background = 0.25 + 0.5 * (base[:, None, None] * 0.5 + 0.5 * (ys + xs)[None] / 2.0)

    video = []
    for t in range(frames):
        frame = background.clone()
        cy = int((height - side) * (0.5 + 0.4 * math.sin(t * 0.5 + velocity[0].item() * 3)))
        cx = int((width - side) * (0.5 + 0.4 * math.cos(t * 0.5 + velocity[1].item() * 3)))
        frame[:, cy:cy + side, cx:cx + side] = tint[:, None, None]
        video.append(frame)
    return frame_io.quantize(torch.stack(video))



def make_synthetic_dataset(root, clips: int, frames: int, height: int, width: int, prompt: str, seed: int = 0) -> list:
    entries = []
    for i in range(clips):
        clip_id = f"synthetic_{i:04d}"
        write_clip(root, clip_id, synthetic_clip(frames, height, width, seed + i))
        entries.append({"id": clip_id, "frames": frames, "prompt": prompt})
    write_manifest(root, entries)
    logger.info("wrote %d synthetic clips to %s", clips, root)
    return entries
