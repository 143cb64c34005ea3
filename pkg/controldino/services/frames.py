# controldino/services/frames.py
"""PNG frame IO. Frames are float tensors (3, H, W) in [0, 1] stored as 8-bit RGB."""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..errors import ContractError

FRAME_PATTERN = "{:06d}.png"


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Snap values to the 8-bit grid k/255 that PNG can store exactly."""
    return to_uint8(x).to(torch.float32) / 255.0


def to_uint8(x: torch.Tensor) -> torch.Tensor:
    return (x.detach().to(torch.float32).clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)


def read_frame(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise ContractError(f"frame {path} does not exist") from None
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).to(torch.float32) / 255.0


def write_frame(path, frame: torch.Tensor) -> None:
    if frame.dim() != 3 or frame.shape[0] != 3:
        raise ContractError(f"frame must be (3, H, W), got {tuple(frame.shape)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(frame).permute(1, 2, 0).numpy()).save(path, format="PNG")


def frame_paths(directory) -> list:
    return sorted(Path(directory).glob("*.png"))


def read_frames(directory) -> torch.Tensor:
    paths = frame_paths(directory)
    if not paths:
        raise ContractError(f"no PNG frames in {directory}")
    return torch.stack([read_frame(p) for p in paths])


def write_frames(directory, video: torch.Tensor, start: int = 0) -> list:
    directory = Path(directory)
    paths = []
    for i, frame in enumerate(video):
        path = directory / FRAME_PATTERN.format(start + i)
        write_frame(path, frame)
        paths.append(path)
    return paths
