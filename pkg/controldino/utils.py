# controldino/utils.py
import hashlib

import numpy as np
import torch


def tensor_digest(t) -> str:
    """sha256 of a tensor's raw little-endian bytes (dtype and shape included)."""
    arr = t.detach().cpu().contiguous().numpy() if isinstance(t, torch.Tensor) else np.ascontiguousarray(t)
    h = hashlib.sha256()
    h.update(str(arr.dtype.str).encode())
    h.update(str(tuple(arr.shape)).encode())
    h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    """Digest over every named parameter and buffer of a module."""
    h = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor_digest(value).encode())
    return h.hexdigest()


def step_generator(seed: int, step: int) -> torch.Generator:
    """Generator for one step of a seeded run; resuming at `step` reproduces it."""
    g = torch.Generator()
    g.manual_seed(int(seed) * 1_000_003 + int(step))
    return g


def text_seed(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:15], 16)
