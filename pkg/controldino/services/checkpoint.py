# controldino/services/checkpoint.py
"""Checkpoint archives: a zip with ``manifest.json`` and one CDKT member per tensor.

The manifest lists every tensor's name, shape and sha256. `read_archive`
verifies all of them before returning anything, so a damaged archive never
yields partial state.
"""

import hashlib
import json
import os
import zipfile
from pathlib import Path

import torch

from ..errors import ContractError, FormatError
from . import tensorfile

ARCHIVE_FORMAT = "controldino-checkpoint/1"
MANIFEST = "manifest.json"


def _member(name: str) -> str:
    return f"tensors/{name}.cdkt"


def write_archive(path, manifest: dict, tensors: dict) -> None:
    entries = []
    blobs = {}
    for name, value in tensors.items():
        if value.dtype != torch.float32:
            raise ContractError(f"checkpoint tensor {name} has dtype {value.dtype}; only float32 is stored")
        blob = tensorfile.encode_tensor(value)
        blobs[name] = blob
        entries.append({"name": name, "shape": list(value.shape), "sha256": hashlib.sha256(blob).hexdigest()})

    manifest = {**manifest, "format": ARCHIVE_FORMAT, "tensors": entries}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(MANIFEST, json.dumps(manifest, indent=2, sort_keys=True))
        for name, blob in blobs.items():
            zf.writestr(_member(name), blob)
    os.replace(tmp, path)


def read_archive(path):
    """(manifest, {name: tensor}) after checking every member against the manifest."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as e:
        raise FormatError(f"{path}: not a checkpoint archive ({e})", offset=0) from e

    with zf:
        try:
            manifest = json.loads(zf.read(MANIFEST))
        except KeyError:
            raise FormatError(f"{path}: archive has no {MANIFEST}") from None
        except (json.JSONDecodeError, UnicodeDecodeError, zipfile.BadZipFile) as e:
            raise FormatError(f"{path}: unreadable manifest ({e})") from e
        if manifest.get("format") != ARCHIVE_FORMAT:
            raise FormatError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")

        tensors = {}
        for entry in manifest.get("tensors", []):
            name = entry["name"]
            try:
                blob = zf.read(_member(name))
            except KeyError:
                raise FormatError(f"missing tensor {name}", tensor=name) from None
            except zipfile.BadZipFile as e:
                raise FormatError(f"corrupted tensor {name}: {e}", tensor=name) from e
            if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise FormatError(f"checksum mismatch for tensor {name}", tensor=name)
            try:
                arr = tensorfile.decode_tensor(blob)
            except FormatError as e:
                raise FormatError(f"tensor {name}: {e}", offset=e.offset, tensor=name) from e
            if list(arr.shape) != entry["shape"]:
                raise FormatError(f"tensor {name} has shape {list(arr.shape)}, manifest says {entry['shape']}",
                                  tensor=name)
            tensors[name] = torch.from_numpy(arr)
    return manifest, tensors
