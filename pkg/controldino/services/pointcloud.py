# controldino/services/pointcloud.py
"""Point cloud and camera files for the 3D conditioning path.

Positions: binary little-endian PLY with float32 x, y, z. Features: a
row-paired CDKT sidecar. Cameras: JSON array of
{K: 9 floats, world_to_cam: 16 floats (row-major), width, height}.
"""

import json
from pathlib import Path

import numpy as np

from ..errors import ContractError, FormatError
from ..voxels import Camera, FeaturePointCloud
from . import tensorfile

_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4")])


def write_ply(path, positions: np.ndarray) -> None:
    positions = np.asarray(positions, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(positions)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    ).encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + positions.tobytes())


def read_ply(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file", offset=0)
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported", offset=0)

    count = None
    props = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["element"] and count is not None:
            raise FormatError(f"{path}: unexpected element after vertex: {line}")
        elif parts[:1] == ["property"] and count is not None:
            props.append((parts[1], parts[2]))
    if count is None or props != [("float", "x"), ("float", "y"), ("float", "z")]:
        raise FormatError(f"{path}: expected a vertex element with float x, y, z only")

    start = end + len(b"end_header\n")
    expected = count * _VERTEX.itemsize
    if len(buf) - start != expected:
        raise FormatError(f"{path}: expected {expected} bytes of vertex data, found {len(buf) - start}", offset=start)
    data = np.frombuffer(buf, dtype=_VERTEX, offset=start)
    return np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)


def read_point_cloud(ply_path, features_path) -> FeaturePointCloud:
    positions = read_ply(ply_path)
    features = tensorfile.read_tensor(features_path).numpy()
    if features.ndim != 2 or features.shape[0] != len(positions):
        raise ContractError(f"feature sidecar shape {list(features.shape)} is not row-paired with "
                            f"{len(positions)} points")
    return FeaturePointCloud(positions, features)


def write_point_cloud(ply_path, features_path, cloud: FeaturePointCloud) -> None:
    write_ply(ply_path, cloud.positions)
    tensorfile.write_tensor(features_path, cloud.features.astype(np.float32))


def read_cameras(path) -> list:
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid camera JSON ({e.msg})", offset=e.pos) from e
    if not isinstance(records, list):
        raise FormatError(f"{path}: camera file must hold a JSON array")
    return [Camera.from_dict(r) for r in records]


def write_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=2))
