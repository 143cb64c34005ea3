"""3D conditioning: lift features to points, voxelize, render back to target views.

Camera convention: pinhole, x right, y down, z forward, pixel centres at
half-integers. Output cell (r, c) of an (h, w) render looks along the ray
through pixel ((c + 0.5)·W/w, (r + 0.5)·H/h).
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, NumericError
from .features import SOURCE_EXTERNAL, FeatureGrid

logger = logging.getLogger(__name__)

DEFAULT_VOXEL_SIZE = 0.02


@dataclass
class Camera:
    K: np.ndarray
    world_to_cam: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        K = self.K
        if K[1, 0] or K[2, 0] or K[2, 1] or K[2, 2] != 1 or not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ContractError("intrinsics must be upper-triangular with positive focal lengths and K[2, 2] = 1")
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8) or np.linalg.det(R) <= 0:
            raise ContractError("camera pose rotation is not orthonormal with det +1")
        if self.width < 1 or self.height < 1:
            raise ContractError("camera width and height must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Pixel coordinates (N×2) and camera-space depth (N) of world points."""
        cam = self.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uvw = cam @ self.K.T
            uv = uvw[:, :2] / uvw[:, 2:3]
        return uv, z

    def cell_centers(self, out_grid):
        """Pixel coordinates (u, v) of the centres of an (h, w) output grid, each of shape h×w."""
        h, w = out_grid
        u = (np.arange(w) + 0.5) * self.width / w
        v = (np.arange(h) + 0.5) * self.height / h
        return np.meshgrid(u, v)

    def pixel_to_cell(self, uv: np.ndarray, out_grid) -> np.ndarray:
        """Continuous (row, col) cell coordinates; cell centres sit on integers."""
        h, w = out_grid
        return np.stack([uv[:, 1] * h / self.height - 0.5, uv[:, 0] * w / self.width - 0.5], axis=1)

    def rays(self, out_grid):
        """World-space directions (h·w × 3) of the cell-centre rays, scaled so camera z = 1."""
        u, v = self.cell_centers(out_grid)
        pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
        cam_dirs = pix @ np.linalg.inv(self.K).T
        return cam_dirs @ self.rotation

    def to_dict(self) -> dict:
        return {
            "K": self.K.ravel().tolist(),
            "world_to_cam": self.world_to_cam.ravel().tolist(),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        try:
            return cls(np.asarray(data["K"]), np.asarray(data["world_to_cam"]), int(data["width"]), int(data["height"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ContractError(f"invalid camera record: {e}") from e


@dataclass
class FeaturePointCloud:
    positions: np.ndarray  # N × 3
    features: np.ndarray  # N × D
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise ContractError(f"{self.features.shape} features are not row-paired with "
                                f"{self.positions.shape[0]} points")
        if self.weights is None:
            self.weights = np.ones(len(self.positions))
        if not (np.isfinite(self.positions).all() and np.isfinite(self.features).all()):
            raise NumericError("point cloud has non-finite entries")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class FeatureVoxelGrid:
    voxel_size: float
    origin: np.ndarray
    indices: np.ndarray  # N × 3 int64, lexicographically sorted
    features: np.ndarray  # N × D mean features
    counts: np.ndarray  # N

    def __len__(self):
        return self.indices.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def cells(self) -> dict:
        return {tuple(int(i) for i in ijk): (f, int(c)) for ijk, f, c in zip(self.indices, self.features, self.counts)}

    def bounds(self):
        """Per-voxel (lo, hi) world-space corners."""
        lo = self.origin + self.indices * self.voxel_size
        return lo, lo + self.voxel_size


@dataclass
class RenderedConditioning:
    features: FeatureGrid  # T × D × h × w
    mask: torch.Tensor  # T × 1 × h × w, 1 = valid


def lift(grid: FeatureGrid, depth, cameras) -> FeaturePointCloud:
    """One world point per (frame, cell) with finite positive depth, carrying that cell's feature."""
    depth = np.asarray(depth.detach().cpu() if isinstance(depth, torch.Tensor) else depth, dtype=np.float64)
    frames, dim, h, w = grid.data.shape
    if depth.shape != (frames, h, w):
        raise ContractError(f"depth shape {depth.shape} does not match feature grid {(frames, h, w)}")
    if len(cameras) != frames:
        raise ContractError(f"{len(cameras)} cameras for {frames} frames")

    data = grid.data.detach().cpu().double().numpy()
    positions, features = [], []
    for t, cam in enumerate(cameras):
        d = depth[t].ravel()
        valid = np.isfinite(d) & (d > 0)
        if not valid.any():
            continue
        u, v = cam.cell_centers((h, w))
        pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)[valid]
        cam_pts = (pix @ np.linalg.inv(cam.K).T) * d[valid, None]
        positions.append((cam_pts - cam.translation) @ cam.rotation)
        features.append(data[t].reshape(dim, -1).T[valid])
    if not positions:
        return FeaturePointCloud(np.zeros((0, 3)), np.zeros((0, dim)))
    return FeaturePointCloud(np.concatenate(positions), np.concatenate(features))


def voxelize(cloud: FeaturePointCloud, voxel_size: float = DEFAULT_VOXEL_SIZE, origin=(0.0, 0.0, 0.0)) -> FeatureVoxelGrid:
    """Unweighted per-cell mean features; cell = floor((p − origin) / voxel_size)."""
    if not voxel_size > 0:
        raise ContractError(f"voxel_size must be > 0, got {voxel_size}")
    origin = np.asarray(origin, dtype=np.float64)
    dim = cloud.feature_dim
    if len(cloud) == 0:
        return FeatureVoxelGrid(voxel_size, origin, np.zeros((0, 3), np.int64), np.zeros((0, dim)), np.zeros(0, np.int64))

    idx = np.floor((cloud.positions - origin) / voxel_size).astype(np.int64)
    # canonical order: cell, then feature values, so sums do not depend on input order
    keys = tuple(cloud.features[:, d] for d in reversed(range(dim))) + (idx[:, 2], idx[:, 1], idx[:, 0])
    order = np.lexsort(keys)
    idx, feats = idx[order], cloud.features[order]

    starts = np.flatnonzero(np.r_[True, np.any(idx[1:] != idx[:-1], axis=1)])
    counts = np.diff(np.r_[starts, len(idx)])
    means = np.add.reduceat(feats, starts, axis=0) / counts[:, None]
    logger.debug("voxelized %d points into %d cells (size %.4g)", len(cloud), len(starts), voxel_size)
    return FeatureVoxelGrid(voxel_size, origin, idx[starts], means, counts)


def _candidate_cells(lo, hi, camera: Camera, out_grid) -> np.ndarray:
    """Flat indices of output cells inside the projected screen AABB of one cube."""
    h, w = out_grid
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    uv, z = camera.project(corners)
    if np.all(z <= 0):
        return np.zeros(0, dtype=np.int64)
    if np.any(z <= 0):
        return np.arange(h * w)
    rc = camera.pixel_to_cell(uv, out_grid)
    r0, c0 = np.floor(rc.min(axis=0) - 1e-6)
    r1, c1 = np.ceil(rc.max(axis=0) + 1e-6)
    r0, c0 = max(int(r0), 0), max(int(c0), 0)
    r1, c1 = min(int(r1), h - 1), min(int(c1), w - 1)
    if r0 > r1 or c0 > c1:
        return np.zeros(0, dtype=np.int64)
    rows, cols = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    return (rows * w + cols).ravel()


def ray_box_depth(origin, dirs, lo, hi) -> np.ndarray:
    """Entry parameter of each ray into its box (clamped at 0), +inf on a miss.

    `dirs` are scaled so the parameter equals camera-space depth.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tnear = np.minimum(t0, t1)
    tfar = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab ⇒ (-inf, inf), outside ⇒ nan → miss
    parallel = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tnear = np.where(parallel, np.where(inside, -np.inf, np.inf), tnear)
    tfar = np.where(parallel, np.where(inside, np.inf, -np.inf), tfar)
    enter = np.maximum(tnear.max(axis=-1), 0.0)
    leave = tfar.min(axis=-1)
    return np.where((leave >= enter) & (leave > 0), enter, np.inf)


def _resolve(cells, depths, tiebreak, values, out_grid, dim):
    """z-buffer: per cell keep the smallest depth, ties by `tiebreak` (rows of sort keys, primary last)."""
    h, w = out_grid
    feats = np.zeros((h * w, dim))
    mask = np.zeros(h * w)
    if len(cells):
        order = np.lexsort(tiebreak + (depths, cells))
        cells, order = cells[order], order
        first = np.r_[True, cells[1:] != cells[:-1]]
        feats[cells[first]] = values[order[first]]
        mask[cells[first]] = 1.0
    feats = torch.from_numpy(feats.T.reshape(dim, h, w)).float()
    return feats, torch.from_numpy(mask.reshape(1, h, w)).float()


def render_voxels(grid: FeatureVoxelGrid, camera: Camera, out_grid) -> RenderedConditioning:
    """Nearest voxel cube hit by each cell-centre ray; uncovered cells are holes.

    Screen-space AABBs of the projected cubes select candidate cells, then an
    exact ray–box test decides coverage and depth. Depth ties go to the
    lexicographically smallest (i, j, k).
    """
    h, w = out_grid
    dim = grid.feature_dim
    dirs = camera.rays(out_grid)
    origin = camera.center
    lo_all, hi_all = grid.bounds()

    cells, voxels = [], []
    for n in range(len(grid)):
        cand = _candidate_cells(lo_all[n], hi_all[n], camera, out_grid)
        cells.append(cand)
        voxels.append(np.full(cand.shape, n, dtype=np.int64))
    cells = np.concatenate(cells) if cells else np.zeros(0, np.int64)
    voxels = np.concatenate(voxels) if voxels else np.zeros(0, np.int64)

    depth = ray_box_depth(origin, dirs[cells], lo_all[voxels], hi_all[voxels]) if len(cells) else np.zeros(0)
    hit = np.isfinite(depth)
    cells, voxels, depth = cells[hit], voxels[hit], depth[hit]
    ijk = grid.indices[voxels]
    feats, mask = _resolve(cells, depth, (ijk[:, 2], ijk[:, 1], ijk[:, 0]), grid.features[voxels], out_grid, dim)
    return RenderedConditioning(FeatureGrid(feats[None], source=SOURCE_EXTERNAL), mask[None])


def _disk_offsets(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    dr, dc = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    keep = dr ** 2 + dc ** 2 <= radius ** 2
    return np.stack([dr[keep], dc[keep]], axis=1)


def render_points(cloud: FeaturePointCloud, camera: Camera, out_grid, radius_px: float = 0.0) -> RenderedConditioning:
    """z-buffered disk splats of `radius_px` output cells around each point's nearest cell; ties by point index."""
    if radius_px < 0:
        raise ContractError(f"radius_px must be >= 0, got {radius_px}")
    h, w = out_grid
    dim = cloud.feature_dim
    if len(cloud) == 0:
        feats, mask = _resolve(np.zeros(0, np.int64), np.zeros(0), (), np.zeros((0, dim)), out_grid, dim)
        return RenderedConditioning(FeatureGrid(feats[None], source=SOURCE_EXTERNAL), mask[None])

    uv, z = camera.project(cloud.positions)
    front = z > 0
    centers = np.floor(camera.pixel_to_cell(uv[front], out_grid) + 0.5).astype(np.int64)
    point_ids = np.flatnonzero(front)
    offsets = _disk_offsets(radius_px)

    rc = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
    ids = np.repeat(point_ids, len(offsets))
    inside = (rc[:, 0] >= 0) & (rc[:, 0] < h) & (rc[:, 1] >= 0) & (rc[:, 1] < w)
    rc, ids = rc[inside], ids[inside]
    cells = rc[:, 0] * w + rc[:, 1]
    feats, mask = _resolve(cells, z[ids], (ids,), cloud.features[ids], out_grid, dim)
    return RenderedConditioning(FeatureGrid(feats[None], source=SOURCE_EXTERNAL), mask[None])


def render_sequence(source, cameras, out_grid, radius_px: float = 1.0) -> RenderedConditioning:
    """Render a voxel grid or point cloud along a camera trajectory into a T-frame conditioning."""
    if not cameras:
        raise ContractError("camera trajectory is empty")
    frames = []
    for cam in cameras:
        if isinstance(source, FeatureVoxelGrid):
            frames.append(render_voxels(source, cam, out_grid))
        else:
            frames.append(render_points(source, cam, out_grid, radius_px))
    data = torch.cat([f.features.data for f in frames])
    mask = torch.cat([f.mask for f in frames])
    return RenderedConditioning(FeatureGrid(data, source=SOURCE_EXTERNAL), mask)


def mask_to_latent(mask_hi: torch.Tensor, latent_grid) -> torch.Tensor:
    """Binary hole mask → binary (T', 1, h, w) mask: area average, then ≥ 0.5 is valid.

    An H×W mask gives T' = 1. A T×H×W mask is also grouped in time like the
    latents (frame 0 alone, then groups of four) before thresholding.
    """
    m = mask_hi.to(torch.float64)
    if not torch.all((m == 0) | (m == 1)):
        raise ContractError("hole mask must be binary")
    if m.dim() == 2:
        m = m[None]
    if m.dim() != 3:
        raise ContractError(f"mask must be H×W or T×H×W, got {tuple(mask_hi.shape)}")
    frames, height, width = m.shape
    h, w = latent_grid
    if height % h or width % w:
        raise ContractError(f"mask {height}×{width} is not a multiple of latent grid {h}×{w}")
    pooled = F.avg_pool2d(m[:, None], (height // h, width // w))
    if frames > 1:
        if (frames - 1) % 4:
            raise ContractError(f"mask frame count {frames} must satisfy T ≡ 1 (mod 4)")
        rest = pooled[1:].reshape(-1, 4, 1, h, w).mean(dim=1)
        pooled = torch.cat([pooled[:1], rest])
    return (pooled >= 0.5).to(torch.float32)


def with_visibility_channel(rendered: RenderedConditioning) -> FeatureGrid:
    """Append the visibility mask as one extra conditioning channel."""
    data = torch.cat([rendered.features.data, rendered.mask.to(rendered.features.data.dtype)], dim=1)
    return rendered.features.replace(data)
