"""Modality unification: depth maps and body meshes become Gaussian sets.

Both paths voxelize their inputs, attach per-voxel attribute targets taken
from the nearest ground-truth Gaussian, and regress them with a
coordinate-preserving sparse U-Net.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    ATTR_CHANNELS,
    DEFAULT_BOUNDS,
    OFFSET,
    Camera,
    DepthMap,
    GaussianSet,
    Image,
    SmplMesh,
    SparseVoxelTensor,
    coordinate_keys,
    devoxelize,
    is_power_of_two,
)
from .nn import ParameterStore, SparseUNet, adam_step, cosine_lr

VISIBILITY_EDGES = 2.0  # occlusion tolerance in voxel edge lengths
NEAR = 0.01


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    empty: bool = False


def backproject_depth(depth: DepthMap, rgb: Image, cam: Camera) -> PointCloud:
    """Lift every pixel with positive depth to a coloured world point."""
    d = depth.depth
    if d.shape != (cam.height, cam.width) or rgb.pixels.shape[:2] != d.shape:
        raise ValueError(f"depth {d.shape} / rgb {rgb.pixels.shape[:2]} do not match camera "
                         f"{(cam.height, cam.width)}")
    rows, cols = np.nonzero(d > 0)
    if len(rows) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), True)
    z = d[rows, cols]
    pix = np.stack([cols, rows, np.ones_like(cols)], axis=1).astype(np.float64)
    rays = np.linalg.solve(cam.intrinsics, pix.T).T
    return PointCloud(cam.camera_to_world(rays * z[:, None]), rgb.pixels[rows, cols, :3].copy())


def associate_nn(points, gt: GaussianSet, ties: int = 8) -> np.ndarray:
    """Index of the nearest GT Gaussian centre per point (lowest index on exact ties)."""
    if len(gt) == 0:
        raise ValueError("ground-truth set is empty")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = min(ties, len(gt))
    dist, idx = cKDTree(gt.positions).query(points, k=k)
    dist, idx = dist.reshape(len(points), k), idx.reshape(len(points), k)
    tied = dist == dist[:, :1]
    return np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)


def associate_targets(points, gt: GaussianSet) -> GaussianSet:
    """Attributes of each point's nearest GT Gaussian, positioned at the point itself."""
    idx = associate_nn(points, gt)
    m = gt.attribute_matrix()[idx]
    m[:, 0:3] = points
    return GaussianSet.from_attribute_matrix(m, gt.bounds)


def voxelize_points(points, feats, resolution: int, bounds=DEFAULT_BOUNDS):
    """Average points and features per voxel.

    Returns ``(coords, mean_points, mean_feats)`` with coordinates sorted by key.
    """
    if not is_power_of_two(resolution):
        raise ValueError(f"resolution must be a power of two, got {resolution}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    feats = np.asarray(feats, dtype=np.float64).reshape(len(points), -1)
    lo, hi = bounds
    idx = np.clip(np.floor((points - lo) / (hi - lo) * resolution), 0, resolution - 1).astype(np.int64)
    keys, inverse, counts = np.unique(coordinate_keys(idx, resolution), return_inverse=True, return_counts=True)
    inverse = inverse.ravel()

    def mean(a):
        return np.stack([np.bincount(inverse, a[:, c], len(keys)) for c in range(a.shape[1])], axis=1) / counts[:, None]

    coords = np.stack([keys // resolution ** 2, (keys // resolution) % resolution, keys % resolution], axis=1)
    return coords, mean(points), mean(feats)


def _offsets(coords, points, resolution, bounds):
    lo, hi = bounds
    return (points - lo) / (hi - lo) * resolution - coords


def _target_feats(coords, points, gt, resolution, bounds):
    targets = associate_targets(points, gt)
    m = targets.attribute_matrix()
    m[:, OFFSET] = _offsets(coords, points, resolution, bounds)
    return m


# -- depth path ---------------------------------------------------------------


def depth_unet_input(cloud: PointCloud, resolution: int, bounds=DEFAULT_BOUNDS):
    """Sparse tensor with rgb and sub-voxel offset channels, plus voxel mean points."""
    if cloud.empty or len(cloud.points) == 0:
        raise ValueError("point cloud is empty")
    coords, pts, rgb = voxelize_points(cloud.points, cloud.colors, resolution, bounds)
    feats = np.concatenate([rgb, _offsets(coords, pts, resolution, bounds)], axis=1)
    return SparseVoxelTensor(coords, feats, resolution), pts


def depth_targets(x: SparseVoxelTensor, points, gt: GaussianSet, bounds=DEFAULT_BOUNDS) -> np.ndarray:
    return _target_feats(x.coords, points, gt, x.resolution, bounds)


class DepthUNet(SparseUNet):
    """Maps (rgb, offset) voxels to full attribute channels."""

    def __init__(self, rng, width=16):
        super().__init__(6, ATTR_CHANNELS, rng, width)


# -- body-mesh path ---------------------------------------------------------------


def color_smpl_by_projection(mesh: SmplMesh, rgb: Image, depth: DepthMap, cam: Camera,
                             tau: float | None = None, resolution: int = 64) -> tuple[SmplMesh, bool]:
    """Colour the vertices visible in ``rgb``; returns ``(mesh, any_visible)``.

    A vertex is visible when it projects inside the image onto a pixel with a
    depth measurement and lies no more than ``tau`` behind it (default two
    voxel edges at ``resolution``).  Colours are sampled bilinearly.
    """
    if tau is None:
        tau = VISIBILITY_EDGES * 2.0 / resolution
    h, w = cam.height, cam.width
    pc = cam.world_to_camera(mesh.vertices)
    z = pc[:, 2]
    front = z > NEAR
    safe_z = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / safe_z + cam.cx
    v = cam.fy * pc[:, 1] / safe_z + cam.cy
    inside = front & (u > -0.5) & (u < w - 0.5) & (v > -0.5) & (v < h - 0.5)
    col = np.clip(np.rint(u), 0, w - 1).astype(np.int64)
    row = np.clip(np.rint(v), 0, h - 1).astype(np.int64)
    measured = depth.depth[row, col]
    visible = inside & (measured > 0) & (z <= measured + tau)

    colors = np.zeros((len(z), 3))
    if visible.any():
        uu = np.clip(u[visible], 0, w - 1)
        vv = np.clip(v[visible], 0, h - 1)
        x0 = np.minimum(np.floor(uu).astype(np.int64), w - 2 if w > 1 else 0)
        y0 = np.minimum(np.floor(vv).astype(np.int64), h - 2 if h > 1 else 0)
        x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
        fx, fy = (uu - x0)[:, None], (vv - y0)[:, None]
        px = rgb.pixels[..., :3]
        colors[visible] = ((1 - fx) * (1 - fy) * px[y0, x0] + fx * (1 - fy) * px[y0, x1]
                           + (1 - fx) * fy * px[y1, x0] + fx * fy * px[y1, x1])
    return SmplMesh(mesh.vertices, mesh.faces, colors, visible), bool(visible.any())


def smpl_unet_input(mesh: SmplMesh, resolution: int, bounds=DEFAULT_BOUNDS):
    """Sparse tensor with (rgb, visible, offset) per vertex voxel, plus voxel mean points.

    Uncoloured vertices contribute zero colour; a voxel's colour averages its
    visible vertices only.
    """
    if mesh.vertex_colors is None or mesh.visible is None:
        raise ValueError("mesh has no projected colours; run color_smpl_by_projection first")
    vis = np.asarray(mesh.visible, dtype=np.float64)
    weighted = np.concatenate([mesh.vertex_colors * vis[:, None], vis[:, None]], axis=1)
    coords, pts, mean = voxelize_points(mesh.vertices, weighted, resolution, bounds)
    frac = mean[:, 3:4]
    rgb = np.where(frac > 0, mean[:, :3] / np.maximum(frac, 1e-12), 0.0)
    feats = np.concatenate([rgb, (frac > 0).astype(np.float64), _offsets(coords, pts, resolution, bounds)], axis=1)
    return SparseVoxelTensor(coords, feats, resolution), pts


class SmplUNet(SparseUNet):
    """Inpaints full attributes at every body-mesh voxel from partial colours."""

    def __init__(self, rng, width=16):
        super().__init__(7, ATTR_CHANNELS, rng, width)


# -- training -------------------------------------------------------------------


def train_attribute_unet(net: SparseUNet, samples, steps: int, lr: float = 1e-2,
                         mask=None) -> list[float]:
    """Fit ``net`` to ``[(input tensor, target feats), ...]`` with mean squared error.

    Samples are visited round-robin under a cosine learning-rate decay.
    ``mask`` optionally selects channels that enter the loss.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    store = ParameterStore(net)
    history = []
    for step in range(steps):
        x, target = samples[step % len(samples)]
        store.zero_grad()
        pred = net.forward(x).feats
        diff = pred - target
        if mask is not None:
            diff = diff * mask
        history.append(float(np.mean(diff ** 2)))
        net.backward(2.0 * diff / diff.size)
        adam_step(store, lr=cosine_lr(step, steps, lr))
    return history


def predict_gaussians(net: SparseUNet, x: SparseVoxelTensor, bounds=DEFAULT_BOUNDS) -> GaussianSet:
    out = net.forward(x)
    return devoxelize(out, bounds)
