"""Shared domain types and voxel conversions.

Gaussians are stored struct-of-arrays: raw (pre-activation) log-scales,
rotation quaternions (w, x, y, z) and opacity logits are kept as-is so
gradients can flow through them; the activated views are exposed as
properties.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Per-voxel attribute layout.
OFFSET = slice(0, 3)
COLOR = slice(3, 6)
LOG_SCALE = slice(6, 9)
ROTATION = slice(9, 13)
OPACITY = 13
ATTR_CHANNELS = 14

DEFAULT_BOUNDS = (-1.0, 1.0)


class LayoutError(ValueError):
    """Feature channels do not match the Gaussian attribute layout."""


class EmptySelectionWarning(UserWarning):
    """A thresholding step selected nothing."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    out = np.where(norm > 1e-12, q / np.maximum(norm, 1e-12), 0.0)
    degenerate = norm[..., 0] <= 1e-12
    if np.any(degenerate):
        out[degenerate] = (1.0, 0.0, 0.0, 0.0)
    return out


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GaussianAttributes:
    position: np.ndarray
    color: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass(frozen=True, eq=False)
class GaussianSet:
    positions: np.ndarray
    colors: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    bounds: tuple[float, float] = DEFAULT_BOUNDS

    def __post_init__(self):
        n = len(self.positions)
        for name, width in (("positions", 3), ("colors", 3), ("log_scales", 3), ("rotations", 4)):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(n, width)
            object.__setattr__(self, name, arr)
        object.__setattr__(
            self, "opacity_logits", np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        )

    @classmethod
    def empty(cls, bounds=DEFAULT_BOUNDS) -> GaussianSet:
        z = np.zeros((0, 3))
        return cls(z, z, z, np.zeros((0, 4)), np.zeros(0), bounds)

    @classmethod
    def from_activated(cls, positions, colors, scales, rotations, opacities, bounds=DEFAULT_BOUNDS):
        return cls(
            positions,
            colors,
            np.log(np.asarray(scales, dtype=np.float64)),
            normalize_quaternions(rotations),
            logit(np.clip(opacities, 1e-12, 1 - 1e-12)),
            bounds,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> GaussianAttributes:
        return GaussianAttributes(
            self.positions[i], self.colors[i], self.log_scales[i], self.rotations[i],
            float(self.opacity_logits[i]),
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternions(self.rotations)

    def subset(self, index) -> GaussianSet:
        return GaussianSet(
            self.positions[index], self.colors[index], self.log_scales[index],
            self.rotations[index], self.opacity_logits[index], self.bounds,
        )

    def attribute_matrix(self) -> np.ndarray:
        """Rows of (position, color, log-scale, quaternion, opacity-logit)."""
        return np.concatenate(
            [self.positions, self.colors, self.log_scales, self.rotations,
             self.opacity_logits[:, None]], axis=1,
        )

    @classmethod
    def from_attribute_matrix(cls, m: np.ndarray, bounds=DEFAULT_BOUNDS) -> GaussianSet:
        m = np.asarray(m, dtype=np.float64).reshape(-1, ATTR_CHANNELS)
        return cls(m[:, 0:3], m[:, 3:6], m[:, 6:9], m[:, 9:13], m[:, 13], bounds)


@dataclass(frozen=True, eq=False)
class SparseVoxelTensor:
    """Coordinates plus per-coordinate features on a cubic grid.

    ``resolution`` is the full-grid side length; a tensor at ``stride`` s
    lives on the coarser grid of side ``resolution // s``.
    """

    coords: np.ndarray
    feats: np.ndarray
    resolution: int
    stride: int = 1

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.feats)
        if feats.ndim == 1:
            feats = feats.reshape(len(coords), -1) if len(coords) else feats.reshape(0, 0)
        if len(feats) != len(coords):
            raise ValueError(f"{len(feats)} feature rows for {len(coords)} coordinates")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)

    @property
    def grid_size(self) -> int:
        return self.resolution // self.stride

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def is_empty(self) -> bool:
        return len(self.coords) == 0

    def replace(self, feats: np.ndarray) -> SparseVoxelTensor:
        return SparseVoxelTensor(self.coords, feats, self.resolution, self.stride)

    def coordinate_keys(self) -> np.ndarray:
        return coordinate_keys(self.coords, self.grid_size)

    def validate(self) -> None:
        g = self.grid_size
        if self.coords.size and (self.coords.min() < 0 or self.coords.max() >= g):
            raise ValueError(f"coordinates outside [0, {g})")
        if len(np.unique(self.coordinate_keys())) != len(self.coords):
            raise ValueError("duplicate coordinates")


@dataclass(frozen=True, eq=False)
class LatentGrid:
    """Dense latent volume, channels-last: features (r, r, r, F), occupancy (r, r, r)."""

    features: np.ndarray
    occupancy: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        occ = np.asarray(self.occupancy, dtype=np.float64)
        if feats.ndim != 4 or occ.shape != feats.shape[:3]:
            raise ValueError(f"inconsistent latent shapes {feats.shape} / {occ.shape}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "occupancy", occ)

    @property
    def resolution(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    def stacked(self) -> np.ndarray:
        """(r, r, r, F + 1) array with occupancy as the last channel."""
        return np.concatenate([self.features, self.occupancy[..., None]], axis=-1)

    @classmethod
    def from_stacked(cls, x: np.ndarray) -> LatentGrid:
        return cls(x[..., :-1], x[..., -1])


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 64
    height: int = 64

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel uv, camera depth)."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *, fov_deg=50.0,
                width=64, height=64) -> Camera:
        """Pinhole camera at ``eye`` looking at ``target``; image y points down."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2,
                   rot, -rot @ eye, width, height)


@dataclass(frozen=True, eq=False)
class Image:
    """Pixel array of shape (H, W, C); C=3 for RGB, C=1 for depth."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[..., None]
        if not np.all(np.isfinite(px)):
            raise ValueError("non-finite pixel values")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def clamped(self) -> Image:
        return Image(np.clip(self.pixels, 0.0, 1.0))


class DepthMap(Image):
    """Single-channel depth in world units; 0 marks a missing measurement."""

    @property
    def depth(self) -> np.ndarray:
        return self.pixels[..., 0]


@dataclass(frozen=True, eq=False)
class SmplMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None
    visible: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    lpips: float = 0.0
    kl: float = 5e-7
    occupancy: float = 1.0
    attr: float = 1.0
    render: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")

    @classmethod
    def with_perceptual(cls) -> LossWeights:
        """Weights 0.8, 0.2, 0.1, 5e-7, 1, 1, 1 including the perceptual term."""
        return cls(lpips=0.1)


# -- voxel conversions -------------------------------------------------------


def coordinate_keys(coords: np.ndarray, size: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] * size + c[:, 1]) * size + c[:, 2]


def sort_coordinates(coords: np.ndarray, size: int) -> np.ndarray:
    """Permutation putting coordinates in canonical (i, j, k) order."""
    return np.argsort(coordinate_keys(coords, size), kind="stable")


def _grid_position(positions, bounds, resolution):
    lo, hi = bounds
    scaled = (np.asarray(positions, dtype=np.float64) - lo) / (hi - lo) * resolution
    idx = np.clip(np.floor(scaled).astype(np.int64), 0, resolution - 1)
    return idx, scaled - idx


def voxelize(gaussians: GaussianSet, resolution: int, channels: int = ATTR_CHANNELS) -> SparseVoxelTensor:
    """Map each Gaussian to the voxel containing its center.

    When several Gaussians share a voxel, the most opaque one is kept (lowest
    index on ties).  Positions on the upper bound clamp into the last voxel.
    """
    if not is_power_of_two(resolution):
        raise ValueError(f"resolution must be a power of two, got {resolution}")
    if channels < ATTR_CHANNELS:
        raise LayoutError(f"need at least {ATTR_CHANNELS} channels, got {channels}")
    n = len(gaussians)
    if n == 0:
        return SparseVoxelTensor(np.zeros((0, 3), np.int64), np.zeros((0, channels)), resolution)
    lo, hi = gaussians.bounds
    p = gaussians.positions
    if np.any(p < lo) or np.any(p > hi):
        raise ValueError("Gaussian positions outside bounds")
    idx, offset = _grid_position(p, gaussians.bounds, resolution)
    keys = coordinate_keys(idx, resolution)
    order = np.lexsort((np.arange(n), -gaussians.opacity_logits, keys))
    first = np.ones(n, dtype=bool)
    first[1:] = keys[order][1:] != keys[order][:-1]
    keep = order[first]
    feats = np.zeros((len(keep), channels))
    feats[:, OFFSET] = offset[keep]
    feats[:, COLOR] = gaussians.colors[keep]
    feats[:, LOG_SCALE] = gaussians.log_scales[keep]
    feats[:, ROTATION] = gaussians.rotations[keep]
    feats[:, OPACITY] = gaussians.opacity_logits[keep]
    return SparseVoxelTensor(idx[keep], feats, resolution)


def voxel_positions(tensor: SparseVoxelTensor, offsets: np.ndarray, bounds=DEFAULT_BOUNDS) -> np.ndarray:
    lo, hi = bounds
    return lo + (tensor.coords + offsets) / tensor.grid_size * (hi - lo)


def devoxelize(tensor: SparseVoxelTensor, bounds=DEFAULT_BOUNDS) -> GaussianSet:
    """One Gaussian per active voxel, with normalized quaternions."""
    if tensor.is_empty:
        return GaussianSet.empty(bounds)
    if tensor.channels < ATTR_CHANNELS:
        raise LayoutError(
            f"tensor has {tensor.channels} channels; the attribute layout needs {ATTR_CHANNELS}"
        )
    f = tensor.feats
    return GaussianSet(
        voxel_positions(tensor, f[:, OFFSET], bounds),
        f[:, COLOR],
        f[:, LOG_SCALE],
        normalize_quaternions(f[:, ROTATION]),
        f[:, OPACITY],
        bounds,
    )


def densify(tensor: SparseVoxelTensor, channels: int | None = None) -> LatentGrid:
    """Scatter a sparse tensor into a dense grid with an occupancy channel."""
    channels = tensor.channels if channels is None else channels
    if tensor.channels != channels:
        raise ValueError(f"tensor has {tensor.channels} channels, expected {channels}")
    r = tensor.grid_size
    feats = np.zeros((r, r, r, channels))
    occ = np.zeros((r, r, r))
    if not tensor.is_empty:
        i, j, k = tensor.coords.T
        feats[i, j, k] = tensor.feats
        occ[i, j, k] = 1.0
    return LatentGrid(feats, occ)


def sparsify(grid: LatentGrid, threshold: float = 0.5, resolution: int | None = None) -> SparseVoxelTensor:
    """Keep cells whose occupancy exceeds ``threshold``.

    ``resolution`` is the full-grid side the result belongs to; by default
    the tensor is a stride-1 tensor on the latent grid itself.
    """
    r = grid.resolution
    coords = np.argwhere(grid.occupancy > threshold)
    if len(coords) == 0:
        warnings.warn("no cell above the occupancy threshold", EmptySelectionWarning, stacklevel=2)
    feats = grid.features[tuple(coords.T)] if len(coords) else np.zeros((0, grid.channels))
    if resolution is None:
        return SparseVoxelTensor(coords, feats, r)
    return SparseVoxelTensor(coords, feats, resolution, resolution // r)
