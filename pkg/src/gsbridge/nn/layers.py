"""Layers with explicit forward/backward passes.

Each layer caches what its backward needs during ``forward``; one forward
must be followed by at most one ``backward``.  Parameter gradients are
accumulated into ``Parameter.grad``.
"""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from ..core import SparseVoxelTensor
from . import functional as F
from .kernel_map import (
    conv_neighbors,
    downsample_coordinates,
    generate_coordinates,
    kernel_offsets,
    transpose_neighbors,
)


class CapacityError(RuntimeError):
    """An op would produce a grid beyond the configured maximum resolution."""


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, attr in vars(self).items():
            if isinstance(attr, Parameter):
                yield prefix + name, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(f"{prefix}{name}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        return OrderedDict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return OrderedDict((name, p.value.copy()) for name, p in self.parameters().items())

    def load_state_dict(self, arrays: dict) -> None:
        """Copy values in place; names and shapes must match exactly."""
        params = self.parameters()
        missing, extra = set(params) - set(arrays), set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"{name}: expected shape {p.value.shape}, got {value.shape}")
            p.value[...] = value


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def num_groups(channels: int, preferred: int = 8) -> int:
    return math.gcd(preferred, channels)


# -- pointwise -----------------------------------------------------------------


class Linear(Module):
    """Acts on the last axis of any array."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, *, zero_init: bool = False):
        w = np.zeros((cin, cout)) if zero_init else kaiming_uniform(rng, (cin, cout), cin)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad):
        x = self._x.reshape(-1, self._x.shape[-1])
        g = grad.reshape(-1, grad.shape[-1])
        self.weight.grad += x.T @ g
        self.bias.grad += g.sum(axis=0)
        return grad @ self.weight.value.T


class SiLU(Module):
    def forward(self, x):
        out, self._s = F.silu_fwd(x)
        self._x = x
        return out

    def backward(self, grad):
        return F.silu_bwd(grad, self._x, self._s)


class GroupNorm(Module):
    """Group normalization; ``batched`` inputs keep statistics per leading index."""

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        self.groups = num_groups(channels, groups)
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x, batched: bool = False):
        self._shape = x.shape
        x3 = x.reshape(x.shape[0], -1, x.shape[-1]) if batched else x.reshape(1, -1, x.shape[-1])
        out, self._cache = F.group_norm_fwd(x3, self.gamma.value, self.beta.value, self.groups, self.eps)
        return out.reshape(x.shape)

    def backward(self, grad):
        g3 = grad.reshape(self._cache[0].shape)
        gin, gg, gb = F.group_norm_bwd(g3, self._cache, self.gamma.value, self.groups)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gin.reshape(self._shape)


# -- sparse convolutions -----------------------------------------------------------

_NBR_CACHE: OrderedDict = OrderedDict()
_NBR_CACHE_SIZE = 512


def _cached(kind, coords_in, size_in, coords_out, kernel, stride, fn):
    key = (kind, coords_in.tobytes(), size_in, coords_out.tobytes(), kernel, stride)
    hit = _NBR_CACHE.get(key)
    if hit is not None:
        _NBR_CACHE.move_to_end(key)
        return hit
    nbr = fn(coords_in, size_in, coords_out, kernel, stride)
    _NBR_CACHE[key] = nbr
    if len(_NBR_CACHE) > _NBR_CACHE_SIZE:
        _NBR_CACHE.popitem(last=False)
    return nbr


class _SparseConvBase(Module):
    def __init__(self, cin, cout, kernel, stride, rng, zero_init=False):
        self.kernel, self.stride = kernel, stride
        k3 = len(kernel_offsets(kernel))
        shape = (k3, cin, cout)
        self.weight = Parameter(np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, k3 * cin))
        self.bias = Parameter(np.zeros(cout))

    def _apply(self, x: SparseVoxelTensor, nbr, out_coords, out_stride):
        out, self._cols = F.sparse_conv3d_fwd(x.feats, nbr, self.weight.value, self.bias.value)
        self._nbr, self._n_in = nbr, len(x)
        return SparseVoxelTensor(out_coords, out, x.resolution, out_stride)

    def backward(self, grad):
        gin, gw, gb = F.sparse_conv3d_bwd(grad, self._cols, self._nbr, self.weight.value, self._n_in)
        self.weight.grad += gw
        self.bias.grad += gb
        return gin


class SparseConv3d(_SparseConvBase):
    """Sparse convolution; stride 1 keeps coordinates, stride s floor-divides them."""

    def __init__(self, cin, cout, rng, kernel=3, stride=1, zero_init=False):
        super().__init__(cin, cout, kernel, stride, rng, zero_init)

    def forward(self, x: SparseVoxelTensor) -> SparseVoxelTensor:
        size = x.grid_size
        if self.stride == 1:
            out_coords = x.coords
        else:
            out_coords = downsample_coordinates(x.coords, self.stride, size // self.stride)
        nbr = _cached("conv", x.coords, size, out_coords, self.kernel, self.stride, conv_neighbors)
        return self._apply(x, nbr, out_coords, x.stride * self.stride)


class GenerativeTransposeConv3d(_SparseConvBase):
    """Upsampling transpose convolution that generates its own output coordinates.

    The output set is the union of every input's kernel footprint, so no
    coordinates cached from an encoder are needed.
    """

    def __init__(self, cin, cout, rng, kernel=2, stride=2, max_resolution=None, zero_init=False):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        super().__init__(cin, cout, kernel, stride, rng, zero_init)
        self.max_resolution = max_resolution

    def forward(self, x: SparseVoxelTensor) -> SparseVoxelTensor:
        if x.stride % self.stride:
            raise CapacityError(f"cannot upsample a stride-{x.stride} tensor by {self.stride}")
        out_size = x.grid_size * self.stride
        if self.max_resolution is not None and out_size > self.max_resolution:
            raise CapacityError(f"output grid {out_size} exceeds maximum {self.max_resolution}")
        out_coords = generate_coordinates(x.coords, self.kernel, self.stride, out_size)
        nbr = _cached("tconv", x.coords, x.grid_size, out_coords, self.kernel, self.stride,
                      transpose_neighbors)
        return self._apply(x, nbr, out_coords, x.stride // self.stride)


class SparseTransposeConv3d(_SparseConvBase):
    """Transpose convolution onto a given (cached) finer coordinate set."""

    def __init__(self, cin, cout, rng, kernel=2, stride=2, zero_init=False):
        super().__init__(cin, cout, kernel, stride, rng, zero_init)

    def forward(self, x: SparseVoxelTensor, target: SparseVoxelTensor) -> SparseVoxelTensor:
        nbr = _cached("tconv", x.coords, x.grid_size, target.coords, self.kernel, self.stride,
                      transpose_neighbors)
        return self._apply(x, nbr, target.coords, target.stride)


def sparse_conv3d(x: SparseVoxelTensor, weight, bias=None, stride=1):
    """Functional sparse convolution (see :class:`SparseConv3d`)."""
    kernel = round(weight.shape[0] ** (1 / 3))
    size = x.grid_size
    out_coords = x.coords if stride == 1 else downsample_coordinates(x.coords, stride, size // stride)
    nbr = conv_neighbors(x.coords, size, out_coords, kernel, stride)
    out, _ = F.sparse_conv3d_fwd(x.feats, nbr, np.asarray(weight), bias)
    return SparseVoxelTensor(out_coords, out, x.resolution, x.stride * stride)


def gen_sparse_transpose_conv3d(x: SparseVoxelTensor, weight, bias=None, stride=2):
    kernel = round(weight.shape[0] ** (1 / 3))
    out_size = x.grid_size * stride
    out_coords = generate_coordinates(x.coords, kernel, stride, out_size)
    nbr = transpose_neighbors(x.coords, x.grid_size, out_coords, kernel, stride)
    out, _ = F.sparse_conv3d_fwd(x.feats, nbr, np.asarray(weight), bias)
    return SparseVoxelTensor(out_coords, out, x.resolution, x.stride // stride)


class SparseResBlock(Module):
    """GN-SiLU-conv twice plus a (projected) skip; coordinates unchanged."""

    def __init__(self, cin, cout, rng, kernel=3):
        self.norm1 = GroupNorm(cin)
        self.act1 = SiLU()
        self.conv1 = SparseConv3d(cin, cout, rng, kernel)
        self.norm2 = GroupNorm(cout)
        self.act2 = SiLU()
        self.conv2 = SparseConv3d(cout, cout, rng, kernel)
        self.skip = Linear(cin, cout, rng) if cin != cout else None

    def forward(self, x: SparseVoxelTensor) -> SparseVoxelTensor:
        h = x.replace(self.act1.forward(self.norm1.forward(x.feats)))
        h = self.conv1.forward(h)
        h = h.replace(self.act2.forward(self.norm2.forward(h.feats)))
        h = self.conv2.forward(h)
        skip = self.skip.forward(x.feats) if self.skip else x.feats
        return h.replace(h.feats + skip)

    def backward(self, grad):
        g = self.conv2.backward(grad)
        g = self.norm2.backward(self.act2.backward(g))
        g = self.conv1.backward(g)
        g = self.norm1.backward(self.act1.backward(g))
        return g + (self.skip.backward(grad) if self.skip else grad)


class PointwiseMLP(Module):
    """GN-SiLU-Linear head applied per voxel."""

    def __init__(self, cin, cout, rng, *, zero_init=False):
        self.norm = GroupNorm(cin)
        self.act = SiLU()
        self.linear = Linear(cin, cout, rng, zero_init=zero_init)

    def forward(self, feats):
        return self.linear.forward(self.act.forward(self.norm.forward(feats)))

    def backward(self, grad):
        return self.norm.backward(self.act.backward(self.linear.backward(grad)))


def prune(x: SparseVoxelTensor, keep_logits: np.ndarray, force_keep: np.ndarray | None = None):
    """Keep voxels whose occupancy probability exceeds 0.5.

    Returns ``(pruned, keep_mask)``; gradients for the pruned tensor flow back
    to the kept rows only (see :func:`prune_backward`).  ``force_keep`` adds
    voxels regardless of their logit, used to steer training.
    """
    logits = np.asarray(keep_logits, dtype=np.float64).reshape(len(x))
    keep = logits > 0.0
    if force_keep is not None:
        keep |= force_keep
    return SparseVoxelTensor(x.coords[keep], x.feats[keep], x.resolution, x.stride), keep


def prune_backward(grad, keep):
    full = np.zeros((len(keep), grad.shape[1]), grad.dtype)
    full[keep] = grad
    return full


# -- dense layers ------------------------------------------------------------------


class DenseConv3d(Module):
    def __init__(self, cin, cout, rng, kernel=3, stride=1, zero_init=False):
        self.kernel, self.stride = kernel, stride
        k3 = kernel ** 3
        shape = (k3, cin, cout)
        self.weight = Parameter(np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, k3 * cin))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        self._shape = x.shape
        out, self._cols = F.dense_conv3d_fwd(x, self.weight.value, self.bias.value, self.stride)
        return out

    def backward(self, grad):
        gin, gw, gb = F.dense_conv3d_bwd(grad, self._cols, self._shape, self.weight.value, self.stride)
        self.weight.grad += gw
        self.bias.grad += gb
        return gin


class DenseTransposeConv3d(Module):
    def __init__(self, cin, cout, rng, kernel=2, stride=2):
        self.stride = stride
        k3 = kernel ** 3
        self.weight = Parameter(kaiming_uniform(rng, (k3, cin, cout), cin))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        self._x = x
        return F.dense_transpose_conv3d_fwd(x, self.weight.value, self.bias.value, self.stride)

    def backward(self, grad):
        gx, gw, gb = F.dense_transpose_conv3d_bwd(grad, self._x, self.weight.value, self.stride)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class DenseResBlock(Module):
    """Residual block whose hidden features receive an additive embedding."""

    def __init__(self, cin, cout, emb_dim, rng):
        self.norm1 = GroupNorm(cin)
        self.act1 = SiLU()
        self.conv1 = DenseConv3d(cin, cout, rng)
        self.emb_act = SiLU()
        self.emb = Linear(emb_dim, cout, rng)
        self.norm2 = GroupNorm(cout)
        self.act2 = SiLU()
        self.conv2 = DenseConv3d(cout, cout, rng)
        self.skip = Linear(cin, cout, rng) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1.forward(self.act1.forward(self.norm1.forward(x, batched=True)))
        h = h + self.emb.forward(self.emb_act.forward(emb))[:, None, None, None, :]
        h = self.conv2.forward(self.act2.forward(self.norm2.forward(h, batched=True)))
        skip = self.skip.forward(x) if self.skip else x
        return h + skip

    def backward(self, grad):
        g = self.norm2.backward(self.act2.backward(self.conv2.backward(grad)))
        g_emb = self.emb_act.backward(self.emb.backward(g.sum(axis=(1, 2, 3))))
        g = self.norm1.backward(self.act1.backward(self.conv1.backward(g)))
        return g + (self.skip.backward(grad) if self.skip else grad), g_emb


def sinusoidal_embedding(t, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    # Times live in [0, 1]; scale so low frequencies still vary across it.
    args = 1000.0 * t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class TimeEmbedding(Module):
    def __init__(self, dim, rng):
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.act = SiLU()
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, t):
        return self.fc2.forward(self.act.forward(self.fc1.forward(sinusoidal_embedding(t, self.dim))))

    def backward(self, grad):
        self.fc1.backward(self.act.backward(self.fc2.backward(grad)))


class SparseUNet(Module):
    """Two-level coordinate-preserving sparse U-Net mapping cin to cout channels per voxel."""

    def __init__(self, cin, cout, rng, width=16, *, zero_init_head=False):
        self.stem = Linear(cin, width, rng)
        self.enc = SparseResBlock(width, width, rng)
        self.down = SparseConv3d(width, 2 * width, rng, kernel=2, stride=2)
        self.mid = SparseResBlock(2 * width, 2 * width, rng)
        self.up = SparseTransposeConv3d(2 * width, width, rng, kernel=2, stride=2)
        self.dec = SparseResBlock(2 * width, width, rng)
        self.head = PointwiseMLP(width, cout, rng, zero_init=zero_init_head)

    def forward(self, x: SparseVoxelTensor) -> SparseVoxelTensor:
        if x.is_empty:
            raise ValueError("sparse U-Net input has no active voxels")
        h0 = self.enc.forward(x.replace(self.stem.forward(x.feats)))
        h1 = self.mid.forward(self.down.forward(h0))
        u = self.up.forward(h1, h0)
        self._width = h0.channels
        d = self.dec.forward(h0.replace(np.concatenate([h0.feats, u.feats], axis=1)))
        return d.replace(self.head.forward(d.feats))

    def backward(self, grad):
        g = self.dec.backward(self.head.backward(grad))
        g_skip, g_up = g[:, :self._width], g[:, self._width:]
        g_h1 = self.up.backward(g_up)
        g_h0 = g_skip + self.down.backward(self.mid.backward(g_h1))
        return self.stem.backward(self.enc.backward(g_h0))
