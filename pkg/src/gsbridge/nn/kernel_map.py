"""Coordinate bookkeeping for sparse convolutions.

Every sparse op is expressed as a neighbor table ``nbr`` of shape
(n_out, kernel_volume): ``nbr[o, k]`` is the input row feeding output ``o``
through kernel tap ``k``, or -1.  Convolution then becomes one gather and
one matmul, and the dense/sparse variants share offset conventions:

* odd kernels are centered (offsets -k//2 .. k//2), even kernels start at 0;
* conv:       out[o] = sum_k W[k]^T x[stride * o + off_k]
* transpose:  out[stride * i + off_k] += W[k]^T x[i]
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

from ..core import coordinate_keys


@lru_cache(maxsize=None)
def _offsets(kernel: int) -> np.ndarray:
    r = range(-(kernel // 2), kernel // 2 + 1) if kernel % 2 else range(kernel)
    out = np.array(list(itertools.product(r, r, r)), dtype=np.int64)
    out.setflags(write=False)
    return out


def kernel_offsets(kernel: int) -> np.ndarray:
    return _offsets(int(kernel))


class CoordinateIndex:
    """Sorted-key lookup table from integer coordinates to row indices."""

    def __init__(self, coords: np.ndarray, size: int):
        self.size = size
        keys = coordinate_keys(coords, size)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    def lookup(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.int64)
        valid = np.all((q >= 0) & (q < self.size), axis=-1)
        out = np.full(len(q), -1, dtype=np.int64)
        if not len(self.sorted_keys) or not valid.any():
            return out
        keys = coordinate_keys(q[valid], self.size)
        pos = np.searchsorted(self.sorted_keys, keys)
        pos = np.minimum(pos, len(self.sorted_keys) - 1)
        found = self.sorted_keys[pos] == keys
        hits = np.full(len(keys), -1, dtype=np.int64)
        hits[found] = self.order[pos[found]]
        out[valid] = hits
        return out


def unique_coordinates(coords: np.ndarray, size: int) -> np.ndarray:
    """Deduplicate and put into canonical (i, j, k) order."""
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    keys = np.unique(coordinate_keys(coords, size))
    return np.stack([keys // (size * size), (keys // size) % size, keys % size], axis=1)


def downsample_coordinates(coords: np.ndarray, stride: int, out_size: int) -> np.ndarray:
    return unique_coordinates(np.floor_divide(coords, stride), out_size)


def generate_coordinates(coords: np.ndarray, kernel: int, stride: int, out_size: int) -> np.ndarray:
    """Union of every input's kernel footprint at the upsampled resolution."""
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    cand = (stride * coords[:, None, :] + kernel_offsets(kernel)[None]).reshape(-1, 3)
    inside = np.all((cand >= 0) & (cand < out_size), axis=1)
    return unique_coordinates(cand[inside], out_size)


def conv_neighbors(in_coords, in_size, out_coords, kernel, stride) -> np.ndarray:
    index = CoordinateIndex(in_coords, in_size)
    offs = kernel_offsets(kernel)
    query = stride * np.asarray(out_coords)[:, None, :] + offs[None]
    return index.lookup(query.reshape(-1, 3)).reshape(len(out_coords), len(offs))


def transpose_neighbors(in_coords, in_size, out_coords, kernel, stride) -> np.ndarray:
    index = CoordinateIndex(in_coords, in_size)
    offs = kernel_offsets(kernel)
    q = np.asarray(out_coords)[:, None, :] - offs[None]
    divisible = np.all(q % stride == 0, axis=-1)
    src = np.floor_divide(q, stride).reshape(-1, 3)
    nbr = index.lookup(src).reshape(len(out_coords), len(offs))
    nbr[~divisible] = -1
    return nbr
