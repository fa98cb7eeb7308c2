"""Forward/backward kernels as plain functions.

Dense volumes are channels-last: (batch, depth, height, width, channels).
Weights of every convolution are (kernel_volume, in_channels, out_channels)
with taps ordered as :func:`kernel_offsets`.
"""
from __future__ import annotations

import numpy as np

from .kernel_map import kernel_offsets


def silu_fwd(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return x * s, s


def silu_bwd(grad, x, s):
    return grad * (s * (1.0 + x * (1.0 - s)))


# -- sparse gather/matmul ------------------------------------------------------


def gather_matmul_fwd(feats, nbr, weight):
    n_in, c = feats.shape
    padded = np.concatenate([feats, np.zeros((1, c), feats.dtype)])
    cols = padded[nbr].reshape(len(nbr), -1)
    return cols @ weight.reshape(-1, weight.shape[-1]), cols


def gather_matmul_bwd(grad, cols, nbr, weight, n_in):
    k, c, o = weight.shape
    grad_w = (cols.T @ grad).reshape(k, c, o)
    gcols = (grad @ weight.reshape(-1, o).T).reshape(len(nbr), k, c)
    gpad = np.zeros((n_in + 1, c), grad.dtype)
    for tap in range(k):
        # Each tap maps outputs to distinct inputs; -1 lands in the scratch row.
        gpad[nbr[:, tap]] += gcols[:, tap]
    return gpad[:n_in], grad_w


def sparse_conv3d_fwd(feats, nbr, weight, bias=None):
    out, cols = gather_matmul_fwd(feats, nbr, weight)
    if bias is not None:
        out += bias
    return out, cols


def sparse_conv3d_bwd(grad, cols, nbr, weight, n_in):
    grad_in, grad_w = gather_matmul_bwd(grad, cols, nbr, weight, n_in)
    return grad_in, grad_w, grad.sum(axis=0)


# -- dense convolution -----------------------------------------------------------


def _dense_geometry(spatial, kernel, stride):
    offs = kernel_offsets(kernel)
    lo, hi = int(offs.min()), int(offs.max())
    out_sp = tuple(-(-n // stride) for n in spatial)
    after = tuple(max(0, stride * (o - 1) + hi - (n - 1)) for n, o in zip(spatial, out_sp))
    return offs, lo, out_sp, after


def dense_conv3d_fwd(x, weight, bias=None, stride=1):
    """Zero-padded cross-correlation; output side is ceil(n / stride)."""
    k = round(weight.shape[0] ** (1 / 3))
    if k ** 3 != weight.shape[0] or weight.shape[1] != x.shape[-1]:
        raise ValueError(f"weight {weight.shape} incompatible with input {x.shape}")
    offs, lo, out_sp, after = _dense_geometry(x.shape[1:4], k, stride)
    pad = [(0, 0)] + [(-lo, a) for a in after] + [(0, 0)]
    xp = np.pad(x, pad)
    views = []
    for off in offs:
        sl = tuple(slice(int(d) - lo, int(d) - lo + stride * (n - 1) + 1, stride) for d, n in zip(off, out_sp))
        views.append(xp[(slice(None),) + sl])
    cols = np.stack(views, axis=-2)
    out = cols.reshape(*cols.shape[:4], -1) @ weight.reshape(-1, weight.shape[-1])
    if bias is not None:
        out += bias
    return out, cols


def dense_conv3d_bwd(grad, cols, x_shape, weight, stride=1):
    k3, c, o = weight.shape
    k = round(k3 ** (1 / 3))
    offs, lo, out_sp, after = _dense_geometry(x_shape[1:4], k, stride)
    flat = cols.reshape(-1, k3 * c)
    g2 = grad.reshape(-1, o)
    grad_w = (flat.T @ g2).reshape(k3, c, o)
    gcols = (g2 @ weight.reshape(-1, o).T).reshape(*grad.shape[:4], k3, c)
    padded_shape = (x_shape[0],) + tuple(n - lo + a for n, a in zip(x_shape[1:4], after)) + (c,)
    gxp = np.zeros(padded_shape, grad.dtype)
    for tap, off in enumerate(offs):
        sl = tuple(slice(int(d) - lo, int(d) - lo + stride * (n - 1) + 1, stride) for d, n in zip(off, out_sp))
        gxp[(slice(None),) + sl] += gcols[..., tap, :]
    crop = (slice(None),) + tuple(slice(-lo, -lo + n) for n in x_shape[1:4])
    return gxp[crop], grad_w, g2.sum(axis=0)


def dense_transpose_conv3d_fwd(x, weight, bias=None, stride=2):
    """out[stride*i + off] += W[off]^T x[i]; output side is stride * n."""
    k3, c, o = weight.shape
    k = round(k3 ** (1 / 3))
    offs = kernel_offsets(k)
    lo, hi = int(offs.min()), int(offs.max())
    b, *sp, _ = x.shape
    full = tuple(stride * (n - 1) + hi - lo + 1 for n in sp)
    buf = np.zeros((b,) + full + (o,), x.dtype)
    for tap, off in enumerate(offs):
        sl = tuple(slice(int(d) - lo, int(d) - lo + stride * (n - 1) + 1, stride) for d, n in zip(off, sp))
        buf[(slice(None),) + sl] += x @ weight[tap]
    crop = (slice(None),) + tuple(slice(-lo, -lo + stride * n) for n in sp)
    out = buf[crop].copy()
    if bias is not None:
        out += bias
    return out


def dense_transpose_conv3d_bwd(grad, x, weight, stride=2):
    k3, c, o = weight.shape
    k = round(k3 ** (1 / 3))
    offs = kernel_offsets(k)
    lo, hi = int(offs.min()), int(offs.max())
    b, *sp, _ = x.shape
    full = tuple(stride * (n - 1) + hi - lo + 1 for n in sp)
    buf = np.zeros((b,) + full + (o,), grad.dtype)
    buf[(slice(None),) + tuple(slice(-lo, -lo + stride * n) for n in sp)] = grad
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(weight)
    xf = x.reshape(-1, c)
    for tap, off in enumerate(offs):
        sl = tuple(slice(int(d) - lo, int(d) - lo + stride * (n - 1) + 1, stride) for d, n in zip(off, sp))
        g = buf[(slice(None),) + sl]
        grad_x += g @ weight[tap].T
        grad_w[tap] = xf.T @ g.reshape(-1, o)
    return grad_x, grad_w, grad.reshape(-1, o).sum(axis=0)


# -- group normalization ---------------------------------------------------------


def group_norm_fwd(x, gamma, beta, groups, eps=1e-5):
    """x: (batch, points, channels); statistics per sample and channel group."""
    b, m, c = x.shape
    xg = x.reshape(b, m, groups, c // groups)
    mean = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(b, m, c)
    return xhat * gamma + beta, (xhat, inv)


def group_norm_bwd(grad, cache, gamma, groups):
    xhat, inv = cache
    b, m, c = grad.shape
    grad_gamma = (grad * xhat).sum(axis=(0, 1))
    grad_beta = grad.sum(axis=(0, 1))
    gx = (grad * gamma).reshape(b, m, groups, c // groups)
    xh = xhat.reshape(b, m, groups, c // groups)
    n = m * (c // groups)
    if n == 0:
        return np.zeros_like(grad), grad_gamma, grad_beta
    mean_g = gx.mean(axis=(1, 3), keepdims=True)
    mean_gx = (gx * xh).mean(axis=(1, 3), keepdims=True)
    gin = inv * (gx - mean_g - xh * mean_gx)
    return gin.reshape(b, m, c), grad_gamma, grad_beta
