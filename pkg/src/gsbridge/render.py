"""CPU Gaussian splatting with an analytic backward pass, plus image losses.

Pixel (i, j) of an image is centered at u = j, v = i.  Gaussians are
sorted front to back by camera depth (ties broken by attribute values so
the order does not depend on input order) and composited per pixel:

    C = sum_i c_i a_i T_i + T_final * background,   T_i = prod_{j<i} (1 - a_j)

A Gaussian is skipped once the transmittance in front of it drops below
1e-4.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianSet, sigmoid

SCREEN_BLUR = 0.3
MIN_TRANSMITTANCE = 1e-4
NEAR = 0.01
DEPTH_COVERAGE = 0.5


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotations."""
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def _rotation_matrix_vjp(qn: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a (N, 3, 3) gradient on the rotation back onto the unit quaternion."""
    w, x, y, z = qn.T
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


@dataclass
class GaussianGradients:
    positions: np.ndarray
    colors: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 where coverage is below DEPTH_COVERAGE
    alpha: np.ndarray  # (H, W) accumulated opacity
    all_culled: bool
    _cache: dict | None = None


def _canonical_order(g: GaussianSet, z: np.ndarray) -> np.ndarray:
    keys = [g.opacity_logits, *g.rotations.T[::-1], *g.log_scales.T[::-1], *g.colors.T[::-1],
            *g.positions.T[::-1], z]
    return np.lexsort(keys)


def _pairs(u, v, radius, width, height):
    """Enumerate (gaussian, pixel) pairs inside each Gaussian's pixel box."""
    x0 = np.clip(np.floor(u - radius), 0, width).astype(np.int64)
    x1 = np.clip(np.ceil(u + radius) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.floor(v - radius), 0, height).astype(np.int64)
    y1 = np.clip(np.ceil(v + radius) + 1, 0, height).astype(np.int64)
    bw, bh = np.maximum(x1 - x0, 0), np.maximum(y1 - y0, 0)
    counts = bw * bh
    gid = np.repeat(np.arange(len(u)), counts)
    start = np.cumsum(counts) - counts
    local = np.arange(counts.sum()) - np.repeat(start, counts)
    px = x0[gid] + local % np.maximum(bw[gid], 1)
    py = y0[gid] + local // np.maximum(bw[gid], 1)
    return gid, py * width + px


def rasterize(gaussians: GaussianSet, camera: Camera, background=(1.0, 1.0, 1.0),
              cutoff: float | None = 4.0, keep_cache: bool = True) -> RenderOutput:
    """Splat ``gaussians`` into ``camera``.

    ``cutoff`` limits each splat to the pixels within that many screen-space
    standard deviations; ``None`` evaluates every pixel (exact, slower).
    """
    h, w = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)
    npix = h * w
    pc = camera.world_to_camera(gaussians.positions)
    visible = pc[:, 2] > NEAR
    if not visible.any():
        return RenderOutput(np.broadcast_to(bg, (h, w, 3)).copy(), np.zeros((h, w)), np.zeros((h, w)), True)

    g = gaussians.subset(np.flatnonzero(visible))
    idx_visible = np.flatnonzero(visible)
    pc = pc[visible]
    order = _canonical_order(g, pc[:, 2])
    g, pc, idx_visible = g.subset(order), pc[order], idx_visible[order]
    n = len(g)

    qnorm = np.linalg.norm(g.rotations, axis=1)
    qn = g.rotations / qnorm[:, None]
    rot = quaternion_to_matrix(qn)
    scale = np.exp(g.log_scales)
    m = rot * scale[:, None, :]
    cov = m @ m.transpose(0, 2, 1)

    x, y, z = pc.T
    fx, fy = camera.fx, camera.fy
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z ** 2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z ** 2
    tmat = jac @ camera.rotation
    cov2 = tmat @ cov @ tmat.transpose(0, 2, 1) + SCREEN_BLUR * np.eye(2)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    u = fx * x / z + camera.cx
    v = fy * y / z + camera.cy
    opacity = sigmoid(g.opacity_logits)

    if cutoff is None:
        gid = np.repeat(np.arange(n), npix)
        pix = np.tile(np.arange(npix), n)
    else:
        lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        gid, pix = _pairs(u, v, cutoff * np.sqrt(lam), w, h)
    dx = (pix % w) - u[gid]
    dy = (pix // w) - v[gid]
    power = -0.5 * (conic[gid, 0] * dx * dx + 2 * conic[gid, 1] * dx * dy + conic[gid, 2] * dy * dy)
    if cutoff is not None:
        inside = power >= -0.5 * cutoff * cutoff
        gid, pix, dx, dy, power = gid[inside], pix[inside], dx[inside], dy[inside], power[inside]
    gauss = np.exp(power)
    alpha = opacity[gid] * gauss

    # Segment pairs per pixel, front to back; gid is already depth-ranked.
    srt = np.lexsort((gid, pix))
    gid, pix, dx, dy, gauss, alpha = gid[srt], pix[srt], dx[srt], dy[srt], gauss[srt], alpha[srt]
    pixels, start, counts = np.unique(pix, return_index=True, return_counts=True)
    slot = np.arange(len(pix)) - np.repeat(start, counts)
    row = np.repeat(np.arange(len(pixels)), counts)
    width_max = int(counts.max()) if len(counts) else 0

    log_keep = np.zeros((len(pixels), width_max + 1))
    log_keep[row, slot] = np.log1p(-alpha)
    cum = np.cumsum(log_keep, axis=1)
    t_before = np.exp(cum[row, slot] - log_keep[row, slot])
    included = t_before >= MIN_TRANSMITTANCE
    weight = np.where(included, alpha * t_before, 0.0)
    log_included = np.where(included, np.log1p(-alpha), 0.0)
    t_final_px = np.exp(np.bincount(row, log_included, minlength=len(pixels)))

    colors = g.colors[gid]
    image = np.broadcast_to(bg, (npix, 3)).copy()
    acc = np.zeros((npix, 3))
    for ch in range(3):
        acc[pixels, ch] = np.bincount(row, weight * colors[:, ch], minlength=len(pixels))
    image[pixels] = acc[pixels] + t_final_px[:, None] * bg
    alpha_map = np.zeros(npix)
    alpha_map[pixels] = 1.0 - t_final_px
    wz = np.zeros(npix)
    wz[pixels] = np.bincount(row, weight * z[gid], minlength=len(pixels))
    depth = np.where(alpha_map >= DEPTH_COVERAGE, wz / np.maximum(alpha_map, 1e-12), 0.0)

    cache = None
    if keep_cache:
        cache = dict(
            n_total=len(gaussians), idx=idx_visible, g=g, qn=qn, qnorm=qnorm, rot=rot, scale=scale,
            m=m, cov=cov, pc=pc, jac=jac, tmat=tmat, conic=conic, opacity=opacity, camera=camera,
            gid=gid, pix=pix, dx=dx, dy=dy, gauss=gauss, alpha=alpha, row=row, slot=slot,
            pixels=pixels, width_max=width_max, t_before=t_before, included=included,
            weight=weight, t_final_px=t_final_px, bg=bg,
        )
    return RenderOutput(image.reshape(h, w, 3), depth.reshape(h, w), alpha_map.reshape(h, w), False, cache)


def rasterize_backward(out: RenderOutput, grad_image: np.ndarray) -> GaussianGradients:
    """Gradients of sum(grad_image * image) with respect to the raw attributes."""
    if out.all_culled or out._cache is None:
        raise ValueError("no cached forward state (all Gaussians culled or keep_cache=False)")
    cc = out._cache
    n_total, g = cc["n_total"], cc["g"]
    n = len(g)
    grads = GaussianGradients(np.zeros((n_total, 3)), np.zeros((n_total, 3)), np.zeros((n_total, 3)),
                              np.zeros((n_total, 4)), np.zeros(n_total))
    gimg = np.asarray(grad_image, dtype=np.float64).reshape(-1, 3)
    gid, row, slot, pixels = cc["gid"], cc["row"], cc["slot"], cc["pixels"]
    alpha, t_before, included, weight = cc["alpha"], cc["t_before"], cc["included"], cc["weight"]
    gpix = gimg[pixels][row]  # per pair
    colors = g.colors[gid]

    grad_colors = np.zeros((n, 3))
    for ch in range(3):
        grad_colors[:, ch] = np.bincount(gid, weight * gpix[:, ch], minlength=n)

    # Light arriving from behind each pair: later weighted colors plus background.
    behind = np.zeros((len(pixels), cc["width_max"] + 1, 3))
    behind[row, slot] = weight[:, None] * colors
    suffix = np.cumsum(behind[:, ::-1], axis=1)[:, ::-1]
    after = suffix[row, slot] - behind[row, slot] + cc["t_final_px"][row, None] * cc["bg"]
    g_alpha = np.where(
        included,
        np.sum(gpix * (t_before[:, None] * colors - after / (1.0 - alpha)[:, None]), axis=1),
        0.0,
    )

    opacity = cc["opacity"]
    grad_ologit = np.bincount(gid, g_alpha * cc["gauss"], minlength=n) * opacity * (1 - opacity)
    g_power = g_alpha * alpha
    dx, dy = cc["dx"], cc["dy"]
    conic = cc["conic"]
    # Full symmetric gradient w.r.t. the conic matrix.
    gA = np.stack([
        np.bincount(gid, -0.5 * g_power * dx * dx, minlength=n),
        np.bincount(gid, -0.5 * g_power * dx * dy, minlength=n),
        np.bincount(gid, -0.5 * g_power * dy * dy, minlength=n),
    ], axis=1)
    g_dx = -g_power * (conic[gid, 0] * dx + conic[gid, 1] * dy)
    g_dy = -g_power * (conic[gid, 1] * dx + conic[gid, 2] * dy)
    g_u = -np.bincount(gid, g_dx, minlength=n)
    g_v = -np.bincount(gid, g_dy, minlength=n)

    amat = np.stack([np.stack([conic[:, 0], conic[:, 1]], -1), np.stack([conic[:, 1], conic[:, 2]], -1)], 1)
    gamat = np.stack([np.stack([gA[:, 0], gA[:, 1]], -1), np.stack([gA[:, 1], gA[:, 2]], -1)], 1)
    g_cov2 = -amat @ gamat @ amat
    tmat, cov = cc["tmat"], cc["cov"]
    g_cov = tmat.transpose(0, 2, 1) @ g_cov2 @ tmat
    g_tmat = 2 * g_cov2 @ tmat @ cov
    cam = cc["camera"]
    g_jac = g_tmat @ cam.rotation.T

    x, y, z = cc["pc"].T
    fx, fy = cam.fx, cam.fy
    g_pc = np.zeros((n, 3))
    g_pc[:, 0] = g_u * fx / z + g_jac[:, 0, 2] * (-fx / z ** 2)
    g_pc[:, 1] = g_v * fy / z + g_jac[:, 1, 2] * (-fy / z ** 2)
    g_pc[:, 2] = (g_u * (-fx * x / z ** 2) + g_v * (-fy * y / z ** 2)
                  + g_jac[:, 0, 0] * (-fx / z ** 2) + g_jac[:, 0, 2] * (2 * fx * x / z ** 3)
                  + g_jac[:, 1, 1] * (-fy / z ** 2) + g_jac[:, 1, 2] * (2 * fy * y / z ** 3))
    grad_pos = g_pc @ cam.rotation

    m, scale, rot, qn = cc["m"], cc["scale"], cc["rot"], cc["qn"]
    g_m = 2 * g_cov @ m
    g_rot = g_m * scale[:, None, :]
    g_scale = np.sum(g_m * rot, axis=1)
    g_qn = _rotation_matrix_vjp(qn, g_rot)
    g_q = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / cc["qnorm"][:, None]

    idx = cc["idx"]
    grads.positions[idx] = grad_pos
    grads.colors[idx] = grad_colors
    grads.log_scales[idx] = g_scale * scale
    grads.rotations[idx] = g_q
    grads.opacity_logits[idx] = grad_ologit
    return grads


# -- image metrics -------------------------------------------------------------------

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_same(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def l1(a, b) -> float:
    a, b = _check_same(a, b)
    return float(np.mean(np.abs(a - b)))


def mse(a, b) -> float:
    a, b = _check_same(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, cap: float = 100.0) -> float:
    err = mse(a, b)
    if err < 1e-10:
        return cap
    return float(min(cap, -10.0 * np.log10(err)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    """Separable valid filtering over axes 0 and 1 of (H, W, C)."""
    k = len(w)
    h, wd = img.shape[:2]
    tmp = sum(w[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(w[i] * tmp[:, i:wd - k + 1 + i] for i in range(k))


def _filter_valid_adjoint(g, w, shape):
    k = len(w)
    h, wd = shape[:2]
    tmp = np.zeros((g.shape[0], wd) + g.shape[2:])
    for i in range(k):
        tmp[:, i:wd - k + 1 + i] += w[i] * g
    out = np.zeros((h, wd) + g.shape[2:])
    for i in range(k):
        out[i:h - k + 1 + i] += w[i] * tmp
    return out


def _ssim_terms(a, b, window):
    w = gaussian_window(window)
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    m_aa, m_bb, m_ab = _filter_valid(a * a, w), _filter_valid(b * b, w), _filter_valid(a * b, w)
    var_a, var_b, cov = m_aa - mu_a ** 2, m_bb - mu_b ** 2, m_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * cov + SSIM_C2
    d1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return w, mu_a, mu_b, n1, n2, d1, d2


def ssim(a, b, window: int = 11) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), unit dynamic range."""
    a, b = _check_same(a, b)
    if min(a.shape[:2]) < window:
        raise ValueError(f"images smaller than the {window}px SSIM window")
    _, _, _, n1, n2, d1, d2 = _ssim_terms(a, b, window)
    return float(np.mean(n1 * n2 / (d1 * d2)))


def ssim_grad(a, b, window: int = 11) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``a``."""
    a, b = _check_same(a, b)
    w, mu_a, mu_b, n1, n2, d1, d2 = _ssim_terms(a, b, window)
    s = n1 * n2 / (d1 * d2)
    g = 1.0 / s.size
    g_mu = g * s * (2 * mu_b / n1 - 2 * mu_a / d1 - 2 * mu_b / n2 + 2 * mu_a / d2)
    g_maa = -g * s / d2
    g_mab = 2 * g * s / n2
    grad = (_filter_valid_adjoint(g_mu, w, a.shape) + 2 * a * _filter_valid_adjoint(g_maa, w, a.shape)
            + b * _filter_valid_adjoint(g_mab, w, a.shape))
    return float(np.mean(s)), grad
