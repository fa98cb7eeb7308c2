"""Sparse Gaussian VAE: voxelized Gaussian sets to an r^3 x F latent grid and back.

The encoder runs three stride-2 sparse ResNet stages.  The decoder grows the
grid back with generative transpose convolutions, predicting an occupancy
logit for every generated voxel and pruning those at or below zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import (
    ATTR_CHANNELS,
    DEFAULT_BOUNDS,
    OFFSET,
    GaussianSet,
    LatentGrid,
    LossWeights,
    SparseVoxelTensor,
    coordinate_keys,
    is_power_of_two,
    sparsify,
)
from .nn import (
    GenerativeTransposeConv3d,
    Linear,
    Module,
    ParameterStore,
    PointwiseMLP,
    SparseConv3d,
    SparseResBlock,
    SparseUNet,
    adam_step,
    cosine_lr,
    prune,
    prune_backward,
)
from .nn.kernel_map import downsample_coordinates
from .render import l1, rasterize, rasterize_backward, ssim_grad

LEVELS = 3


@dataclass(frozen=True)
class VaeConfig:
    resolution: int = 64
    latent_channels: int = 4
    attr_channels: int = ATTR_CHANNELS
    encoder_channels: tuple = (16, 32, 32, 32)
    decoder_channels: tuple = (32, 32, 32, 32)
    weights: LossWeights = field(default_factory=LossWeights)
    warmup: int = 200
    logvar_init: float = -6.0
    bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        if not is_power_of_two(self.resolution) or self.resolution < 2 ** LEVELS:
            raise ValueError(f"resolution must be a power of two >= {2 ** LEVELS}, got {self.resolution}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be at least 1")
        if len(self.encoder_channels) != LEVELS + 1 or len(self.decoder_channels) != LEVELS + 1:
            raise ValueError(f"channel specs need {LEVELS + 1} entries")

    @property
    def latent_resolution(self) -> int:
        return self.resolution // 2 ** LEVELS


class LatentDistribution(NamedTuple):
    mean: np.ndarray  # (r, r, r, F)
    logvar: np.ndarray  # (r, r, r, F)
    mask: np.ndarray  # (r, r, r) bool


class DecodeOutput(NamedTuple):
    tensor: SparseVoxelTensor  # final voxels with attribute channels
    candidates: list  # per stage, generated coordinates before pruning
    logits: list  # per stage, occupancy logits of the candidates
    keep: list  # per stage, boolean mask of surviving candidates


class AttrLoss(NamedTuple):
    value: float
    empty: bool
    grad: np.ndarray  # gradient w.r.t. pred feats (zero rows outside the intersection)


def _membership(coords, size, reference) -> np.ndarray:
    ref = np.sort(coordinate_keys(reference, size))
    keys = coordinate_keys(coords, size)
    pos = np.clip(np.searchsorted(ref, keys), 0, max(len(ref) - 1, 0))
    return (len(ref) > 0) & (ref[pos] == keys) if len(ref) else np.zeros(len(keys), dtype=bool)


def stage_targets(gt_coords: np.ndarray, resolution: int) -> list[np.ndarray]:
    """GT coordinates max-pooled to each decoder stage's grid (coarse to fine)."""
    out = []
    for level in range(LEVELS - 1, -1, -1):
        factor = 2 ** level
        out.append(downsample_coordinates(gt_coords, factor, resolution // factor) if factor > 1
                   else np.asarray(gt_coords, dtype=np.int64))
    return out


class SparseVAE(Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        ec, dc, f = cfg.encoder_channels, cfg.decoder_channels, cfg.latent_channels
        self.enc_stem = Linear(cfg.attr_channels, ec[0], rng)
        self.enc_down = [SparseConv3d(ec[i], ec[i + 1], rng, kernel=2, stride=2) for i in range(LEVELS)]
        self.enc_res = [SparseResBlock(ec[i + 1], ec[i + 1], rng) for i in range(LEVELS)]
        self.enc_head = PointwiseMLP(ec[-1], 2 * f, rng)
        self.enc_head.linear.bias.value[f:] = cfg.logvar_init

        self.dec_stem = Linear(f, dc[0], rng)
        self.dec_res = [SparseResBlock(dc[i], dc[i], rng) for i in range(LEVELS)]
        self.dec_up = [GenerativeTransposeConv3d(dc[i], dc[i + 1], rng, max_resolution=cfg.resolution)
                       for i in range(LEVELS)]
        self.dec_occ = [PointwiseMLP(dc[i + 1], 1, rng) for i in range(LEVELS)]
        self.dec_attr = PointwiseMLP(dc[-1], cfg.attr_channels, rng)

    # -- encoder --------------------------------------------------------------

    def encode(self, x: SparseVoxelTensor) -> LatentDistribution:
        if x.is_empty:
            raise ValueError("cannot encode an empty tensor")
        if x.resolution != self.cfg.resolution or x.stride != 1:
            raise ValueError(f"expected a stride-1 tensor at resolution {self.cfg.resolution}")
        h = x.replace(self.enc_stem.forward(x.feats))
        for down, res in zip(self.enc_down, self.enc_res):
            h = res.forward(down.forward(h))
        out = self.enc_head.forward(h.feats)
        f, r = self.cfg.latent_channels, self.cfg.latent_resolution
        self._enc_coords = h.coords
        mean, logvar = np.zeros((r, r, r, f)), np.zeros((r, r, r, f))
        mask = np.zeros((r, r, r), dtype=bool)
        idx = tuple(h.coords.T)
        mean[idx], logvar[idx], mask[idx] = out[:, :f], out[:, f:], True
        return LatentDistribution(mean, logvar, mask)

    def encode_backward(self, g_mean: np.ndarray, g_logvar: np.ndarray) -> None:
        idx = tuple(self._enc_coords.T)
        g = self.enc_head.backward(np.concatenate([g_mean[idx], g_logvar[idx]], axis=1))
        for down, res in zip(reversed(self.enc_down), reversed(self.enc_res)):
            g = down.backward(res.backward(g))
        self.enc_stem.backward(g)

    # -- decoder --------------------------------------------------------------

    def decode(self, z: LatentGrid, force_keep: list | None = None) -> DecodeOutput:
        """Decode from the cells of ``z`` with occupancy above 0.5.

        ``force_keep`` optionally gives, per stage, coordinates that survive
        pruning regardless of their logits (ground-truth teacher forcing).
        """
        cfg = self.cfg
        if z.resolution != cfg.latent_resolution or z.channels != cfg.latent_channels:
            raise ValueError(f"latent must be {cfg.latent_resolution}^3 x {cfg.latent_channels}")
        start = sparsify(z, 0.5, resolution=cfg.resolution)
        if start.is_empty:
            raise ValueError("latent has no occupied cell; the sampled occupancy is degenerate")
        self._z_coords = start.coords
        h = start.replace(self.dec_stem.forward(start.feats))
        candidates, logits, keeps = [], [], []
        for s in range(LEVELS):
            h = self.dec_res[s].forward(h)
            u = self.dec_up[s].forward(h)
            lg = self.dec_occ[s].forward(u.feats)[:, 0]
            forced = None
            if force_keep is not None:
                forced = _membership(u.coords, u.grid_size, force_keep[s])
            h, keep = prune(u, lg, forced)
            candidates.append(u.coords)
            logits.append(lg)
            keeps.append(keep)
            if h.is_empty:
                empty = SparseVoxelTensor(np.zeros((0, 3), np.int64), np.zeros((0, cfg.attr_channels)),
                                          cfg.resolution, 2 ** (LEVELS - 1 - s))
                self._truncated = True
                return DecodeOutput(empty, candidates, logits, keeps)
        self._truncated = False
        final = h.replace(self.dec_attr.forward(h.feats))
        return DecodeOutput(final, candidates, logits, keeps)

    def decode_backward(self, out: DecodeOutput, g_attr: np.ndarray, g_logits: list) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the latent features."""
        if self._truncated:
            raise RuntimeError("decode pruned every voxel; nothing to differentiate")
        g = self.dec_attr.backward(g_attr)
        for s in reversed(range(LEVELS)):
            g = prune_backward(g, out.keep[s]) + self.dec_occ[s].backward(g_logits[s][:, None])
            g = self.dec_res[s].backward(self.dec_up[s].backward(g))
        g_rows = self.dec_stem.backward(g)
        r, f = self.cfg.latent_resolution, self.cfg.latent_channels
        gz = np.zeros((r, r, r, f))
        gz[tuple(self._z_coords.T)] = g_rows
        return gz


# -- latent sampling and KL ------------------------------------------------------------


def latent_noise(d: LatentDistribution, seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(d.mean.shape)


def reparameterize(d: LatentDistribution, seed=None, noise: np.ndarray | None = None) -> LatentGrid:
    """z = mean + exp(logvar / 2) * eps on active cells; occupancy is the mask."""
    eps = latent_noise(d, seed) if noise is None else noise
    z = np.where(d.mask[..., None], d.mean + np.exp(0.5 * d.logvar) * eps, 0.0)
    return LatentGrid(z, d.mask.astype(np.float64))


def mean_latent(d: LatentDistribution) -> LatentGrid:
    return LatentGrid(np.where(d.mask[..., None], d.mean, 0.0), d.mask.astype(np.float64))


def kl_loss(d: LatentDistribution) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean KL to N(0, I) over active elements, with gradients w.r.t. mean and logvar."""
    m = d.mask[..., None] & np.ones(d.mean.shape, dtype=bool)
    n = int(m.sum())
    if n == 0:
        return 0.0, np.zeros_like(d.mean), np.zeros_like(d.logvar)
    mu, lv = d.mean[m], d.logvar[m]
    value = float(np.sum(0.5 * (mu ** 2 + np.exp(lv) - lv - 1.0)) / n)
    g_mean = np.where(m, d.mean / n, 0.0)
    g_logvar = np.where(m, 0.5 * (np.exp(d.logvar) - 1.0) / n, 0.0)
    return value, g_mean, g_logvar


# -- reconstruction losses --------------------------------------------------------------


def bce_with_logits(logits, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    lg = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if lg.size == 0:
        return 0.0, np.zeros_like(lg)
    loss = np.maximum(lg, 0) - lg * t + np.log1p(np.exp(-np.abs(lg)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * lg))
    return float(loss.mean()), (prob - t) / lg.size


def occupancy_loss(logits: list, targets: list) -> tuple[float, list]:
    """Per-stage BCE over generated voxels, summed across stages."""
    total, grads = 0.0, []
    for lg, t in zip(logits, targets):
        v, g = bce_with_logits(lg, t)
        total += v
        grads.append(g)
    return total, grads


def occupancy_targets(out: DecodeOutput, gt_stage_coords: list, resolution: int) -> list:
    targets = []
    for s, cand in enumerate(out.candidates):
        size = resolution // 2 ** (LEVELS - 1 - s)
        targets.append(_membership(cand, size, gt_stage_coords[s]).astype(np.float64))
    return targets


def attr_loss(pred: SparseVoxelTensor, gt: SparseVoxelTensor) -> AttrLoss:
    """MSE over all channels on the intersection of the two coordinate sets."""
    if pred.grid_size != gt.grid_size:
        raise ValueError("attr_loss needs tensors on the same grid")
    size = pred.grid_size
    pk, gk = coordinate_keys(pred.coords, size), coordinate_keys(gt.coords, size)
    common, pi, gi = np.intersect1d(pk, gk, assume_unique=True, return_indices=True)
    grad = np.zeros_like(pred.feats)
    if len(common) == 0:
        return AttrLoss(0.0, True, grad)
    diff = pred.feats[pi] - gt.feats[gi]
    grad[pi] = 2.0 * diff / diff.size
    return AttrLoss(float(np.mean(diff ** 2)), False, grad)


def image_loss(pred: np.ndarray, gt: np.ndarray, weights: LossWeights) -> tuple[float, np.ndarray]:
    """l1 * L1 + ssim * (1 - SSIM) and the gradient w.r.t. ``pred``."""
    value = weights.l1 * l1(pred, gt)
    grad = weights.l1 * np.sign(pred - gt) / pred.size
    if weights.ssim:
        s, gs = ssim_grad(pred, gt)
        value += weights.ssim * (1.0 - s)
        grad = grad - weights.ssim * gs
    return value, grad


def render_gaussians(tensor: SparseVoxelTensor, bounds=DEFAULT_BOUNDS) -> GaussianSet:
    """Gaussians for rendering, keeping raw (unnormalised) quaternions differentiable."""
    f = tensor.feats
    lo, hi = bounds
    pos = lo + (tensor.coords + f[:, OFFSET]) / tensor.grid_size * (hi - lo)
    return GaussianSet(pos, f[:, 3:6], f[:, 6:9], f[:, 9:13], f[:, 13], bounds)


def render_loss(tensor: SparseVoxelTensor, views, weights: LossWeights, background=(1.0, 1.0, 1.0),
                cutoff: float | None = 4.0, bounds=DEFAULT_BOUNDS) -> tuple[float, np.ndarray]:
    """Image loss summed over ``views`` [(Camera, Image), ...]; gradient w.r.t. tensor feats."""
    if not views:
        raise ValueError("render loss needs at least one view")
    if weights.lpips:
        raise NotImplementedError("no perceptual network is bundled; set the lpips weight to 0")
    g = render_gaussians(tensor, bounds)
    total, grad = 0.0, np.zeros_like(tensor.feats)
    if len(g) == 0:
        for cam, img in views:
            pred = np.broadcast_to(np.asarray(background, float), img.pixels.shape)
            total += image_loss(pred, img.pixels, weights)[0]
        return total, grad
    scale = (bounds[1] - bounds[0]) / tensor.grid_size
    for cam, img in views:
        out = rasterize(g, cam, background=background, cutoff=cutoff)
        v, gimg = image_loss(out.image, img.pixels, weights)
        total += v
        if out.all_culled:
            continue
        gg = rasterize_backward(out, gimg)
        grad[:, OFFSET] += gg.positions * scale
        grad[:, 3:6] += gg.colors
        grad[:, 6:9] += gg.log_scales
        grad[:, 9:13] += gg.rotations
        grad[:, 13] += gg.opacity_logits
    return total, grad


def vae_loss(kl: float, occ: float, attr: float, render: float, weights: LossWeights,
             iteration: int | None = None, warmup: int = 0) -> float:
    """kl * L_KL + occupancy * L_Occ + attr * L_Attr + render * L_Render.

    Attribute and render terms are switched off before ``warmup`` iterations.
    """
    total = weights.kl * kl + weights.occupancy * occ
    if iteration is None or iteration >= warmup:
        total += weights.attr * attr + weights.render * render
    return total


# -- training -------------------------------------------------------------------------


class VaeSample(NamedTuple):
    x: SparseVoxelTensor
    views: list  # [(Camera, Image), ...]


class StepResult(NamedTuple):
    total: float
    kl: float
    occ: float
    attr: float
    render: float
    attr_empty: bool


def vae_forward_backward(model: SparseVAE, sample: VaeSample, iteration: int | None = None,
                         noise_seed=0, views=None, cutoff: float | None = 4.0,
                         backward: bool = True) -> StepResult:
    """Evaluate the full objective on one sample and accumulate gradients."""
    cfg, w = model.cfg, model.cfg.weights
    d = model.encode(sample.x)
    noise = latent_noise(d, noise_seed)
    z = reparameterize(d, noise=noise)
    gt_stages = stage_targets(sample.x.coords, cfg.resolution)
    out = model.decode(z, force_keep=gt_stages)

    kl, g_mean, g_logvar = kl_loss(d)
    occ, g_logits = occupancy_loss(out.logits, occupancy_targets(out, gt_stages, cfg.resolution))
    active = iteration is None or iteration >= cfg.warmup
    attr = attr_loss(out.tensor, sample.x)
    views = sample.views if views is None else views
    if active and w.render and views:
        rend, g_render = render_loss(out.tensor, views, w, cutoff=cutoff, bounds=cfg.bounds)
    else:
        rend, g_render = 0.0, np.zeros_like(out.tensor.feats)
    total = vae_loss(kl, occ, attr.value, rend, w, iteration, cfg.warmup)

    if backward:
        g_attr = (w.attr * attr.grad + w.render * g_render) if active else np.zeros_like(attr.grad)
        gz = model.decode_backward(out, g_attr, [w.occupancy * g for g in g_logits])
        gz = np.where(d.mask[..., None], gz, 0.0)
        std = np.exp(0.5 * d.logvar)
        model.encode_backward(w.kl * g_mean + gz, w.kl * g_logvar + gz * 0.5 * std * noise)
    return StepResult(total, kl, occ, attr.value, rend, attr.empty)


def occupancy_iou(pred_coords, gt_coords, size: int) -> float:
    a = set(coordinate_keys(pred_coords, size).tolist())
    b = set(coordinate_keys(gt_coords, size).tolist())
    union = len(a | b)
    return len(a & b) / union if union else 1.0


def train_vae(model: SparseVAE, samples: list, steps: int, lr: float = 2e-3, seed: int = 0,
              log_every: int = 0, callback=None) -> list[StepResult]:
    """Adam on one sample per step (round-robin) with one view per step for the render term."""
    if steps < 1:
        raise ValueError("steps must be positive")
    store = ParameterStore(model)
    history = []
    for step in range(steps):
        sample = samples[step % len(samples)]
        view = [sample.views[(step // len(samples)) % len(sample.views)]] if sample.views else []
        store.zero_grad()
        res = vae_forward_backward(model, sample, iteration=step, noise_seed=[seed, step], views=view)
        adam_step(store, lr=cosine_lr(step, steps, lr), max_grad_norm=1.0)
        history.append(res)
        if callback is not None and log_every and step % log_every == 0:
            callback(step, res)
    return history


def reconstruct(model: SparseVAE, x: SparseVoxelTensor) -> SparseVoxelTensor:
    """Encode to the latent mean and decode without teacher forcing."""
    return model.decode(mean_latent(model.encode(x))).tensor


# -- refinement ---------------------------------------------------------------------------


class Refiner(Module):
    """Residual coordinate-preserving U-Net over decoded attributes; identity at init."""

    def __init__(self, rng, channels: int = ATTR_CHANNELS, width: int = 16):
        self.net = SparseUNet(channels, channels, rng, width, zero_init_head=True)

    def forward(self, x: SparseVoxelTensor) -> SparseVoxelTensor:
        return x.replace(x.feats + self.net.forward(x).feats)

    def backward(self, grad):
        return grad + self.net.backward(grad)


def train_refiner(refiner: Refiner, pairs: list, steps: int, weights: LossWeights,
                  lr: float = 2e-3, cutoff: float | None = 4.0, bounds=DEFAULT_BOUNDS) -> list[float]:
    """Fit on ``[(decoded tensor, gt tensor, views), ...]`` with attr + render losses."""
    store = ParameterStore(refiner)
    history = []
    for step in range(steps):
        decoded, gt, views = pairs[step % len(pairs)]
        store.zero_grad()
        out = refiner.forward(decoded)
        a = attr_loss(out, gt)
        grad = weights.attr * a.grad
        total = weights.attr * a.value
        if views and weights.render:
            view = [views[(step // len(pairs)) % len(views)]]
            r, gr = render_loss(out, view, weights, cutoff=cutoff, bounds=bounds)
            total += weights.render * r
            grad = grad + weights.render * gr
        refiner.backward(grad)
        adam_step(store, lr=cosine_lr(step, steps, lr), max_grad_norm=1.0)
        history.append(total)
    return history
