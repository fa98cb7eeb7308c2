"""Denoising diffusion bridge between latent grids, plus a rectified-flow baseline.

The bridge runs a variance-exploding process (sigma(t) = t, zero drift) pinned
at x0 for t = 0 and at the endpoint y for t = T, so that
x_t = a(t) x0 + b(t) y + std(t) eps.  Networks are preconditioned denoisers:
they see the rescaled state and output F, and the clean estimate is
``c_skip (x_t - b y) + c_out F``.  The score follows from that estimate in
closed form, so its dependence on x_t is exact and only the x0 estimate is
learned.  The score-matching weight ``w(t)`` is chosen so the loss equals the
mean squared error of F against a unit-scale target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import LatentGrid
from .nn import (
    DenseConv3d,
    DenseResBlock,
    DenseTransposeConv3d,
    GroupNorm,
    Linear,
    Module,
    ParameterStore,
    SiLU,
    TimeEmbedding,
    adam_step,
    cosine_lr,
)

CHURN_STEP_RATIO = 0.1
GUIDANCE = 1.0
CHURN_FRACTION = 0.5  # a churned step re-noises halfway back up its own interval
DEFAULT_STEPS = 40


@dataclass(frozen=True)
class BridgeSchedule:
    """VE bridge schedule: sigma(t) = t on [t_min, T], drift f = 0, g(t)^2 = d sigma^2 / dt."""

    T: float = 1.0
    t_min: float = 1e-4
    steps: int = DEFAULT_STEPS
    max_norm: float = 1e6  # samplers abort once the state RMS exceeds this
    sigma_data: float = 0.5  # assumed per-element scale of x0 for preconditioning

    def __post_init__(self):
        if not 0 < self.t_min < self.T / 2:
            raise ValueError(f"need 0 < t_min < T/2, got t_min={self.t_min}, T={self.T}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")

    def sigma(self, t):
        return np.asarray(t, dtype=np.float64)

    def sigma2(self, t):
        return self.sigma(t) ** 2

    def inverse_sigma2(self, s):
        return np.sqrt(np.asarray(s, dtype=np.float64))

    def g2(self, t):
        return 2.0 * np.asarray(t, dtype=np.float64)

    def variance(self, t):
        s2, S2 = self.sigma2(t), self.sigma2(self.T)
        return s2 * (S2 - s2) / S2

    def coefficients(self, t):
        """``(a, b, var, c_in, c_skip, c_out)`` at ``t``; x_t = a x0 + b y + sqrt(var) eps."""
        b = self.sigma2(t) / self.sigma2(self.T)
        a = 1.0 - b
        var = self.variance(t)
        sd2 = self.sigma_data ** 2
        denom = a * a * sd2 + var
        return a, b, var, 1.0 / np.sqrt(denom), a * sd2 / denom, self.sigma_data * np.sqrt(var / denom)

    def weight(self, t):
        """var^2 / (a c_out)^2, finite on all of [0, T]: the F-space loss has unit weight."""
        s2 = self.sigma2(t)
        return self.variance(t) + s2 * s2 / self.sigma_data ** 2

    def times(self, n: int | None = None, t_start: float | None = None) -> np.ndarray:
        """n + 1 evenly spaced decreasing times from ``t_start`` (default T - t_min) to t_min."""
        n = self.steps if n is None else n
        if n < 1:
            raise ValueError("steps must be at least 1")
        return np.linspace(self.T - self.t_min if t_start is None else t_start, self.t_min, n + 1)

    def ode_times(self, n: int | None = None, t_start: float | None = None) -> np.ndarray:
        """n + 1 decreasing times evenly spaced in u = sqrt(sigma(T)^2 - sigma(t)^2).

        The spacing is fine next to T, where trajectories fan out from the
        pinned endpoint, and coarse near t_min.
        """
        n = self.steps if n is None else n
        if n < 1:
            raise ValueError("steps must be at least 1")
        S2 = float(self.sigma2(self.T))
        hi = self.T - self.t_min if t_start is None else t_start
        u = np.linspace(np.sqrt(S2 - self.sigma2(hi)), np.sqrt(S2 - self.sigma2(self.t_min)), n + 1)
        t = self.inverse_sigma2(S2 - u ** 2)
        t[0], t[-1] = hi, self.t_min
        return t

    def to_dict(self) -> dict:
        return {"kind": "ve", "T": self.T, "t_min": self.t_min, "steps": self.steps, "max_norm": self.max_norm,
                "sigma_data": self.sigma_data}

    @classmethod
    def from_dict(cls, d: dict) -> BridgeSchedule:
        d = dict(d)
        kind = d.pop("kind", "ve")
        if kind != "ve":
            raise ValueError(f"unsupported schedule kind {kind!r}")
        return cls(**d)


# -- closed forms ---------------------------------------------------------------------


def _check_time(t, sched: BridgeSchedule):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ValueError(f"t must lie in [0, {sched.T}], got {t}")
    return t


def _expand(t, ndim):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim)) if t.ndim else t


def bridge_marginal(x0, y, t, sched: BridgeSchedule):
    """Mean and variance of x_t given both endpoints.

    ``t`` may be a scalar or one time per leading batch entry.
    """
    t = _check_time(t, sched)
    x0, y = np.asarray(x0, dtype=np.float64), np.asarray(y, dtype=np.float64)
    a = _expand(sched.sigma2(t) / sched.sigma2(sched.T), x0.ndim)
    mean = a * y + (1.0 - a) * x0
    var = _expand(sched.variance(t), x0.ndim)
    var = np.where(t == sched.T, 0.0, var) if np.ndim(t) == 0 else var
    return mean, np.broadcast_to(var, mean.shape).copy()


def sample_bridge(x0, y, t, seed, sched: BridgeSchedule | None = None):
    sched = BridgeSchedule() if sched is None else sched
    mean, var = bridge_marginal(x0, y, t, sched)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def bridge_score(x_t, x0, y, t, sched: BridgeSchedule | None = None):
    """Exact score of the pinned bridge marginal, (mean - x_t) / variance."""
    sched = BridgeSchedule() if sched is None else sched
    t = _check_time(t, sched)
    if np.any(t <= 0) or np.any(t >= sched.T):
        raise ValueError("the bridge score is undefined at the pinned endpoints")
    mean, var = bridge_marginal(x0, y, t, sched)
    return (mean - np.asarray(x_t, dtype=np.float64)) / var


def h_transform(x, t, y, sched: BridgeSchedule | None = None):
    """Endpoint-pinning drift adjustment grad_x log p(x_T = y | x_t = x)."""
    sched = BridgeSchedule() if sched is None else sched
    t = _check_time(t, sched)
    if np.any(t >= sched.T):
        raise ValueError("h-transform is undefined at t = T")
    x = np.asarray(x, dtype=np.float64)
    gap = _expand(sched.sigma2(sched.T) - sched.sigma2(t), x.ndim)
    return (np.asarray(y, dtype=np.float64) - x) / gap


def forward_kernel(x, t, t_next, y, sched: BridgeSchedule, rng: np.random.Generator):
    """Sample x at t_next > t from the forward bridge started at x (pinned to y at T)."""
    s, s1, S = sched.sigma2(t), sched.sigma2(t_next), sched.sigma2(sched.T)
    frac = (s1 - s) / (S - s)
    var = (s1 - s) * (S - s1) / (S - s)
    return x + frac * (y - x) + math.sqrt(max(var, 0.0)) * rng.standard_normal(np.shape(x))


# -- denoisers ---------------------------------------------------------------------------


class DenoiserNet(Module):
    """Dense 3D U-Net on channels-last grids (B, r, r, r, C).

    The input is the channel concatenation of the state and ``n_context``
    context grids; a learned time embedding is added inside every residual
    block.  The output has the state's channel count.
    """

    def __init__(self, channels: int, rng: np.random.Generator, width: int = 32, n_context: int = 2):
        self.channels, self.n_context = channels, n_context
        cin = channels * (1 + n_context)
        self.temb = TimeEmbedding(width, rng)
        self.stem = DenseConv3d(cin, width, rng)
        self.enc = DenseResBlock(width, width, width, rng)
        self.down = DenseConv3d(width, 2 * width, rng, stride=2)
        self.mid = DenseResBlock(2 * width, 2 * width, width, rng)
        self.up = DenseTransposeConv3d(2 * width, width, rng)
        self.dec = DenseResBlock(2 * width, width, width, rng)
        self.out_norm = GroupNorm(width)
        self.out_act = SiLU()
        self.head = DenseConv3d(width, channels, rng, zero_init=True)

    def forward(self, x, t, context=()):
        if len(context) != self.n_context:
            raise ValueError(f"expected {self.n_context} context grids, got {len(context)}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 5 or x.shape[1] % 2:
            raise ValueError(f"expected (B, r, r, r, C) with even r, got {x.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        emb = self.temb.forward(t)
        h0 = self.enc.forward(self.stem.forward(np.concatenate([x, *context], axis=-1)), emb)
        h1 = self.mid.forward(self.down.forward(h0), emb)
        u = self.up.forward(h1)
        h2 = self.dec.forward(np.concatenate([h0, u], axis=-1), emb)
        return self.head.forward(self.out_act.forward(self.out_norm.forward(h2, batched=True)))

    def backward(self, grad):
        w = self.temb.dim
        g = self.out_norm.backward(self.out_act.backward(self.head.backward(grad)))
        g, ge = self.dec.backward(g)
        g_skip, g_up = g[..., :w], g[..., w:]
        g, ge1 = self.mid.backward(self.up.backward(g_up))
        g, ge0 = self.enc.backward(self.down.backward(g) + g_skip)
        self.stem.backward(g)
        self.temb.backward(ge + ge1 + ge0)


class MLPDenoiser(Module):
    """Fully connected denoiser for low-dimensional states (B, d)."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 64, n_context: int = 2,
                 emb_dim: int = 16):
        self.dim, self.n_context, self.emb_dim = dim, n_context, emb_dim
        self.fc1 = Linear(dim * (1 + n_context) + emb_dim, hidden, rng)
        self.act1 = SiLU()
        self.fc2 = Linear(hidden, hidden, rng)
        self.act2 = SiLU()
        self.fc3 = Linear(hidden, hidden, rng)
        self.act3 = SiLU()
        self.out = Linear(hidden, dim, rng, zero_init=True)

    def forward(self, x, t, context=()):
        if len(context) != self.n_context:
            raise ValueError(f"expected {self.n_context} context arrays, got {len(context)}")
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        inp = np.concatenate([x, *context, _time_features(t, self.emb_dim)], axis=-1)
        h = self.act1.forward(self.fc1.forward(inp))
        h = self.act2.forward(self.fc2.forward(h))
        h = self.act3.forward(self.fc3.forward(h))
        return self.out.forward(h)

    def backward(self, grad):
        g = self.act3.backward(self.out.backward(grad))
        g = self.act2.backward(self.fc3.backward(g))
        g = self.act1.backward(self.fc2.backward(g))
        self.fc1.backward(g)


def _time_features(t, dim):
    """Smooth Fourier features of t in [0, 1] for the small denoiser."""
    k = np.arange(1, dim // 2 + 1)
    return np.concatenate([np.sin(np.pi * k * t[:, None]), np.cos(np.pi * k * t[:, None])], axis=1)


ScoreFn = Callable[[np.ndarray, float, np.ndarray, np.ndarray], np.ndarray]


class _Denoised(NamedTuple):
    x0_hat: np.ndarray
    a: np.ndarray
    b: np.ndarray
    var: np.ndarray
    c_out: np.ndarray


def denoise(net: Module, x_t, t, y, cond, sched: BridgeSchedule) -> _Denoised:
    """Preconditioned clean-latent estimate; ``t`` holds one time per batch entry."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a, b, var, c_in, c_skip, c_out = (_expand(v, x_t.ndim) for v in sched.coefficients(t))
    z = x_t - b * y
    ctx = (y,) if cond is None else (y, cond)
    x0_hat = c_skip * z + c_out * net.forward(c_in * z, t, ctx)
    return _Denoised(x0_hat, a, b, var, c_out)


def _score_from(d: _Denoised, x_t, y):
    return (d.a * d.x0_hat + d.b * y - x_t) / d.var


class NetScore:
    """Score of the bridge marginal with x0 replaced by the network's estimate."""

    def __init__(self, net: Module, sched: BridgeSchedule):
        self.net, self.sched = net, sched

    def __call__(self, x, t, y, cond):
        d = denoise(self.net, x, np.full(x.shape[0], float(t)), y, cond, self.sched)
        return _score_from(d, x, y)


class GaussianPriorScore:
    """Analytic score of p(x_t | y) when x0 ~ N(mu0, s2) independently per element."""

    def __init__(self, mu0, s2, sched: BridgeSchedule):
        self.mu0, self.s2, self.sched = mu0, s2, sched

    def moments(self, t, y):
        a = float(self.sched.sigma2(t) / self.sched.sigma2(self.sched.T))
        mean = a * np.asarray(y, dtype=np.float64) + (1 - a) * self.mu0
        return mean, (1 - a) ** 2 * self.s2 + float(self.sched.variance(t))

    def __call__(self, x, t, y, cond=None):
        mean, var = self.moments(t, y)
        return (mean - x) / var


# -- training ------------------------------------------------------------------------------


class BridgeBatch(NamedTuple):
    x0: np.ndarray  # (B, ...) target latents, occupancy as the last channel
    y: np.ndarray  # (B, ...) endpoint latents
    cond: np.ndarray | None  # (B, ...) conditioning grids, or None


def bridge_loss(net: Module, batch: BridgeBatch, sched: BridgeSchedule, rng: np.random.Generator,
                backward: bool = True, t=None) -> float:
    """Weighted denoising bridge score matching, averaged over batch and elements.

    ``t`` defaults to Uniform(t_min, T - t_min) per batch entry.
    """
    x0, y = np.asarray(batch.x0, dtype=np.float64), np.asarray(batch.y, dtype=np.float64)
    if x0.shape != y.shape or (batch.cond is not None and np.shape(batch.cond) != x0.shape):
        raise ValueError("x0, y and the condition must share dimensions")
    b = x0.shape[0]
    if t is None:
        t = rng.uniform(sched.t_min, sched.T - sched.t_min, size=b)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    x_t = sample_bridge(x0, y, t, rng, sched)
    target = bridge_score(x_t, x0, y, t, sched)
    d = denoise(net, x_t, t, y, batch.cond, sched)
    w = _expand(sched.weight(t), x0.ndim)
    diff = _score_from(d, x_t, y) - target
    loss = float(np.mean(w * diff ** 2))
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite bridge loss at t={np.round(t, 4).tolist()}")
    if backward:
        g_score = 2.0 * w * diff / diff.size
        net.backward(g_score * d.a / d.var * d.c_out)
    return loss


def train_bridge(net: Module, data: list[BridgeBatch], sched: BridgeSchedule, steps: int,
                 lr: float = 1e-3, seed: int = 0, batch_size: int | None = None,
                 callback=None) -> list[float]:
    """Adam with cosine decay; each step draws a batch of examples from ``data``.

    ``data`` holds single-example batches; they are stacked per step.
    """
    return _train(net, data, steps, lr, seed, batch_size, callback,
                  lambda b, rng: bridge_loss(net, b, sched, rng))


def _train(net, data, steps, lr, seed, batch_size, callback, loss_fn):
    if steps < 1:
        raise ValueError("steps must be positive")
    if not data:
        raise ValueError("no training data")
    x0 = np.concatenate([d.x0 for d in data])
    y = np.concatenate([d.y for d in data])
    cond = None if data[0].cond is None else np.concatenate([d.cond for d in data])
    n = len(x0)
    batch_size = n if batch_size is None else min(batch_size, n)
    store = ParameterStore(net)
    rng = np.random.default_rng(seed)
    history = []
    for step in range(steps):
        idx = rng.choice(n, size=batch_size, replace=False) if batch_size < n else np.arange(n)
        store.zero_grad()
        try:
            loss = loss_fn(BridgeBatch(x0[idx], y[idx], None if cond is None else cond[idx]), rng)
        except FloatingPointError as err:
            raise FloatingPointError(f"{err} at step {step} (lr {lr}, batch {idx.tolist()})") from err
        adam_step(store, lr=cosine_lr(step, steps, lr), max_grad_norm=1.0)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return history


# -- samplers -------------------------------------------------------------------------------


def _guard(x, step, t, sched):
    rms = float(np.sqrt(np.mean(x ** 2)))
    if not math.isfinite(rms) or rms > sched.max_norm:
        raise FloatingPointError(f"sampler diverged at step {step} (t={t:.4g}, state rms {rms:.3g})")


def _reverse_velocity(score: ScoreFn, x, t, y, cond, sched, guidance, c):
    """dx / d sigma^2 along the reverse process with f = 0, up to sign: c * guidance * U - h."""
    return c * guidance * score(x, t, y, cond) - h_transform(x, t, y, sched)


def sample_reverse_sde(score: ScoreFn, y, cond, sched: BridgeSchedule, churn_ratio: float = CHURN_STEP_RATIO,
                       guidance: float = GUIDANCE, seed=0, churn_fraction: float = CHURN_FRACTION,
                       steps: int | None = None):
    """Euler-Maruyama on the reverse bridge SDE from T - t_min down to t_min.

    Each step integrates g(t)^2 dt exactly as the decrement of sigma(t)^2.
    The first ``ceil(churn_ratio * N)`` steps are churned: x is first pushed
    forward along the bridge from t to ``t + churn_fraction * dt`` and the
    reverse step is taken from there.  Step noise and churn noise come from
    separate streams, so ``churn_ratio = 0`` consumes exactly the step stream.
    """
    if not 0.0 <= churn_ratio <= 1.0:
        raise ValueError("churn_ratio must lie in [0, 1]")
    y = np.asarray(y, dtype=np.float64)
    times = sched.times(steps)
    n = len(times) - 1
    n_churn = math.ceil(churn_ratio * n)
    step_rng = np.random.default_rng([_seed_int(seed), 0])
    churn_rng = np.random.default_rng([_seed_int(seed), 1])
    x = y.copy()
    for i in range(n):
        t, t_next = float(times[i]), float(times[i + 1])
        if i < n_churn:
            t_hat = min(t + churn_fraction * (t - t_next), sched.T - sched.t_min)
            if t_hat > t:
                x = forward_kernel(x, t, t_hat, y, sched, churn_rng)
                t = t_hat
        ds = float(sched.sigma2(t) - sched.sigma2(t_next))
        x = (x + _reverse_velocity(score, x, t, y, cond, sched, guidance, 1.0) * ds
             + math.sqrt(ds) * step_rng.standard_normal(x.shape))
        _guard(x, i, t_next, sched)
    return x


def sample_probability_flow_ode(score: ScoreFn, y, cond, sched: BridgeSchedule, guidance: float = GUIDANCE,
                                steps: int | None = None, x_start=None, t_start: float | None = None):
    """Heun integration of the probability-flow ODE in sigma^2 time.

    Starts from ``x_start`` (default ``y``) at ``t_start`` (default T - t_min)
    and follows ``ode_times``.  In sigma^2 time the conditional-mean path of
    a Gaussian problem is a straight line, which Heun reproduces exactly.
    """
    y = np.asarray(y, dtype=np.float64)
    x = y.copy() if x_start is None else np.asarray(x_start, dtype=np.float64).copy()
    times = sched.ode_times(steps, t_start)
    for i in range(len(times) - 1):
        t, t_next = float(times[i]), float(times[i + 1])
        ds = float(sched.sigma2(t) - sched.sigma2(t_next))
        d = _reverse_velocity(score, x, t, y, cond, sched, guidance, 0.5)
        x_pred = x + ds * d
        d_next = _reverse_velocity(score, x_pred, t_next, y, cond, sched, guidance, 0.5)
        x = x + 0.5 * ds * (d + d_next)
        _guard(x, i, t_next, sched)
    return x


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    raise TypeError(f"seed must be an integer, got {type(seed).__name__}")


# -- rectified flow ----------------------------------------------------------------------------


def rectified_flow_interpolant(x0, y, t):
    x0, y = np.asarray(x0, dtype=np.float64), np.asarray(y, dtype=np.float64)
    t = _expand(t, x0.ndim)
    return (1.0 - t) * x0 + t * y


def rectified_flow_loss(net: Module, batch: BridgeBatch, rng: np.random.Generator,
                        backward: bool = True, t=None) -> float:
    """Velocity regression of (x0 - y) on the straight interpolant; net context is the condition."""
    x0, y = np.asarray(batch.x0, dtype=np.float64), np.asarray(batch.y, dtype=np.float64)
    if x0.shape != y.shape:
        raise ValueError("x0 and y must share dimensions")
    b = x0.shape[0]
    t = rng.uniform(0.0, 1.0, size=b) if t is None else np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    x_t = rectified_flow_interpolant(x0, y, t)
    ctx = () if batch.cond is None else (batch.cond,)
    diff = net.forward(x_t, t, ctx) - (x0 - y)
    loss = float(np.mean(diff ** 2))
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite flow loss at t={np.round(t, 4).tolist()}")
    if backward:
        net.backward(2.0 * diff / diff.size)
    return loss


def train_rectified_flow(net: Module, data: list[BridgeBatch], steps: int, lr: float = 1e-3, seed: int = 0,
                         batch_size: int | None = None, callback=None) -> list[float]:
    return _train(net, data, steps, lr, seed, batch_size, callback,
                  lambda b, rng: rectified_flow_loss(net, b, rng))


def sample_rectified_flow(velocity: Callable, y, cond, steps: int = DEFAULT_STEPS):
    """Euler from y at t = 1 to t = 0 along dx/dt = -v; ``velocity(x, t, cond)``."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = np.asarray(y, dtype=np.float64).copy()
    dt = 1.0 / steps
    for i in range(steps):
        x = x + dt * velocity(x, 1.0 - i * dt, cond)
    return x


class NetVelocity:
    def __init__(self, net: Module):
        self.net = net

    def __call__(self, x, t, cond):
        return self.net.forward(x, np.full(x.shape[0], float(t)), () if cond is None else (cond,))


# -- latent plumbing -----------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentScaler:
    """Per-channel standardisation of latent features on occupied cells.

    The occupancy channel passes through untouched; empty cells stay zero.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, grids: list[LatentGrid]) -> LatentScaler:
        active = np.concatenate([g.features[g.occupancy > 0.5] for g in grids])
        if len(active) == 0:
            raise ValueError("no occupied cells to fit a scaler on")
        return cls(active.mean(axis=0), np.maximum(active.std(axis=0), 1e-6))

    def encode(self, grid: LatentGrid) -> np.ndarray:
        """(r, r, r, F + 1) diffusion state."""
        occ = grid.occupancy > 0.5
        feats = np.where(occ[..., None], (grid.features - self.mean) / self.std, 0.0)
        return np.concatenate([feats, grid.occupancy[..., None]], axis=-1)

    def decode(self, state: np.ndarray) -> LatentGrid:
        return LatentGrid(state[..., :-1] * self.std + self.mean, state[..., -1])


def occupancy_binarize(state: np.ndarray, threshold: float = 0.5) -> tuple[LatentGrid, bool]:
    """Threshold the last channel; returns ``(grid, empty)`` with features zeroed off the support."""
    state = np.asarray(state, dtype=np.float64)
    occ = state[..., -1] > threshold
    feats = np.where(occ[..., None], state[..., :-1], 0.0)
    return LatentGrid(feats, occ.astype(np.float64)), not bool(occ.any())


def cluster_fractions(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Share of samples whose nearest centre is each of ``centers``."""
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    centers = np.asarray(centers, dtype=np.float64).reshape(len(centers), -1)
    d = np.sum((samples[:, None, :] - centers[None]) ** 2, axis=-1)
    return np.bincount(np.argmin(d, axis=1), minlength=len(centers)) / len(samples)


# -- two-cluster comparison -------------------------------------------------------------------------

TWO_CLUSTER_CENTERS = np.array([[-1.0, 0.0], [1.0, 0.0]])


def two_cluster_pairs(n: int, rng: np.random.Generator, weight: float = 0.3, spread: float = 0.1,
                      y_scale: float = 0.5) -> list[BridgeBatch]:
    """Unpaired toy: x0 from a two-cluster mixture (``weight`` on the left centre), y ~ N(0, y_scale^2)."""
    labels = (rng.uniform(size=n) > weight).astype(int)
    x0 = TWO_CLUSTER_CENTERS[labels] + spread * rng.standard_normal((n, 2))
    y = y_scale * rng.standard_normal((n, 2))
    return [BridgeBatch(x0[i:i + 1], y[i:i + 1], None) for i in range(n)]


def compare_on_two_clusters(seed: int = 0, weight: float = 0.3, n_train: int = 4000, n_samples: int = 2000,
                            train_steps: int = 6000, sample_steps: int = 100, lr: float = 3e-3,
                            batch_size: int = 256) -> dict:
    """Train both generators on the same pairs and report the left-cluster share each one samples.

    The bridge uses the reverse SDE with default churn and guidance; rectified
    flow uses Euler on its learned velocity.  Both see the same ``y`` draws.
    """
    rngs = [np.random.default_rng([seed, k]) for k in range(4)]
    data = two_cluster_pairs(n_train, rngs[0], weight)
    y = 0.5 * rngs[1].standard_normal((n_samples, 2))
    sched = BridgeSchedule(steps=sample_steps)
    bridge_net = MLPDenoiser(2, rngs[2], n_context=1)
    train_bridge(bridge_net, data, sched, train_steps, lr=lr, seed=seed, batch_size=batch_size)
    x_bridge = sample_reverse_sde(NetScore(bridge_net, sched), y, None, sched, seed=seed)
    flow_net = MLPDenoiser(2, rngs[3], n_context=0)
    train_rectified_flow(flow_net, data, train_steps, lr=lr, seed=seed, batch_size=batch_size)
    x_flow = sample_rectified_flow(NetVelocity(flow_net), y, None, steps=sample_steps)
    return {
        "target": weight,
        "bridge": float(cluster_fractions(x_bridge, TWO_CLUSTER_CENTERS)[0]),
        "rectified_flow": float(cluster_fractions(x_flow, TWO_CLUSTER_CENTERS)[0]),
    }
