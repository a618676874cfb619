"""DDPM machinery for multi-view depth: schedule, noising, loss and samplers.

Schedule tables are indexed by step ``t = 0..T`` with ``alpha_bar[0] = 1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .camera import CameraRig
from .geometry import (BACKGROUND_THRESHOLD, EPS_REL, FAR, MIN_DEPTH, MIN_VIEWS, NEAR, PSI_MAX,
                       DepthMapSet, average_world_depths, denormalize_depth, depth_filter)

MAX_BETA = 0.999

# Noise substream purposes.
INIT, STEP, INPUT, FIRST_PASS = 0, 1, 2, 3


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float
    beta: np.ndarray        # (T+1,), beta[0] = 0
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product, alpha_bar[0] = 1
    raw_alpha_bar: np.ndarray  # f(t)/f(0) before beta clipping

    def to_dict(self) -> dict:
        return {"T": self.T, "s": self.s}


def cosine_schedule(T: int = 1000, s: float = 0.008, max_beta: float = MAX_BETA) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if s <= 0:
        raise ValueError("s must be positive")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    raw = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - raw[1:] / raw[:-1], max_beta)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, s, beta, alpha, alpha_bar, raw)


@dataclass
class SamplerConfig:
    T: int = 1000
    s: float = 0.008
    fusion_window: int = 20
    psi_max: float = PSI_MAX
    epsilon_rel: float = EPS_REL
    min_views: int = MIN_VIEWS
    tau: float = 0.15
    k: int = 10
    R: int = 3
    delta: float = 0.3
    seed: int = 0
    near: float = NEAR
    far: float = FAR
    clip_denoised: bool = True
    background_cut: float | None = 0.8

    def __post_init__(self):
        if not 0 <= self.fusion_window <= self.T:
            raise ValueError("fusion_window must lie in [0, T]")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_step(t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= int(t) <= schedule.T:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Forward diffusion ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` is an int or, for torch inputs, a (B,) tensor of per-item steps.
    """
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.min() < 1 or t.max() > schedule.T:
            raise ValueError("step outside [1, T]")
        ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t]
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    _check_step(t, schedule)
    ab = schedule.alpha_bar[int(t)]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(x_t, eps_pred, t: int, schedule: NoiseSchedule):
    """``(x_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t)``."""
    b = schedule.beta[t]
    return (x_t - b / math.sqrt(1.0 - schedule.alpha_bar[t]) * eps_pred) / math.sqrt(schedule.alpha[t])


def clipped_posterior_mean(x_t, eps_pred, t: int, schedule: NoiseSchedule):
    """Posterior mean through the predicted ``x0``, clipped to [-1, 1] first.

    Equals :func:`posterior_mean` whenever the prediction is in range; the clip
    keeps the large final-step betas from amplifying denoiser error.
    """
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    b = schedule.beta[t]
    x0 = np.clip((x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab), -1.0, 1.0)
    c0 = math.sqrt(ab_prev) * b / (1.0 - ab)
    ct = math.sqrt(schedule.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * x_t


def _mean(x_t, eps_pred, t, schedule, cfg):
    if cfg.clip_denoised:
        return clipped_posterior_mean(x_t, eps_pred, t, schedule).astype(np.float32)
    return posterior_mean(x_t, eps_pred, t, schedule)


def ddpm_step(x_t, eps_pred, t: int, z, schedule: NoiseSchedule):
    """One ancestral step; the noise term is dropped at ``t = 1``."""
    _check_step(t, schedule)
    mean = posterior_mean(x_t, eps_pred, t, schedule)
    if t == 1:
        return mean
    return mean + math.sqrt(schedule.beta[t]) * z


def training_loss(denoiser, x0: torch.Tensor, schedule: NoiseSchedule, rig: CameraRig,
                  generator: torch.Generator | None = None, t: torch.Tensor | None = None,
                  eps: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared epsilon error with ``t`` uniform on ``[1, T]`` per item.

    ``denoiser(x_t, alpha_bar_t, rig)`` maps (B, N, H, W) to the same shape.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    B = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, schedule)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t]
    pred = denoiser(x_t, ab, rig)
    return ((eps - pred) ** 2).mean()


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def noise(seed: int, purpose: int, view: int, step: int, shape) -> np.ndarray:
    """Standard normal draw from the substream keyed by (seed, purpose, view, step)."""
    rng = np.random.default_rng([int(seed), int(purpose), int(view), int(step)])
    return rng.standard_normal(shape).astype(np.float32)


def _views_noise(seed, purpose, views, step, shape) -> np.ndarray:
    return np.stack([noise(seed, purpose, v, step, shape) for v in views])


def fuse_normalized(mu: np.ndarray, rig: CameraRig, cfg: SamplerConfig) -> np.ndarray:
    """Depth averaging applied to normalised maps through world units."""
    mu = np.asarray(mu, dtype=np.float64)
    world = denormalize_depth(mu, cfg.near, cfg.far)
    fg = (mu < BACKGROUND_THRESHOLD) & (world > MIN_DEPTH)
    fused = average_world_depths(world, fg, rig, cfg.psi_max, cfg.epsilon_rel)
    out = 2.0 * (fused - cfg.near) / (cfg.far - cfg.near) - 1.0
    return np.where(fg, out, mu)


def _finish(x: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Clip to [-1, 1] and snap values beyond ``background_cut`` to the background sentinel."""
    out = np.clip(x, -1.0, 1.0).astype(np.float32)
    if cfg.background_cut is not None:
        out[out > cfg.background_cut] = 1.0
    return out


@dataclass
class SampleResult:
    depths: DepthMapSet
    mask: np.ndarray


@torch.no_grad()
def _eps(denoiser, x: np.ndarray, t: int, schedule: NoiseSchedule, rig, neighbors=None) -> np.ndarray:
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None]
    ab = torch.tensor([schedule.alpha_bar[t]], dtype=torch.float32)
    if neighbors is None:
        out = denoiser(xt, ab, rig)
    else:
        out = denoiser(xt, ab, rig, neighbors=neighbors)
    return out[0].numpy().astype(np.float32)


def sample_unconditional(denoiser, rig: CameraRig, schedule: NoiseSchedule,
                         cfg: SamplerConfig) -> SampleResult:
    """Ancestral sampling of one N-view depth set.

    Depth averaging refines the mean in the last ``cfg.fusion_window`` steps;
    the result is clipped to [-1, 1], far values are snapped to background,
    and a depth-filter mask is attached.
    """
    N = len(rig)
    H, W = rig.resolution
    T = schedule.T
    x = _views_noise(cfg.seed, INIT, range(N), T, (H, W))
    for t in range(T, 0, -1):
        eps = _eps(denoiser, x, t, schedule, rig)
        mu = _mean(x, eps, t, schedule, cfg)
        if t <= cfg.fusion_window:
            mu = fuse_normalized(mu, rig, cfg).astype(np.float32)
        if t > 1:
            mu = mu + np.float32(math.sqrt(schedule.beta[t])) * _views_noise(cfg.seed, STEP, range(N), t, (H, W))
        x = mu.astype(np.float32)
    depths = DepthMapSet(_finish(x, cfg), rig, cfg.near, cfg.far)
    mask = depth_filter(depths, cfg.psi_max, cfg.epsilon_rel, cfg.min_views)
    return SampleResult(depths, mask)


def sample_completion(denoiser, x_in: np.ndarray, view: int, rig: CameraRig,
                      schedule: NoiseSchedule, cfg: SamplerConfig) -> SampleResult:
    """Complete the other views given one normalised input depth map.

    Per step: the input view is re-noised to level ``t``; a first pass with
    full cross-view attention gives a provisional ``x_{t-1}`` (mean scaled by
    ``sqrt(1 - beta_t)``); a second pass, whose attention only sees the clean
    input view, produces the kept state. The input map is returned verbatim.
    """
    N = len(rig)
    if not 0 <= view < N:
        raise ValueError(f"view index {view} outside [0, {N})")
    x_in = np.asarray(x_in, dtype=np.float32)
    H, W = rig.resolution
    if x_in.shape != (H, W):
        raise ValueError(f"input map must be {H}x{W}")
    T = schedule.T
    others = [v for v in range(N) if v != view]
    full = rig.neighbor_table(min(cfg.R, N - 1))
    only_input = np.full_like(full, -1)
    only_input[:, 0] = view
    only_input[view] = full[view]

    x = _views_noise(cfg.seed, INIT, range(N), T, (H, W))
    for t in range(T, 0, -1):
        ab = schedule.alpha_bar[t]
        beta = schedule.beta[t]
        x[view] = (math.sqrt(ab) * x_in + math.sqrt(1 - ab) * noise(cfg.seed, INPUT, view, t, (H, W))).astype(np.float32)

        eps1 = _eps(denoiser, x, t, schedule, rig, full)
        mu1 = _mean(x, eps1, t, schedule, cfg)
        x_hat = np.float32(math.sqrt(1 - beta)) * mu1
        if t > 1:
            x_hat = x_hat + np.float32(math.sqrt(beta)) * _views_noise(cfg.seed, FIRST_PASS, range(N), t, (H, W))
        x_hat = x_hat.astype(np.float32)
        x_hat[view] = x_in

        eps2 = _eps(denoiser, x_hat, t, schedule, rig, only_input)
        mu2 = _mean(x_hat, eps2, t, schedule, cfg)
        mu2[view] = x_in
        if t <= cfg.fusion_window:
            mu2 = fuse_normalized(mu2, rig, cfg).astype(np.float32)
        if t > 1:
            mu2 = mu2 + np.float32(math.sqrt(beta)) * _views_noise(cfg.seed, STEP, range(N), t, (H, W))
        x = mu2.astype(np.float32)

    out = _finish(x, cfg)
    out[view] = x_in
    depths = DepthMapSet(out, rig, cfg.near, cfg.far)
    mask = depth_filter(depths, cfg.psi_max, cfg.epsilon_rel, cfg.min_views)
    return SampleResult(depths, mask)
