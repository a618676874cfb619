"""Epsilon-prediction U-Net over N-view depth maps.

Each view is processed as its own image; views exchange information only
through the epipolar attention blocks. Conditioning is a per-view vector
``z = MLP(PosEnc(sqrt(alpha_bar))) + MLP(Linear(extrinsics))`` injected into
every residual block by adaptive group norm.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import EpipolarAttentionBlock
from .camera import CameraRig, flatten_extrinsics
from .io import read_tensors, write_tensors
from .scheduler import NoiseSchedule, training_loss


@dataclass
class DenoiserConfig:
    levels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    groups: int = 8
    heads: int = 2
    resolution: int = 16
    views: int = 4
    attention_levels: tuple[int, ...] = (1, 2)
    embed_dim: int = 128
    posenc_dim: int = 32
    k: int = 10
    R: int = 3
    delta: float = 0.3
    tau: float = 0.15

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(self.attention_levels)
        if len(self.channel_multipliers) != self.levels:
            raise ValueError("one channel multiplier per level is required")
        if self.resolution % (2 ** (self.levels - 1)):
            raise ValueError("resolution must be divisible by 2^(levels-1)")
        if any(not 0 <= l < self.levels for l in self.attention_levels):
            raise ValueError("attention level out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def sinusoidal_encoding(x: torch.Tensor, dim: int) -> torch.Tensor:
    """``[sin(x / 10000^(i/(dim-1))), cos(...)]`` for ``i = 0..dim-1``; output ``(..., 2*dim)``."""
    i = torch.arange(dim, dtype=x.dtype)
    denom = 10000.0 ** (i / max(dim - 1, 1))
    arg = x[..., None] / denom
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def mlp2(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_out), nn.SiLU(), nn.Linear(d_out, d_out))


class TimeCameraEmbedding(nn.Module):
    def __init__(self, embed_dim: int, posenc_dim: int):
        super().__init__()
        self.posenc_dim = posenc_dim
        self.time_mlp = mlp2(2 * posenc_dim, embed_dim)
        self.camera_embed = nn.Linear(16, embed_dim)
        self.camera_mlp = mlp2(embed_dim, embed_dim)

    def forward(self, alpha_bar: torch.Tensor, cameras: torch.Tensor) -> torch.Tensor:
        """alpha_bar: (B,), cameras: (N, 16) -> z: (B, N, E)."""
        zt = self.time_mlp(sinusoidal_encoding(alpha_bar.sqrt(), self.posenc_dim))
        zc = self.camera_mlp(self.camera_embed(cameras))
        return zt[:, None, :] + zc[None, :, :]


class ResBlock(nn.Module):
    """Conv residual block with adaptive group norm: ``GN(h) * (1 + scale) + shift``."""

    def __init__(self, c_in: int, c_out: int, embed_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.ada = nn.Linear(embed_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.ada(F.silu(z)).chunk(2, dim=-1)
        h = self.norm2(h) * (1 + scale[..., None, None]) + shift[..., None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class MultiViewUNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = cfg = config
        ch = [cfg.base_channels * m for m in cfg.channel_multipliers]
        E, G = cfg.embed_dim, cfg.groups

        def attn(c):
            return EpipolarAttentionBlock(c, G, cfg.heads, cfg.k, cfg.R, cfg.delta, cfg.tau)

        self.embedding = TimeCameraEmbedding(E, cfg.posenc_dim)
        self.conv_in = nn.Conv2d(1, ch[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        c_prev = ch[0]
        for l, c in enumerate(ch):
            self.down_blocks.append(ResBlock(c_prev, c, E, G))
            if l in cfg.attention_levels:
                self.down_attn[str(l)] = attn(c)
            if l < cfg.levels - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            c_prev = c
        self.mid1 = ResBlock(ch[-1], ch[-1], E, G)
        self.mid2 = ResBlock(ch[-1], ch[-1], E, G)
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsample = nn.ModuleList()
        for l, c in enumerate(ch):
            self.up_blocks.append(ResBlock(2 * c, c, E, G))
            if l in cfg.attention_levels:
                self.up_attn[str(l)] = attn(c)
            if l > 0:
                self.upsample.append(nn.Conv2d(c, ch[l - 1], 3, padding=1))
        self.norm_out = nn.GroupNorm(G, ch[0])
        self.conv_out = nn.Conv2d(ch[0], 1, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # default torch init is fan-in uniform; the output conv starts at zero
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def set_attention(self, **kwargs) -> None:
        """Override k, R, delta or tau on every attention block."""
        for block in list(self.down_attn.values()) + list(self.up_attn.values()):
            for key, val in kwargs.items():
                if val is not None:
                    setattr(block, key, val)

    def forward(self, x_t: torch.Tensor, alpha_bar: torch.Tensor, rig: CameraRig,
                neighbors: np.ndarray | None = None) -> torch.Tensor:
        B, N, H, W = x_t.shape
        cfg = self.config
        if N != len(rig) or (H, W) != (cfg.resolution, cfg.resolution):
            raise ValueError(f"input {tuple(x_t.shape)} does not match the denoiser configuration")
        alpha_bar = torch.as_tensor(alpha_bar, dtype=x_t.dtype).reshape(-1).expand(B)
        cams = torch.as_tensor(flatten_extrinsics(rig), dtype=x_t.dtype)
        z = self.embedding(alpha_bar, cams).reshape(B * N, -1)
        depth = x_t.detach()

        h = self.conv_in(x_t.reshape(B * N, 1, H, W))
        skips = []
        for l, block in enumerate(self.down_blocks):
            h = block(h, z)
            if str(l) in self.down_attn:
                h = self.down_attn[str(l)](h, depth, rig, neighbors)
            skips.append(h)
            if l < cfg.levels - 1:
                h = self.downsample[l](h)
        h = self.mid2(self.mid1(h, z), z)
        for l in reversed(range(cfg.levels)):
            h = self.up_blocks[l](torch.cat([h, skips[l]], dim=1), z)
            if str(l) in self.up_attn:
                h = self.up_attn[str(l)](h, depth, rig, neighbors)
            if l > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[l - 1](h)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out.reshape(B, N, H, W)


def build_denoiser(config: DenoiserConfig, seed: int = 0, dtype=torch.float32) -> MultiViewUNet:
    torch.manual_seed(seed)
    return MultiViewUNet(config).to(dtype)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: nn.Module
    losses: list[float] = field(default_factory=list)


def train(model: nn.Module, samples: np.ndarray, rig: CameraRig, schedule: NoiseSchedule,
          epochs: int, seed: int = 0, batch_size: int = 8, lr: float = 2e-4,
          log=None) -> TrainResult:
    """Adam (betas 0.9/0.999) on the epsilon objective; returns per-epoch mean loss."""
    if len(samples) == 0:
        raise ValueError("empty dataset")
    dtype = next(model.parameters()).dtype
    data = torch.as_tensor(np.asarray(samples), dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))
    losses = []
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(data), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(data), batch_size):
            batch = data[order[start:start + batch_size]]
            loss = training_loss(model, batch, schedule, rig, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        losses.append(total / count)
        if log is not None:
            log(epoch + 1, losses[-1])
    model.eval()
    return TrainResult(model, losses)


def gradient_check(model: nn.Module, x0: torch.Tensor, t: int, schedule: NoiseSchedule,
                   rig: CameraRig, coords: int = 200, h: float = 1e-4, seed: int = 0,
                   eps: torch.Tensor | None = None) -> float:
    """Max relative error between autograd and central-difference parameter gradients.

    Runs in double precision on ``coords`` random parameter coordinates spread
    evenly over the parameter tensors. The relative error of one coordinate is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)`` with ``floor`` = 1e-3 of the
    largest sampled gradient magnitude, so coordinates with vanishing gradient
    are judged on an absolute scale.
    """
    model = model.double()
    x0 = torch.as_tensor(x0, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    if eps is None:
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    tt = torch.full((x0.shape[0],), int(t), dtype=torch.long)

    def loss_fn():
        return training_loss(model, x0, schedule, rig, t=tt, eps=eps)

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]
    # spread coordinates over tensors round-robin so every layer is exercised
    rng = np.random.default_rng(seed)
    per = np.full(len(params), coords // len(params))
    per[rng.permutation(len(params))[:coords % len(params)]] += 1
    picks = []
    for pi, (p, n_i) in enumerate(zip(params, per)):
        n_i = min(int(n_i), p.numel())
        picks += [(pi, int(i)) for i in rng.choice(p.numel(), size=n_i, replace=False)]
    analytic, numeric = [], []
    with torch.no_grad():
        for pi, idx in picks:
            p = params[pi].view(-1)
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(grads[pi].view(-1)[idx].item())
    a = np.array(analytic)
    n = np.array(numeric)
    floor = max(1e-3 * np.max(np.abs(a)), 1e-12)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: MultiViewUNet, extra: dict | None = None) -> None:
    meta = {"kind": "checkpoint", "config": model.config.to_dict()}
    if extra:
        meta.update(extra)
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_tensors(path, meta, tensors)


def load_checkpoint(path) -> tuple[MultiViewUNet, dict]:
    meta, tensors = read_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    model = MultiViewUNet(DenoiserConfig.from_dict(meta["config"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model, meta
