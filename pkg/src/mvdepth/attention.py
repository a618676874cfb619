"""Epipolar line-segment cross attention.

For every query pixel, ``k`` points spread along its viewing ray around the
current depth estimate are projected into ``R`` neighbouring views. Neighbour
features are bilinearly gathered at those projections and become the keys and
values; values additionally carry the sample's normalised source-ray depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraRig
from .geometry import FAR, MIN_DEPTH, NEAR, TAU

MASKED_LOGIT = -1e4
DEFAULT_K = 10
DEFAULT_R = 3
DEFAULT_DELTA = 0.3


@dataclass
class AttentionBatch:
    query: torch.Tensor  # (M, 1, F)
    key: torch.Tensor    # (M, R*k, F)
    value: torch.Tensor  # (M, R*k, F+1), last channel = sample depth
    mask: torch.Tensor   # (M, R*k) bool, True = visible


def _rig_geometry(rig: CameraRig, h: int, w: int, neighbors: np.ndarray, dtype):
    """Per-view ray directions and per-(view, slot) relative transforms at ``h x w``."""
    N = len(rig)
    intr = [c.intrinsics.scaled(h, w) for c in rig.cameras]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dirs = np.stack([np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], -1)
                     for K in intr])
    Rn = neighbors.shape[1]
    rel_R = np.zeros((N, Rn, 3, 3))
    rel_t = np.zeros((N, Rn, 3))
    proj = np.zeros((N, Rn, 4))  # fx, fy, cx, cy of the neighbour
    for v in range(N):
        for j, r in enumerate(neighbors[v]):
            if r < 0:
                continue
            rel_R[v, j], rel_t[v, j] = rig[v].pose.relative_to(rig[r].pose)
            K = intr[r]
            proj[v, j] = (K.fx, K.fy, K.cx, K.cy)
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)
    return as_t(dirs), as_t(rel_R), as_t(rel_t), as_t(proj)


def build_epipolar_kv(key_feats: torch.Tensor, depth: torch.Tensor, rig: CameraRig,
                      k: int = DEFAULT_K, R: int = DEFAULT_R, delta: float = DEFAULT_DELTA,
                      tau: float = TAU, value_feats: torch.Tensor | None = None,
                      query_feats: torch.Tensor | None = None,
                      neighbors: np.ndarray | None = None,
                      near: float = NEAR, far: float = FAR) -> AttentionBatch:
    """Gather epipolar-segment keys/values for every pixel of every view.

    key_feats, value_feats, query_feats: (B, N, F, h, w). depth: (B, N, h, w)
    normalised depth estimate at the same resolution. ``neighbors`` is an
    (N, R) table of neighbour view indices; -1 marks an empty slot, which is
    always masked.
    """
    B, N, C, h, w = key_feats.shape
    if len(rig) != N:
        raise ValueError("rig size does not match the number of views")
    if neighbors is None:
        if R > N - 1:
            raise ValueError(f"R={R} exceeds the {N - 1} available neighbours")
        neighbors = rig.neighbor_table(R)
    neighbors = np.asarray(neighbors, dtype=np.int64)
    Rn = neighbors.shape[1]
    value_feats = key_feats if value_feats is None else value_feats
    query_feats = key_feats if query_feats is None else query_feats
    dtype = key_feats.dtype

    dirs, rel_R, rel_t, proj = _rig_geometry(rig, h, w, neighbors, dtype)
    world = near + (depth.to(dtype) + 1.0) * 0.5 * (far - near)
    offsets = torch.linspace(-delta, delta, k, dtype=dtype) if k > 1 else torch.zeros(1, dtype=dtype)
    seg = torch.clamp(world.clamp_min(MIN_DEPTH)[..., None] + offsets, min=MIN_DEPTH)  # B N h w k
    pts = seg[..., None] * dirs[None, :, :, :, None, :]  # B N h w k 3

    pr = torch.einsum("nrij,bnhwkj->bnrhwki", rel_R, pts) + rel_t[None, :, :, None, None, None, :]
    z = pr[..., 2]
    front = z > MIN_DEPTH
    zs = torch.where(front, z, torch.ones_like(z))
    P = proj[None, :, :, None, None, None, :]
    m = P[..., 0] * pr[..., 0] / zs + P[..., 2]
    n = P[..., 1] * pr[..., 1] / zs + P[..., 3]
    slot_ok = torch.as_tensor(neighbors >= 0)[None, :, :, None, None, None]
    inside = front & (m >= 0) & (m <= w - 1) & (n >= 0) & (n <= h - 1) & slot_ok

    gx = torch.where(inside, 2.0 * m / max(w - 1, 1) - 1.0, torch.zeros_like(m))
    gy = torch.where(inside, 2.0 * n / max(h - 1, 1) - 1.0, torch.zeros_like(n))
    grid = torch.stack([gx, gy], dim=-1).reshape(B * N * Rn, h, w * k, 2)

    idx = torch.as_tensor(np.clip(neighbors, 0, None)).reshape(-1)
    src = torch.cat([key_feats, value_feats, world[:, :, None]], dim=2)  # B N (2C+1) h w
    gathered = src[:, idx].reshape(B * N * Rn, 2 * C + 1, h, w)
    sampled = F.grid_sample(gathered, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    sampled = sampled.reshape(B, N, Rn, 2 * C + 1, h, w, k).permute(0, 1, 4, 5, 2, 6, 3)
    sampled = sampled.reshape(B * N * h * w, Rn * k, 2 * C + 1)
    K_ = sampled[..., :C]
    V_ = sampled[..., C:2 * C]
    d_nb = sampled[..., 2 * C]

    z_flat = z.permute(0, 1, 3, 4, 2, 5).reshape(B * N * h * w, Rn * k)
    inside_flat = inside.permute(0, 1, 3, 4, 2, 5).reshape(B * N * h * w, Rn * k)
    mask = inside_flat & ((z_flat - d_nb).abs() < tau)

    seg_norm = 2.0 * (seg - near) / (far - near) - 1.0  # B N h w k
    seg_norm = seg_norm[:, :, :, :, None, :].expand(B, N, h, w, Rn, k).reshape(B * N * h * w, Rn * k, 1)
    V_ = torch.cat([V_, seg_norm], dim=-1)
    Q_ = query_feats.permute(0, 1, 3, 4, 2).reshape(B * N * h * w, 1, C)
    return AttentionBatch(Q_, K_, V_, mask)


def epipolar_attention(batch: AttentionBatch, heads: int = 1, fold: nn.Module | None = None) -> torch.Tensor:
    """Masked scaled dot-product attention over the gathered segment samples.

    Masked logits are overwritten with -1e4 before the softmax, rows with no
    visible sample return zeros. Each head's values carry the depth channel,
    so the raw output has ``heads * (F/heads + 1)`` channels; ``fold`` maps it
    back to the feature width.
    """
    q, k, v, mask = batch.query, batch.key, batch.value, batch.mask
    M, L, C = k.shape
    if C % heads:
        raise ValueError("feature width must be divisible by the head count")
    d = C // heads
    qh = q.reshape(M, 1, heads, d).transpose(1, 2)            # M h 1 d
    kh = k.reshape(M, L, heads, d).transpose(1, 2)            # M h L d
    depth = v[..., -1:]
    vf = v[..., :-1].reshape(M, L, heads, d).transpose(1, 2)  # M h L d
    vh = torch.cat([vf, depth[:, None].expand(M, heads, L, 1)], dim=-1)
    logits = qh @ kh.transpose(-1, -2) / (d ** 0.5)           # M h 1 L
    logits = torch.where(mask[:, None, None, :], logits, torch.full_like(logits, MASKED_LOGIT))
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ vh).reshape(M, heads * (d + 1))
    seen = mask.any(dim=-1, keepdim=True).to(out.dtype)
    if fold is not None:
        out = fold(out)
    return out * seen


class EpipolarAttentionBlock(nn.Module):
    """Residual epipolar attention over (B*N, C, h, w) U-Net features."""

    def __init__(self, channels: int, groups: int = 8, heads: int = 1, k: int = DEFAULT_K,
                 R: int = DEFAULT_R, delta: float = DEFAULT_DELTA, tau: float = TAU):
        super().__init__()
        self.heads, self.k, self.R, self.delta, self.tau = heads, k, R, delta, tau
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(channels, channels, 1)
        self.to_v = nn.Conv2d(channels, channels, 1)
        self.fold = nn.Linear(heads * (channels // heads + 1), channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, depth: torch.Tensor, rig: CameraRig,
                neighbors: np.ndarray | None = None) -> torch.Tensor:
        BN, C, h, w = x.shape
        B, N = depth.shape[:2]
        if depth.shape[-2:] != (h, w):
            depth = F.adaptive_avg_pool2d(depth, (h, w))
        hn = self.norm(x)
        q, k, v = (f(hn).reshape(B, N, C, h, w) for f in (self.to_q, self.to_k, self.to_v))
        if neighbors is None:
            neighbors = rig.neighbor_table(min(self.R, N - 1))
        batch = build_epipolar_kv(k, depth, rig, self.k, neighbors.shape[1], self.delta, self.tau,
                                  value_feats=v, query_feats=q, neighbors=neighbors)
        out = epipolar_attention(batch, self.heads, self.fold)
        out = out.reshape(B, N, h, w, C).permute(0, 1, 4, 2, 3).reshape(BN, C, h, w)
        return x + self.proj(out)
