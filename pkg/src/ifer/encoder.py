"""Window/global attention inversion encoder.

A patch embedding feeds four attention stages (sides S, S/2, S/4, S/4 where
S = image / patch). Window attention is used wherever the window is smaller
than the map; the deepest stages, whose side equals the window, attend
globally. Three local-to-global branches turn stage maps into latent codes:
coarse codes from the deepest stage, medium from stage 1, fine from stage 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .synthesis import LatentCodes


def window_partition(x: Tensor, window: int) -> Tensor:
    """[B, C, H, W] -> [B * nW, window*window, C]."""
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // window, window, w // window, window)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, window * window, c)


def window_reverse(tokens: Tensor, window: int, b: int, h: int, w: int) -> Tensor:
    c = tokens.shape[-1]
    x = tokens.reshape(b, h // window, w // window, window, window, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


def check_window(side: int, window: int) -> None:
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if side % window:
        raise ValueError(f"window {window} does not divide feature-map side {side}")


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping ``window x window`` tiles."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.window = dim, heads, window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.record = False
        self.last_attn: Optional[Tensor] = None

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if h != w:
            raise ValueError(f"feature maps must be square, got {h}x{w}")
        check_window(h, self.window)
        tokens = window_partition(x, self.window)
        n = tokens.shape[1]
        qkv = self.qkv(tokens).reshape(-1, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (c // self.heads) ** -0.5
        attn = attn.softmax(dim=-1)
        if self.record:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(-1, n, c)
        return window_reverse(self.proj(out), self.window, b, h, w)


class AttentionBlock(nn.Module):
    """Pre-norm transformer block on a [B, C, H, W] map."""

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    @staticmethod
    def _ln(norm: nn.LayerNorm, x: Tensor) -> Tensor:
        return norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self._ln(self.norm1, x))
        y = self.mlp(self.norm2(x.permute(0, 2, 3, 1))).permute(0, 3, 1, 2)
        return x + y


class LocalToGlobalBranch(nn.Module):
    """Alternate window attention and 2x max-pool until the map fits one window,
    then attend globally and project to ``k`` vectors of size ``d``."""

    def __init__(self, channels: int, side: int, window: int, k: int, d: int, heads: int = 1):
        super().__init__()
        if side < window:
            raise ValueError(f"branch input side {side} is smaller than its window {window}")
        check_window(side, window)
        steps = int(round(math.log2(side // window)))
        if window * 2 ** steps != side:
            raise ValueError(f"side {side} must be window {window} times a power of two")
        self.pool_steps = steps
        self.k, self.d = k, d
        self.local = nn.ModuleList([AttentionBlock(channels, heads, window) for _ in range(steps)])
        self.globl = AttentionBlock(channels, heads, window)
        self.project = nn.Linear(channels * window * window, k * d)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.local:
            x = F.max_pool2d(block(x), 2)
        x = self.globl(x)
        return self.project(x.flatten(1)).reshape(x.shape[0], self.k, self.d)


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch: int = 4
    widths: tuple = (32, 64, 128, 128)
    heads: tuple = (1, 2, 4, 4)
    window: int = 4
    branch_windows: tuple = (4, 4, 4)  # fine, medium, coarse
    n_codes: tuple = (3, 4, 3)  # coarse, medium, fine
    style_dim: int = 128
    structure_dim: int = 128
    branch_heads: int = 1

    @property
    def n_latent(self) -> int:
        return sum(self.n_codes)

    @property
    def sides(self) -> tuple:
        s = self.image_size // self.patch
        return (s, s // 2, s // 4, s // 4)

    def validate(self):
        if self.image_size % self.patch:
            raise ValueError(f"patch {self.patch} does not divide image size {self.image_size}")
        if len(self.widths) != 4 or len(self.heads) != 4:
            raise ValueError("encoder needs exactly four stage widths and head counts")
        for side in self.sides:
            check_window(side, min(self.window, side))


class EncoderOutput(NamedTuple):
    codes: LatentCodes
    structure: Tensor
    pyramid: list


class ASITEncoder(nn.Module):
    def __init__(self, cfg: Optional[EncoderConfig] = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        cfg.validate()
        self.cfg = cfg
        w = cfg.widths
        sides = cfg.sides
        self.patch_embed = nn.Conv2d(3, w[0], cfg.patch, stride=cfg.patch)
        self.transitions = nn.ModuleList([nn.Identity()])
        for i in range(1, 4):
            if sides[i] < sides[i - 1]:
                self.transitions.append(nn.Conv2d(w[i - 1], w[i], 2, stride=2))
            else:
                self.transitions.append(nn.Conv2d(w[i - 1], w[i], 1))
        self.stages = nn.ModuleList(
            [AttentionBlock(w[i], cfg.heads[i], min(cfg.window, sides[i])) for i in range(4)]
        )
        coarse, medium, fine = cfg.n_codes
        bw_fine, bw_medium, bw_coarse = cfg.branch_windows
        d = cfg.style_dim
        self.fine = LocalToGlobalBranch(w[0], sides[0], bw_fine, fine, d, cfg.branch_heads)
        self.medium = LocalToGlobalBranch(w[1], sides[1], bw_medium, medium, d, cfg.branch_heads)
        self.coarse = LocalToGlobalBranch(w[3], sides[3], bw_coarse, coarse, d, cfg.branch_heads)
        self.structure_proj = nn.Conv2d(w[3], cfg.structure_dim, 1)
        # codes are predicted as offsets from the generator's mean latent
        self.register_buffer("latent_avg", torch.zeros(d))

    def _check_input(self, image: Tensor) -> None:
        size = self.cfg.image_size
        if image.ndim != 4 or tuple(image.shape[1:]) != (3, size, size):
            raise ValueError(f"expected images of shape [B, 3, {size}, {size}], got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise ValueError("input image contains NaN or infinite values")

    def stage_maps(self, image: Tensor) -> list:
        self._check_input(image)
        # conv kernels round differently per memory layout; pin one so equal pixels give equal codes
        x = self.patch_embed(image.contiguous())
        maps = []
        for transition, stage in zip(self.transitions, self.stages):
            x = stage(transition(x))
            maps.append(x)
        return maps

    def forward(self, image: Tensor) -> EncoderOutput:
        maps = self.stage_maps(image)
        codes = torch.cat([self.coarse(maps[3]), self.medium(maps[1]), self.fine(maps[0])], dim=1)
        codes = codes + self.latent_avg
        structure = self.structure_proj(maps[3])
        return EncoderOutput(LatentCodes(codes, "encoder"), structure, [maps[0], maps[1], maps[3]])

    encode = forward

    @torch.no_grad()
    def attention_map(self, image: Tensor) -> Tensor:
        """Receive-side attention heat of the final stage, upsampled to the image,
        min-max normalised per image. Returns [B, H, W] in [0, 1]."""
        attn_mod = self.stages[-1].attn
        attn_mod.record = True
        try:
            self.stage_maps(image)
            attn = attn_mod.last_attn
        finally:
            attn_mod.record = False
            attn_mod.last_attn = None
        return attention_heat(attn, image.shape[0], self.cfg.sides[3], attn_mod.window, self.cfg.image_size)


def attention_heat(attn: Tensor, batch: int, side: int, window: int, out_size: int) -> Tensor:
    """Reduce [B*nW, heads, T, T] weights to a min-max normalised [B, out, out] map."""
    received = attn.mean(dim=1).mean(dim=1)  # mean over heads, then over queries
    tokens = received.reshape(-1, window * window, 1)
    grid = window_reverse(tokens, window, batch, side, side)  # [B, 1, side, side]
    heat = F.interpolate(grid, size=(out_size, out_size), mode="bilinear", align_corners=False)[:, 0]
    lo = heat.amin(dim=(1, 2), keepdim=True)
    hi = heat.amax(dim=(1, 2), keepdim=True)
    span = hi - lo
    return torch.where(span > 1e-12, (heat - lo) / span.clamp_min(1e-12), torch.zeros_like(heat))


def heat_inside_box(heat: np.ndarray, box) -> tuple[float, float]:
    """Mean heat inside and outside a normalised (x0, y0, x1, y1) box."""
    size = heat.shape[-1]
    x0, y0, x1, y1 = (int(round(v * size)) for v in box)
    mask = np.zeros(heat.shape[-2:], dtype=bool)
    mask[max(y0, 0):y1, max(x0, 0):x1] = True
    return float(heat[mask].mean()), float(heat[~mask].mean())
