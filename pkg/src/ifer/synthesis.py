"""Miniature style-based generator with modulated/demodulated convolution."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

PROVENANCES = ("encoder", "sampled", "mixed")


@dataclass
class LatentCodes:
    """Per-layer style vectors, ``codes`` shaped ``[B, N, d]``."""

    codes: Tensor
    provenance: str = "encoder"

    def __post_init__(self):
        if self.codes.ndim != 3:
            raise ValueError(f"latent codes must be [B, N, d], got {tuple(self.codes.shape)}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def n(self) -> int:
        return self.codes.shape[1]

    @property
    def dim(self) -> int:
        return self.codes.shape[2]


@dataclass
class SynthesisTrace:
    image: Tensor  # clamped to [0, 1]
    raw: Tensor  # pre-clamp image, used for training losses
    features: list = field(default_factory=list)  # resolutions 4, 8, 16 (coarse -> fine)


def modulated_conv(x: Tensor, weight: Tensor, style: Tensor, demodulate: bool = True,
                   eps: float = 1e-8) -> Tensor:
    """Batched modulated convolution with same padding.

    x: [B, in, H, W]; weight: [out, in, k, k]; style: [B, in] (or [in]).
    """
    if style.ndim == 1:
        style = style.unsqueeze(0).expand(x.shape[0], -1)
    out_ch, in_ch, kh, kw = weight.shape
    if style.shape[-1] != in_ch or x.shape[1] != in_ch:
        raise ValueError(
            f"modulated_conv: style length {style.shape[-1]} / input channels {x.shape[1]} "
            f"must equal kernel in-channels {in_ch}"
        )
    # Scaling the input per channel and the output per (sample, out-channel) is
    # identical to convolving with the per-sample modulated kernel, and lets one
    # shared kernel serve the whole batch.
    out = F.conv2d(x * style[:, :, None, None], weight, padding=kh // 2)
    if demodulate:
        sq = (style * style) @ weight.pow(2).sum(dim=(2, 3)).t()  # [B, out]
        out = out * torch.rsqrt(sq + eps)[:, :, None, None]
    return out


class EqualLinear(nn.Module):
    """Linear layer with unit-variance weights scaled at runtime by ``lr_mul / sqrt(fan_in)``."""

    def __init__(self, in_dim: int, out_dim: int, bias_init: float = 0.0, lr_mul: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class ModulatedConv2d(nn.Module):
    """Affine style map + modulated conv (+ bias and leaky ReLU unless ``to_rgb``)."""

    def __init__(self, in_channels, out_channels, style_dim, kernel_size=3,
                 demodulate=True, upsample=False, activate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.affine = EqualLinear(style_dim, in_channels, bias_init=1.0)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.demodulate = demodulate
        self.upsample = upsample
        self.activate = activate

    def forward(self, x: Tensor, w: Tensor) -> Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        style = self.affine(w)
        out = modulated_conv(x, self.weight * self.scale, style, self.demodulate)
        out = out + self.bias[None, :, None, None]
        if self.activate:
            out = F.leaky_relu(out, 0.2) * math.sqrt(2.0)
        return out


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    def __init__(self, dim: int, n_layers: int = 4, lr_mul: float = 0.01):
        super().__init__()
        self.norm = PixelNorm()
        self.layers = nn.ModuleList([EqualLinear(dim, dim, lr_mul=lr_mul) for _ in range(n_layers)])

    def forward(self, z: Tensor) -> Tensor:
        x = self.norm(z)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2) * math.sqrt(2.0)
        return x


@dataclass
class GeneratorConfig:
    resolution: int = 64
    style_dim: int = 128
    structure_dim: int = 128
    channels: tuple = (128, 64, 32, 16, 8)  # per resolution 4, 8, 16, ...
    mapping_layers: int = 4
    feature_resolutions: tuple = (4, 8, 16)

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.resolution)) - 1

    @property
    def n_latent(self) -> int:
        return 2 * int(math.log2(self.resolution)) - 2

    def validate(self):
        if self.resolution < 4 or self.resolution & (self.resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 4, got {self.resolution}")
        if len(self.channels) != self.n_blocks:
            raise ValueError(
                f"need {self.n_blocks} channel widths for resolution {self.resolution}, "
                f"got {len(self.channels)}"
            )


class ToyGenerator(nn.Module):
    """Skip-architecture synthesis network.

    Layer ``l`` of the ``N = 2 log2(res) - 2`` latent codes drives conv ``l``;
    the toRGB head at each resolution reuses the code of the next conv, and the
    last code drives only the final toRGB.
    """

    def __init__(self, cfg: Optional[GeneratorConfig] = None):
        super().__init__()
        cfg = cfg or GeneratorConfig()
        cfg.validate()
        self.cfg = cfg
        d = cfg.style_dim
        ch = list(cfg.channels)
        self.mapping = MappingNetwork(d, cfg.mapping_layers)
        self.const = nn.Parameter(torch.randn(1, cfg.structure_dim, 4, 4))
        self.register_buffer("w_avg", torch.zeros(d))
        self.convs = nn.ModuleList([ModulatedConv2d(cfg.structure_dim, ch[0], d)])
        self.to_rgbs = nn.ModuleList([ModulatedConv2d(ch[0], 3, d, 1, demodulate=False, activate=False)])
        for i in range(1, cfg.n_blocks):
            self.convs.append(ModulatedConv2d(ch[i - 1], ch[i], d, upsample=True))
            self.convs.append(ModulatedConv2d(ch[i], ch[i], d))
            self.to_rgbs.append(ModulatedConv2d(ch[i], 3, d, 1, demodulate=False, activate=False))

    @property
    def n_latent(self) -> int:
        return self.cfg.n_latent

    def synthesize(self, structure: Optional[Tensor], codes) -> SynthesisTrace:
        """Render from a structure code (None -> learned constant) and latent codes."""
        ws = codes.codes if isinstance(codes, LatentCodes) else codes
        if ws.ndim != 3 or ws.shape[1] != self.n_latent:
            raise ValueError(
                f"generator has {self.n_latent} style layers, got codes of shape {tuple(ws.shape)}"
            )
        batch = ws.shape[0]
        if structure is None:
            x = self.const.expand(batch, -1, -1, -1)
        else:
            if tuple(structure.shape[1:]) != tuple(self.const.shape[1:]):
                raise ValueError(
                    f"structure code shape {tuple(structure.shape[1:])} != "
                    f"base input shape {tuple(self.const.shape[1:])}"
                )
            x = structure
        features = []
        x = self.convs[0](x, ws[:, 0])
        rgb = self.to_rgbs[0](x, ws[:, 1])
        res = 4
        if res in self.cfg.feature_resolutions:
            features.append(x)
        for i in range(1, self.cfg.n_blocks):
            x = self.convs[2 * i - 1](x, ws[:, 2 * i - 1])
            x = self.convs[2 * i](x, ws[:, 2 * i])
            res *= 2
            if res in self.cfg.feature_resolutions:
                features.append(x)
            rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False)
            rgb = rgb + self.to_rgbs[i](x, ws[:, 2 * i + 1])
        raw = 0.5 + 0.5 * rgb
        return SynthesisTrace(image=raw.clamp(0.0, 1.0), raw=raw, features=features)

    def map_latent(self, z: Tensor) -> Tensor:
        return self.mapping(z)

    @torch.no_grad()
    def mean_latent(self, m: int, seed: int = 0, chunk: int = 4096) -> Tensor:
        if m <= 0:
            raise ValueError(f"mean_latent needs m >= 1, got {m}")
        gen = torch.Generator().manual_seed(seed)
        dtype = self.const.dtype
        total = torch.zeros(self.cfg.style_dim, dtype=torch.float64)
        done = 0
        while done < m:
            k = min(chunk, m - done)
            z = torch.randn(k, self.cfg.style_dim, generator=gen, dtype=dtype)
            total += self.mapping(z).double().sum(0)
            done += k
        return (total / m).to(dtype)

    def generate(self, z: Tensor) -> SynthesisTrace:
        """Unconditional sample: one mapped latent broadcast to every layer."""
        w = self.mapping(z)
        return self.synthesize(None, w.unsqueeze(1).expand(-1, self.n_latent, -1))


def style_mix(a: LatentCodes, b: LatentCodes, crossover: int) -> LatentCodes:
    """Layers ``[0, crossover)`` from ``a``, the rest from ``b``."""
    if a.codes.shape != b.codes.shape:
        raise ValueError(f"cannot mix codes of shapes {tuple(a.codes.shape)} and {tuple(b.codes.shape)}")
    if not 0 <= crossover <= a.n:
        raise ValueError(f"crossover must lie in [0, {a.n}], got {crossover}")
    mixed = torch.cat([a.codes[:, :crossover], b.codes[:, crossover:]], dim=1)
    return LatentCodes(mixed, provenance="mixed")


def parameter_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
