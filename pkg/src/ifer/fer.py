"""Feature modulation head: fuse latent codes with the structure code for FER."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoder import ASITEncoder
from .faces import NUM_CLASSES
from .synthesis import LatentCodes, modulated_conv

FUSION_MODES = ("fusion", "latents", "structure")


@dataclass
class HeadConfig:
    n_latent: int = 10
    style_dim: int = 128
    structure_dim: int = 128
    fused_dim: int = 128  # MLP output width d_f
    out_channels: int = 128
    hidden: int = 64
    mode: str = "fusion"

    def validate(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown head mode {self.mode!r}; expected one of {FUSION_MODES}")


class FeatureModulation(nn.Module):
    """s = A(sum_l M_l(code_l)); demodulated conv of the structure code with style s."""

    def __init__(self, n_latent: int, style_dim: int, structure_dim: int, fused_dim: int,
                 out_channels: int, affine_bias: bool = True):
        super().__init__()
        self.n_latent = n_latent
        self.mlps = nn.ModuleList([
            nn.Sequential(nn.Linear(style_dim, fused_dim), nn.LeakyReLU(0.2), nn.Linear(fused_dim, fused_dim))
            for _ in range(n_latent)
        ])
        self.affine = nn.Linear(fused_dim, structure_dim, bias=affine_bias)
        if affine_bias:
            nn.init.ones_(self.affine.bias)
        self.weight = nn.Parameter(torch.randn(out_channels, structure_dim, 3, 3) / math.sqrt(structure_dim * 9))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def summed_style(self, codes: Tensor) -> Tensor:
        if codes.shape[1] != self.n_latent:
            raise ValueError(f"feature modulation expects {self.n_latent} codes, got {codes.shape[1]}")
        return sum(mlp(codes[:, i]) for i, mlp in enumerate(self.mlps))

    def forward(self, codes, structure: Tensor) -> Tensor:
        codes = codes.codes if isinstance(codes, LatentCodes) else codes
        style = self.affine(self.summed_style(codes))
        out = modulated_conv(structure, self.weight, style, demodulate=True)
        return F.leaky_relu(out + self.bias[None, :, None, None], 0.2)


class Classifier(nn.Module):
    """Global average pool (when given maps) -> 2-layer MLP -> logits."""

    def __init__(self, in_dim: int, hidden: int = 64, n_classes: int = NUM_CLASSES):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 4:
            x = x.mean(dim=(2, 3))
        return self.fc2(F.relu(self.fc1(x)))

    def classify(self, x: Tensor) -> Tensor:
        return self(x).softmax(dim=-1)


class FERHead(nn.Module):
    """Full fusion, or one of the two single-path ablations.

    ``latents``: mean-pooled latent codes only; ``structure``: a plain conv on
    the structure code only.
    """

    def __init__(self, cfg: Optional[HeadConfig] = None):
        super().__init__()
        cfg = cfg or HeadConfig()
        cfg.validate()
        self.cfg = cfg
        # Inputs are batch-normalised: encoder outputs carry a large sample-independent
        # component that otherwise swamps the per-face signal.
        if cfg.mode == "latents":
            self.norm = nn.BatchNorm1d(cfg.style_dim)
        else:
            self.norm = nn.BatchNorm2d(cfg.structure_dim)
        if cfg.mode == "fusion":
            self.code_norm = nn.BatchNorm1d(cfg.n_latent * cfg.style_dim)
            # The modulated conv passes style information only through non-zero
            # inputs, so the normalised structure code is re-centred at 1.
            nn.init.ones_(self.norm.bias)
            self.fuse = FeatureModulation(cfg.n_latent, cfg.style_dim, cfg.structure_dim,
                                          cfg.fused_dim, cfg.out_channels)
            self.classifier = Classifier(cfg.out_channels, cfg.hidden)
        elif cfg.mode == "latents":
            self.classifier = Classifier(cfg.style_dim, cfg.hidden)
        else:
            self.conv = nn.Conv2d(cfg.structure_dim, cfg.out_channels, 3, padding=1)
            self.classifier = Classifier(cfg.out_channels, cfg.hidden)

    def forward(self, codes, structure: Tensor) -> Tensor:
        codes = codes.codes if isinstance(codes, LatentCodes) else codes
        if self.cfg.mode == "fusion":
            codes = self.code_norm(codes.flatten(1)).view_as(codes)
            return self.classifier(self.fuse(codes, self.norm(structure)))
        if self.cfg.mode == "latents":
            return self.classifier(self.norm(codes.mean(dim=1)))
        return self.classifier(F.leaky_relu(self.conv(self.norm(structure)), 0.2))


class IFERModel(nn.Module):
    def __init__(self, encoder: ASITEncoder, head: FERHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, image: Tensor) -> Tensor:
        out = self.encoder(image)
        return self.head(out.codes, out.structure)

    def predict_proba(self, image: Tensor) -> Tensor:
        return self(image).softmax(dim=-1)


def fer_loss(probs: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= probs.shape[-1]):
        raise ValueError(f"labels must lie in [0, {probs.shape[-1] - 1}]")
    picked = probs.gather(-1, labels.reshape(-1, 1)).squeeze(-1)
    return -torch.log(picked.clamp_min(torch.finfo(probs.dtype).tiny)).mean()
