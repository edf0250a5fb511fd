"""Siamese momentum critic used as the image-inversion discriminator.

``m_q`` sees a strongly augmented view of its input, ``m_k`` (an EMA copy of
``m_q``) a weakly augmented one; the score is the cosine similarity of their
L2-normalised embeddings. Least-squares targets are +1 for (x, x) pairs and
-1 for (inversion, x) pairs.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

REAL_TARGET = 1.0
FAKE_TARGET = -1.0


class ConvTrunk(nn.Module):
    """Four strided conv blocks; returns every block's output."""

    def __init__(self, widths=(16, 32, 64, 128), in_channels: int = 3):
        super().__init__()
        blocks = []
        prev = in_channels
        for w in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(prev, w, 3, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(w, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            ))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = prev

    def forward(self, x: Tensor) -> list:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


def minibatch_std(h: Tensor) -> Tensor:
    """Append the batch-wide feature standard deviation as one extra channel."""
    std = h.std(dim=0, unbiased=False).mean() if h.shape[0] > 1 else h.new_zeros(())
    return torch.cat([h, std.expand(h.shape[0], 1, *h.shape[2:])], dim=1)


class PatchCritic(nn.Module):
    """Least-squares patch discriminator used to pretrain the toy generator.

    The minibatch-std channel lets it see sample diversity, which keeps the
    toy generator from collapsing onto a single face.
    """

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        self.trunk = ConvTrunk(widths)
        self.head = nn.Sequential(
            nn.Conv2d(self.trunk.out_channels + 1, self.trunk.out_channels, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(self.trunk.out_channels, 1, 1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.head(minibatch_std(self.trunk(x * 2.0 - 1.0)[-1]))


class EmbeddingNet(nn.Module):
    def __init__(self, widths=(16, 32, 64, 128), embed_dim: int = 128):
        super().__init__()
        self.trunk = ConvTrunk(widths)
        self.fc = nn.Linear(self.trunk.out_channels, embed_dim)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: Tensor) -> Tensor:
        h = self.trunk(x * 2.0 - 1.0)[-1].mean(dim=(2, 3))
        return self.fc(h)


def momentum_update(theta_q: Mapping[str, Tensor], theta_k: Mapping[str, Tensor], a_m: float) -> dict:
    """Return ``a_m * theta_k + (1 - a_m) * theta_q`` for every named array."""
    if not 0.0 <= a_m < 1.0:
        raise ValueError(f"momentum weight must lie in [0, 1), got {a_m}")
    missing = set(theta_q) ^ set(theta_k)
    if missing:
        raise ValueError(f"parameter sets differ in names: {sorted(missing)}")
    out = {}
    with torch.no_grad():
        for name, q in theta_q.items():
            k = theta_k[name]
            if q.shape != k.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(q.shape)} vs {tuple(k.shape)}")
            out[name] = a_m * k + (1.0 - a_m) * q
    return out


@dataclass(frozen=True)
class AugPolicy:
    """Ranges for crop-resize, horizontal flip and brightness/contrast jitter."""

    min_crop: float = 1.0  # fraction of the side kept by the random crop
    flip_prob: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.min_crop >= 1.0 and self.flip_prob <= 0.0 and self.brightness <= 0.0 and self.contrast <= 0.0


STRONG = AugPolicy(min_crop=0.7, flip_prob=0.5, brightness=0.25, contrast=0.3)
WEAK = AugPolicy(min_crop=0.92, flip_prob=0.5, brightness=0.05, contrast=0.05)
IDENTITY = AugPolicy()
POLICIES = {"strong": STRONG, "weak": WEAK, "identity": IDENTITY}


def augment(image: Tensor, seed: int, strength="strong") -> Tensor:
    """Deterministic (given seed and policy) augmentation of a [B, 3, H, W] batch.

    Differentiable in ``image``: crops use bilinear resampling.
    """
    policy = POLICIES[strength] if isinstance(strength, str) else strength
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected [B, 3, H, W] images, got {tuple(image.shape)}")
    if policy.is_identity:
        return image
    b = image.shape[0]
    gen = torch.Generator().manual_seed(int(seed))
    u = torch.rand(b, 7, generator=gen, dtype=torch.float64)
    dtype = image.dtype
    scale = 1.0 - (1.0 - policy.min_crop) * u[:, 0]
    # crop centre offsets keep the window inside the frame
    tx = (1.0 - scale) * (2.0 * u[:, 1] - 1.0)
    ty = (1.0 - scale) * (2.0 * u[:, 2] - 1.0)
    flip = torch.where(u[:, 3] < policy.flip_prob, -1.0, 1.0)
    x = image
    if policy.min_crop < 1.0 or policy.flip_prob > 0.0:
        theta = torch.zeros(b, 2, 3, dtype=torch.float64)
        theta[:, 0, 0] = scale * flip
        theta[:, 0, 2] = tx
        theta[:, 1, 1] = scale
        theta[:, 1, 2] = ty
        grid = F.affine_grid(theta.to(dtype), list(image.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if policy.brightness > 0.0 or policy.contrast > 0.0:
        bright = (policy.brightness * (2.0 * u[:, 4] - 1.0)).to(dtype)[:, None, None, None]
        contrast = (1.0 + policy.contrast * (2.0 * u[:, 5] - 1.0)).to(dtype)[:, None, None, None]
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        x = ((x - mean) * contrast + mean + bright).clamp(0.0, 1.0)
    return x


def cosine_score(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of L2-normalised rows.

    Rounding can push the raw value a hair past +-1; the clamp is applied
    straight-through so it never zeroes the gradient.
    """
    cos = (F.normalize(a, dim=-1) * F.normalize(b, dim=-1)).sum(-1)
    return cos - (cos - cos.clamp(-1.0, 1.0)).detach()


class SiameseCritic(nn.Module):
    def __init__(self, widths=(16, 32, 64, 128), embed_dim: int = 128, momentum: float = 0.999,
                 strong="strong", weak="weak"):
        super().__init__()
        self.q = EmbeddingNet(widths, embed_dim)
        self.k = copy.deepcopy(self.q)
        for p in self.k.parameters():
            p.requires_grad_(False)
        self.momentum = momentum
        self.strong, self.weak = strong, weak

    def load_trunk(self, trunk: ConvTrunk) -> None:
        """Initialise both encoders' conv trunks from a pretrained critic trunk."""
        self.q.trunk.load_state_dict(trunk.state_dict())
        self.k.load_state_dict(self.q.state_dict())

    def score(self, img1: Tensor, img2: Tensor, seeds=(0, 1)) -> Tensor:
        """D(img1, img2) = cos(m_q(strong(img1)), m_k(weak(img2))), one per sample."""
        zq = self.q(augment(img1, seeds[0], self.strong))
        with torch.no_grad():
            zk = self.k(augment(img2, seeds[1], self.weak))
        return cosine_score(zq, zk)

    @torch.no_grad()
    def update_momentum(self) -> None:
        q = dict(self.q.named_parameters())
        k = dict(self.k.named_parameters())
        for name, value in momentum_update(q, k, self.momentum).items():
            k[name].copy_(value)


def critic_objective(d_real: Tensor, d_fake: Tensor) -> Tensor:
    return ((d_real - REAL_TARGET) ** 2 + (d_fake - FAKE_TARGET) ** 2).mean()


def encoder_objective(d_fake: Tensor) -> Tensor:
    return ((d_fake - REAL_TARGET) ** 2).mean()


def critic_loss(critic: SiameseCritic, x: Tensor, y: Tensor, seeds=(0, 1, 2, 3)) -> Tensor:
    """Critic side: push D(x, x) to +1 and D(y, x) to -1; y is detached."""
    d_real = critic.score(x, x, seeds[0:2])
    d_fake = critic.score(y.detach(), x, seeds[2:4])
    return critic_objective(d_real, d_fake)


def encoder_adv_loss(critic: SiameseCritic, x: Tensor, y: Tensor, seeds=(0, 1)) -> Tensor:
    """Encoder side: push D(y, x) to +1. Only the encoder should step on this."""
    return encoder_objective(critic.score(y, x, seeds))
