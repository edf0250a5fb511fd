"""Inversion objectives and the evaluation metric battery.

Perceptual, identity-consistency and Frechet distances are computed against a
frozen in-repo conv trunk (the pretrained toy critic's trunk) and are proxies
for LPIPS / ArcFace / Inception-based FID, not reproductions of them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .alignment import alignment_loss
from .critic import ConvTrunk, encoder_adv_loss

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FID_MIN_SET = 32


def _same_shape(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def pixel_loss(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y)
    return ((x - y) ** 2).mean()


def psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / float(mse))


def psnr(x: Tensor, y: Tensor) -> float:
    return psnr_from_mse(float(pixel_loss(x, y)))


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Mean SSIM over sliding uniform 8x8 windows and channels, data range 1."""
    _same_shape(x, y)
    if x.ndim == 3:
        x, y = x[None], y[None]
    pool = lambda t: F.avg_pool2d(t, SSIM_WINDOW, stride=1)  # noqa: E731
    mu_x, mu_y = pool(x), pool(y)
    var_x = pool(x * x) - mu_x * mu_x
    var_y = pool(y * y) - mu_y * mu_y
    cov = pool(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return (num / den).mean()


class ProxyTrunk(nn.Module):
    """Frozen feature extractor shared by the perceptual, consistency and FID proxies."""

    def __init__(self, trunk: ConvTrunk):
        super().__init__()
        self.trunk = trunk
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: Tensor) -> list:
        return self.trunk(x * 2.0 - 1.0)

    def embed(self, x: Tensor) -> Tensor:
        return self.features(x)[-1].mean(dim=(2, 3))


def _unit_channels(f: Tensor, eps: float = 1e-10) -> Tensor:
    return f * torch.rsqrt(f.pow(2).sum(dim=1, keepdim=True) + eps)


def perceptual_distance(trunk: ProxyTrunk, x: Tensor, y: Tensor) -> Tensor:
    """Sum over trunk layers of the mean squared difference of channel-normalised features."""
    _same_shape(x, y)
    total = x.new_zeros(())
    for fx, fy in zip(trunk.features(x), trunk.features(y)):
        total = total + ((_unit_channels(fx) - _unit_channels(fy)) ** 2).mean()
    return total


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    return 1.0 - F.cosine_similarity(a, b, dim=-1, eps=1e-12)


def consistency_loss(trunk: ProxyTrunk, x: Tensor, y: Tensor) -> Tensor:
    """1 - cos(embed(x), embed(y)), batch mean; lies in [0, 2]."""
    _same_shape(x, y)
    return cosine_distance(trunk.embed(x), trunk.embed(y)).mean()


def latent_reg(codes: Tensor, w_avg: Tensor) -> Tensor:
    """Mean over layers (and batch) of the squared distance to the mean latent."""
    if codes.shape[-1] != w_avg.shape[-1]:
        raise ValueError(f"code dim {codes.shape[-1]} != mean latent dim {w_avg.shape[-1]}")
    return ((codes - w_avg) ** 2).sum(dim=-1).mean()


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the symmetric form sqrt(S_a)^T S_b sqrt(S_a), whose
    eigenvalues equal those of S_a S_b; negatives from rounding are clamped.
    """
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    cov_a, cov_b = np.asarray(cov_a, np.float64), np.asarray(cov_b, np.float64)
    root_a = _psd_sqrt(cov_a)
    cross = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_embeddings(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    emb_a, emb_b = np.asarray(emb_a, np.float64), np.asarray(emb_b, np.float64)
    for name, e in (("set_a", emb_a), ("set_b", emb_b)):
        if e.shape[0] < FID_MIN_SET:
            raise ValueError(f"{name} has {e.shape[0]} samples; the Frechet proxy needs >= {FID_MIN_SET}")
    stats = [(e.mean(0), np.cov(e, rowvar=False)) for e in (emb_a, emb_b)]
    d_ab = frechet_distance(*stats[0], *stats[1])
    d_ba = frechet_distance(*stats[1], *stats[0])
    # the two evaluation orders agree analytically; averaging removes rounding asymmetry
    return max(0.5 * (d_ab + d_ba), 0.0)


@torch.no_grad()
def fid_proxy(trunk: ProxyTrunk, set_a: Tensor, set_b: Tensor, batch: int = 64) -> float:
    def embed(images):
        return torch.cat([trunk.embed(images[i:i + batch]) for i in range(0, len(images), batch)])

    if len(set_a) < FID_MIN_SET or len(set_b) < FID_MIN_SET:
        raise ValueError(f"fid_proxy needs >= {FID_MIN_SET} images per set, got {len(set_a)} and {len(set_b)}")
    return frechet_from_embeddings(embed(set_a).double().numpy(), embed(set_b).double().numpy())


@dataclass
class LossWeights:
    pixel: float = 0.8
    perceptual: float = 1.0
    consistency: float = 0.1
    latent_reg: float = 1e-4
    adversarial: float = 1e-3
    alignment: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict = field(default_factory=dict)  # name -> float
    weights: dict = field(default_factory=dict)

    def recombined(self) -> float:
        return sum(self.weights[k] * v for k, v in self.terms.items())

    def as_dict(self) -> dict:
        return {"total": self.total.item(), **self.terms}


def composite_inversion_loss(x, y, codes, w_avg, critic, e_pyr, g_pyr, trunk,
                             weights: LossWeights, seeds=(0, 1)) -> LossBreakdown:
    """Weighted inversion objective. ``y`` is the (unclamped) inversion of ``x``."""
    w = {f.name: getattr(weights, f.name) for f in fields(weights)}
    parts = {}
    if w["pixel"]:
        parts["pixel"] = pixel_loss(x, y)
    if w["perceptual"]:
        parts["perceptual"] = perceptual_distance(trunk, x, y)
    if w["consistency"]:
        parts["consistency"] = consistency_loss(trunk, x, y)
    if w["latent_reg"]:
        parts["latent_reg"] = latent_reg(codes, w_avg)
    if w["adversarial"]:
        parts["adversarial"] = encoder_adv_loss(critic, x, y, seeds)
    if w["alignment"]:
        parts["alignment"] = alignment_loss(e_pyr, g_pyr)
    total = x.new_zeros(())
    for name, value in parts.items():
        total = total + w[name] * value
    terms = {name: float(value.detach()) for name, value in parts.items()}
    return LossBreakdown(total=total, terms=terms, weights={k: w[k] for k in terms})
