"""Batch-pairwise similarity distributions matched with KL divergence.

For each layer, every image's pooled feature is dotted with every other
image's; a softmax over the B-1 partners gives one distribution per image.
Encoder (student) distributions are pulled toward the generator's (teacher).
"""
from __future__ import annotations

import torch
from torch import Tensor


def _off_diagonal(sim: Tensor) -> Tensor:
    b = sim.shape[0]
    mask = ~torch.eye(b, dtype=torch.bool, device=sim.device)
    return sim[mask].reshape(b, b - 1)


def _pooled_similarity(feats: Tensor) -> Tensor:
    if feats.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] features, got {tuple(feats.shape)}")
    if feats.shape[0] < 3:
        raise ValueError(
            f"similarity distributions need a batch of at least 3 (got {feats.shape[0]}): "
            "with B=2 every row has a single entry and the softmax is constant"
        )
    v = feats.mean(dim=(2, 3))
    return _off_diagonal(v @ v.t())


def layer_log_distribution(feats: Tensor) -> Tensor:
    """Row-wise log-softmax over partners b != a, shape [B, B-1]."""
    return torch.log_softmax(_pooled_similarity(feats), dim=1)


def layer_distribution(feats: Tensor) -> Tensor:
    """Row-wise softmax over partners b != a, shape [B, B-1]; rows sum to 1."""
    return layer_log_distribution(feats).exp()


def expand_rows(dist: Tensor) -> Tensor:
    """Re-insert a zero diagonal: [B, B-1] -> [B, B]."""
    b = dist.shape[0]
    full = dist.new_zeros(b, b)
    full[~torch.eye(b, dtype=torch.bool, device=dist.device)] = dist.reshape(-1)
    return full


def kl_rows(log_p: Tensor, log_q: Tensor) -> Tensor:
    """Mean over rows of KL(p || q) given log-probabilities."""
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def alignment_loss(e_pyr, g_pyr) -> Tensor:
    """Sum over paired layers of row-averaged KL(E_dis || G_dis).

    Layers are paired by position and must share spatial resolution.
    Generator features are detached.
    """
    if len(e_pyr) != len(g_pyr):
        raise ValueError(f"pyramids have {len(e_pyr)} and {len(g_pyr)} layers")
    total = None
    for i, (e, g) in enumerate(zip(e_pyr, g_pyr)):
        if e.shape[-2:] != g.shape[-2:]:
            raise ValueError(
                f"layer {i}: encoder resolution {tuple(e.shape[-2:])} "
                f"!= generator resolution {tuple(g.shape[-2:])}"
            )
        if e.shape[0] != g.shape[0]:
            raise ValueError(f"layer {i}: batch sizes {e.shape[0]} and {g.shape[0]} differ")
        term = kl_rows(layer_log_distribution(e), layer_log_distribution(g.detach()))
        total = term if total is None else total + term
    if total is None:
        raise ValueError("alignment_loss needs at least one layer")
    return total
