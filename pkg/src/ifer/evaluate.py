"""Evaluation reports, their JSON schemas, and PNG visualisations."""
from __future__ import annotations

import logging
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .faces import CLASSES
from .imageio import heat_overlay, hstack, load_png, save_png
from .objectives import consistency_loss, fid_proxy, perceptual_distance, pixel_loss, psnr_from_mse, ssim
from .synthesis import LatentCodes, style_mix
from .train import (FER_STAGE, INVERSION_STAGES, build_encoder, build_fer_model, corpus, fer_corpus,
                    fer_report, frozen_generator, proxy_trunk)

log = logging.getLogger(__name__)

_NUM = {"type": "number"}
INVERSION_REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mode", "proxy_metrics", "stage", "iteration", "n", "mse", "psnr", "ssim",
                 "perceptual_proxy", "consistency_proxy", "fid_proxy"],
    "properties": {
        "mode": {"const": "inversion"},
        "proxy_metrics": {"const": True},
        "stage": {"type": "string"},
        "iteration": {"type": "integer", "minimum": 0},
        "n": {"type": "integer", "minimum": 1},
        "mse": {"type": "number", "minimum": 0},
        "psnr": _NUM,
        "ssim": _NUM,
        "perceptual_proxy": {"type": "number", "minimum": 0},
        "consistency_proxy": {"type": "number", "minimum": 0},
        "fid_proxy": {"type": ["number", "null"]},
    },
}
_ACC = {"type": "number", "minimum": 0, "maximum": 1}
FER_REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mode", "proxy_metrics", "n", "accuracy", "per_class_accuracy", "confusion_matrix"],
    "properties": {
        "mode": {"const": "fer"},
        "proxy_metrics": {"const": False},
        "n": {"type": "integer", "minimum": 1},
        "accuracy": _ACC,
        "per_class_accuracy": {
            "type": "object",
            "additionalProperties": False,
            "required": list(CLASSES),
            "properties": {c: _ACC for c in CLASSES},
        },
        "confusion_matrix": {
            "type": "array", "minItems": len(CLASSES), "maxItems": len(CLASSES),
            "items": {"type": "array", "minItems": len(CLASSES), "maxItems": len(CLASSES),
                      "items": {"type": "integer", "minimum": 0}},
        },
        "head_mode": {"type": "string"},
        "from_scratch": {"type": "boolean"},
        "iteration": {"type": "integer", "minimum": 0},
        "stage": {"type": "string"},
    },
}


def validate_report(report: dict) -> None:
    schema = INVERSION_REPORT_SCHEMA if report.get("mode") == "inversion" else FER_REPORT_SCHEMA
    jsonschema.validate(report, schema)


@torch.no_grad()
def invert_images(cfg: RunConfig, ckpt: Checkpoint, images: torch.Tensor, batch: int = 32):
    """Clamped inversions G(E(x)) for a batch of images."""
    gen = frozen_generator(cfg, ckpt)
    encoder = build_encoder(cfg, ckpt).eval()
    out = []
    for i in range(0, len(images), batch):
        enc = encoder(images[i:i + batch])
        out.append(gen.synthesize(enc.structure, enc.codes).image)
    return torch.cat(out)


@torch.no_grad()
def inversion_metrics(trunk, sources: torch.Tensor, inversions: torch.Tensor) -> dict:
    mses = ((sources - inversions) ** 2).mean(dim=(1, 2, 3)).double().numpy()
    n = len(sources)
    try:
        fid = fid_proxy(trunk, inversions, sources)
    except ValueError:
        fid = None
    return {
        "n": int(n),
        "mse": float(mses.mean()),
        "psnr": float(np.mean([psnr_from_mse(m) for m in mses])),
        "ssim": float(np.mean([float(ssim(sources[i], inversions[i])) for i in range(n)])),
        "perceptual_proxy": float(perceptual_distance(trunk, sources, inversions)),
        "consistency_proxy": max(float(consistency_loss(trunk, sources, inversions)), 0.0),
        "fid_proxy": fid,
    }


def evaluate(cfg: RunConfig, ckpt: Checkpoint, mode: str, images: torch.Tensor | None = None,
             labels: torch.Tensor | None = None, reconstructions: torch.Tensor | None = None) -> dict:
    """JSON-ready metric report.

    ``reconstructions`` overrides the model's inversions (e.g. to score y against y).
    """
    if mode == "inversion":
        if ckpt.stage not in INVERSION_STAGES:
            raise CheckpointError(f"inversion evaluation needs an inversion checkpoint, got {ckpt.stage!r}")
        if images is None:
            images, _ = corpus(cfg.n_eval, cfg.data_seed, "test")
        recon = reconstructions if reconstructions is not None else invert_images(cfg, ckpt, images)
        report = {"mode": "inversion", "proxy_metrics": True, "stage": ckpt.stage,
                  "iteration": int(ckpt.iteration)}
        report.update(inversion_metrics(proxy_trunk(cfg, ckpt), images, recon))
    elif mode == "fer":
        if ckpt.stage != FER_STAGE:
            raise CheckpointError(f"fer evaluation needs a fer checkpoint, got {ckpt.stage!r}")
        if images is None:
            images, labels = fer_corpus(cfg, "test", cfg.n_eval)
        report = fer_report(build_fer_model(cfg, ckpt), images, labels)
        report.update(stage=ckpt.stage, iteration=int(ckpt.iteration),
                      head_mode=ckpt.meta.get("head_mode", cfg.head_mode),
                      from_scratch=bool(ckpt.meta.get("from_scratch", False)))
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    validate_report(report)
    return report


# ---------------------------------------------------------------------------
# visualisation


def read_images(paths, size: int):
    """Load PNGs, skipping (and logging) unreadable files."""
    ok, images = [], []
    for path in paths:
        try:
            images.append(load_png(path, size))
            ok.append(Path(path))
        except Exception as exc:  # noqa: BLE001  (PIL raises a variety of types)
            log.warning("skipping unreadable image %s: %s", path, exc)
    if not images:
        return ok, torch.empty(0, 3, size, size)
    return ok, torch.tensor(np.stack(images))


def invert(cfg: RunConfig, ckpt: Checkpoint, images: torch.Tensor, out_dir, names=None) -> list:
    """One two-panel (source | inversion) PNG per image."""
    out_dir = Path(out_dir)
    recon = invert_images(cfg, ckpt, images)
    paths = []
    for i in range(len(images)):
        name = names[i] if names else f"{i:04d}"
        paths.append(save_png(hstack([images[i].numpy(), recon[i].numpy()]), out_dir / f"invert_{name}.png"))
    return paths


@torch.no_grad()
def mix_images(cfg: RunConfig, ckpt: Checkpoint, img_a: torch.Tensor, img_b: torch.Tensor, crossover: int):
    """Inversions of a and b, and the image with layers [0, crossover) from a.

    The structure code always comes from b, so crossover 0 is b's own inversion.
    """
    gen = frozen_generator(cfg, ckpt)
    encoder = build_encoder(cfg, ckpt).eval()
    ea, eb = encoder(img_a[None]), encoder(img_b[None])
    inv_a = gen.synthesize(ea.structure, ea.codes).image[0]
    inv_b = gen.synthesize(eb.structure, eb.codes).image[0]
    mixed_codes = style_mix(ea.codes, eb.codes, crossover)
    mixed = gen.synthesize(eb.structure, mixed_codes).image[0]
    return inv_a, inv_b, mixed


def mix(cfg: RunConfig, ckpt: Checkpoint, img_a: torch.Tensor, img_b: torch.Tensor, crossover: int, out_dir):
    """Five-panel grid: source a, source b, inversion a, inversion b, mixed."""
    inv_a, inv_b, mixed = mix_images(cfg, ckpt, img_a, img_b, crossover)
    grid = hstack([img_a.numpy(), img_b.numpy(), inv_a.numpy(), inv_b.numpy(), mixed.numpy()])
    return save_png(grid, Path(out_dir) / f"mix_c{crossover}.png")


def viz_attn(cfg: RunConfig, ckpt: Checkpoint, images: torch.Tensor, out_dir, names=None) -> list:
    """Two-panel (source | attention overlay) PNG per image."""
    if not ckpt.has("encoder"):
        raise CheckpointError("attention visualisation needs a checkpoint with a trained encoder")
    encoder = build_encoder(cfg, ckpt).eval()
    heat = encoder.attention_map(images).numpy()
    paths = []
    for i in range(len(images)):
        name = names[i] if names else f"{i:04d}"
        src = images[i].numpy()
        paths.append(save_png(hstack([src, heat_overlay(src, heat[i])]), Path(out_dir) / f"attn_{name}.png"))
    return paths


def latent_codes_of(cfg: RunConfig, ckpt: Checkpoint, images: torch.Tensor) -> LatentCodes:
    encoder = build_encoder(cfg, ckpt).eval()
    with torch.no_grad():
        return encoder(images).codes


def reconstruction_mse(cfg: RunConfig, ckpt: Checkpoint, images: torch.Tensor) -> float:
    return float(pixel_loss(images, invert_images(cfg, ckpt, images)))
