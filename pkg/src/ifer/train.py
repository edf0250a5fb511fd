"""Training stages: toy-GAN pretraining, inversion training/fine-tuning, FER."""
from __future__ import annotations

import base64
import dataclasses
import functools
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .critic import PatchCritic, SiameseCritic, critic_loss, critic_objective, encoder_objective
from .encoder import ASITEncoder
from .faces import CLASSES, NUM_CLASSES, dataset_arrays
from .fer import FERHead, IFERModel
from .objectives import ProxyTrunk, composite_inversion_loss
from .synthesis import ToyGenerator, parameter_checksum

log = logging.getLogger(__name__)

GAN_STAGE = "gan"
INVERSION_STAGES = ("inversion", "finetune")
FER_STAGE = "fer"
FER_DATA_OFFSET = 1000  # FER corpus seed = data_seed + offset, disjoint from the inversion corpus


class DivergenceError(RuntimeError):
    pass


class FrozenGeneratorError(RuntimeError):
    pass


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def arch_record(cfg: RunConfig, with_head: bool = False) -> dict:
    rec = {
        "generator": _jsonable(cfg.generator_config()),
        "encoder": _jsonable(cfg.encoder_config()),
        "critic": {"widths": list(cfg.critic_widths), "embed_dim": cfg.embed_dim},
    }
    if with_head:
        rec["head"] = _jsonable(cfg.head_config())
    return rec


def _rng_state(gen: torch.Generator) -> dict:
    return {"torch_generator": base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")}


def restore_rng(state: dict) -> torch.Generator:
    gen = torch.Generator()
    raw = np.frombuffer(base64.b64decode(state["torch_generator"]), dtype=np.uint8).copy()
    gen.set_state(torch.from_numpy(raw))
    return gen


def _optimizer(params, cfg: RunConfig, lr: float, betas=(0.9, 0.999)):
    if not isinstance(params, list) or not params or not isinstance(params[0], dict):
        params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=lr, betas=betas, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=lr, betas=betas)


def _check_finite(step: int, **losses) -> None:
    for name, value in losses.items():
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise DivergenceError(f"{name} became {value} at step {step}; aborting")


@functools.lru_cache(maxsize=16)
def _rendered(n: int, seed: int, split: str):
    images, labels = dataset_arrays(n, seed, split)
    images.setflags(write=False)
    labels.setflags(write=False)
    return images, labels


def corpus(n: int, seed: int, split: str = "train"):
    """Rendered toy faces as (float32 images [n, 3, 64, 64], int64 labels [n]) tensors."""
    images, labels = _rendered(n, seed, split)
    return torch.tensor(images), torch.tensor(labels)


def fer_corpus(cfg: RunConfig, split: str, n: int):
    return corpus(n, cfg.data_seed + FER_DATA_OFFSET, split)


def _sample(gen: torch.Generator, n_total: int, batch: int) -> torch.Tensor:
    return torch.randint(n_total, (batch,), generator=gen)


# ---------------------------------------------------------------------------
# model assembly


def build_generator(cfg: RunConfig, ckpt: Checkpoint | None = None) -> ToyGenerator:
    gen = ToyGenerator(cfg.generator_config())
    if ckpt is not None:
        ckpt.load_into("generator", gen)
    return gen


def frozen_generator(cfg: RunConfig, ckpt: Checkpoint) -> ToyGenerator:
    gen = build_generator(cfg, ckpt)
    for p in gen.parameters():
        p.requires_grad_(False)
    return gen.eval()


def proxy_trunk(cfg: RunConfig, ckpt: Checkpoint) -> ProxyTrunk:
    critic = PatchCritic(cfg.critic_widths)
    ckpt.load_into("gan_critic", critic)
    return ProxyTrunk(critic.trunk)


def build_encoder(cfg: RunConfig, ckpt: Checkpoint | None = None) -> ASITEncoder:
    enc = ASITEncoder(cfg.encoder_config())
    if ckpt is not None:
        ckpt.load_into("encoder", enc)
    return enc


def load_checkpoint(cfg: RunConfig, path, stages, with_head: bool = False) -> Checkpoint:
    return Checkpoint.load(path, expected_arch=arch_record(cfg, with_head), stages=stages)


# ---------------------------------------------------------------------------
# stage 0: toy GAN


def pretrain_generator(cfg: RunConfig, history: list | None = None) -> Checkpoint:
    """Least-squares GAN pretraining of the toy generator on rendered faces."""
    torch.manual_seed(cfg.seed)
    gen = build_generator(cfg)
    critic = PatchCritic(cfg.critic_widths)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    images, _ = corpus(cfg.n_train, cfg.data_seed, "train")
    opt_g = _optimizer(gen.parameters(), cfg, cfg.gan_lr, betas=(0.0, 0.99))
    opt_d = _optimizer(critic.parameters(), cfg, cfg.gan_lr, betas=(0.0, 0.99))
    d = cfg.style_dim
    for step in range(cfg.iterations):
        real = images[_sample(rng, len(images), cfg.batch_size)]
        z = torch.randn(cfg.batch_size, d, generator=rng)
        with torch.no_grad():
            fake = gen.generate(z).raw
        if cfg.r1_gamma > 0:
            real.requires_grad_(True)
        d_real = critic(real)
        d_loss = critic_objective(d_real, critic(fake))
        penalty = d_loss.new_zeros(())
        if cfg.r1_gamma > 0:
            (grad,) = torch.autograd.grad(d_real.sum(), real, create_graph=True)
            penalty = 0.5 * cfg.r1_gamma * grad.pow(2).sum(dim=(1, 2, 3)).mean()
        opt_d.zero_grad(set_to_none=True)
        (d_loss + penalty).backward()
        opt_d.step()

        z = torch.randn(cfg.batch_size, d, generator=rng)
        g_loss = encoder_objective(critic(gen.generate(z).raw))
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        _check_finite(step, critic=d_loss, generator=g_loss)
        if history is not None:
            history.append({"step": step, "critic": d_loss.item(), "generator": g_loss.item()})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("gan step %d critic %.4f generator %.4f", step, d_loss.item(), g_loss.item())

    gen.w_avg.copy_(gen.mean_latent(cfg.w_avg_samples, seed=cfg.seed))
    ckpt = Checkpoint(stage=GAN_STAGE, iteration=cfg.iterations, arch=arch_record(cfg),
                      rng_state=_rng_state(rng), meta={"seed": cfg.seed})
    ckpt.add_module("generator", gen)
    ckpt.add_module("gan_critic", critic)
    return ckpt


@torch.no_grad()
def sample_images(gen: ToyGenerator, n: int, seed: int, batch: int = 64) -> torch.Tensor:
    rng = torch.Generator().manual_seed(seed)
    out = []
    for i in range(0, n, batch):
        z = torch.randn(min(batch, n - i), gen.cfg.style_dim, generator=rng)
        out.append(gen.generate(z).image)
    return torch.cat(out)


# ---------------------------------------------------------------------------
# stage 1/2: inversion training and fine-tuning


def _inversion_modules(cfg: RunConfig, ckpt: Checkpoint):
    gen = frozen_generator(cfg, ckpt)
    trunk = proxy_trunk(cfg, ckpt)
    encoder = build_encoder(cfg, ckpt if ckpt.has("encoder") else None)
    encoder.latent_avg.copy_(gen.w_avg)
    critic = SiameseCritic(cfg.critic_widths, cfg.embed_dim, cfg.momentum)
    if ckpt.has("critic"):
        ckpt.load_into("critic", critic)
    else:
        critic.load_trunk(trunk.trunk)
    return gen, trunk, encoder, critic


def train_inversion(cfg: RunConfig, ckpt: Checkpoint, images: torch.Tensor | None = None,
                    stage: str = "inversion", history: list | None = None) -> Checkpoint:
    """Alternate one critic step and one encoder step, then update m_k.

    The generator (and proxy trunk) stay frozen; a checksum comparison enforces it.
    """
    if ckpt.stage not in (GAN_STAGE, *INVERSION_STAGES):
        raise CheckpointError(f"inversion training needs a gan/inversion checkpoint, got {ckpt.stage!r}")
    torch.manual_seed(cfg.seed)
    gen, trunk, encoder, critic = _inversion_modules(cfg, ckpt)
    before = parameter_checksum(gen)
    if images is None:
        images, _ = corpus(cfg.n_train, cfg.data_seed, "train")
    rng = torch.Generator().manual_seed(cfg.seed + 2)
    weights = cfg.loss_weights()
    opt_e = _optimizer(encoder.parameters(), cfg, cfg.lr)
    opt_c = _optimizer(critic.q.parameters(), cfg, cfg.critic_lr)
    encoder.train()
    for step in range(cfg.iterations):
        x = images[_sample(rng, len(images), cfg.batch_size)]
        seeds = torch.randint(0, 2 ** 31 - 1, (6,), generator=rng).tolist()
        out = encoder(x)
        trace = gen.synthesize(out.structure, out.codes)
        y = trace.raw

        c_loss = critic_loss(critic, x, y, seeds[:4])
        opt_c.zero_grad(set_to_none=True)
        c_loss.backward()
        opt_c.step()

        g_pyr = list(reversed(trace.features))  # generator features fine -> coarse, like the encoder's
        breakdown = composite_inversion_loss(x, y, out.codes.codes, gen.w_avg, critic, out.pyramid, g_pyr,
                                             trunk, weights, seeds[4:])
        opt_e.zero_grad(set_to_none=True)
        breakdown.total.backward()
        opt_e.step()
        critic.update_momentum()

        _check_finite(step, critic=c_loss, encoder=breakdown.total)
        if history is not None:
            history.append({"step": step, "critic": c_loss.item(), **breakdown.as_dict()})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d critic %.4f %s", stage, step, c_loss.item(),
                     " ".join(f"{k} {v:.4f}" for k, v in breakdown.as_dict().items()))

    if parameter_checksum(gen) != before:
        raise FrozenGeneratorError("generator parameters changed during inversion training")
    encoder.eval()
    out_ckpt = Checkpoint(stage=stage, iteration=cfg.iterations, arch=arch_record(cfg),
                          rng_state=_rng_state(rng),
                          meta={"seed": cfg.seed, "generator_checksum": before})
    out_ckpt.add_module("generator", gen)
    out_ckpt.add_module("gan_critic", _gan_critic(cfg, ckpt))
    out_ckpt.add_module("encoder", encoder)
    out_ckpt.add_module("critic", critic)
    return out_ckpt


def _gan_critic(cfg: RunConfig, ckpt: Checkpoint) -> PatchCritic:
    critic = PatchCritic(cfg.critic_widths)
    ckpt.load_into("gan_critic", critic)
    return critic


def finetune_inversion(cfg: RunConfig, ckpt: Checkpoint, history: list | None = None) -> Checkpoint:
    """Continue inversion training on the FER training split."""
    if ckpt.stage not in INVERSION_STAGES:
        raise CheckpointError(f"fine-tuning needs an inversion checkpoint, got {ckpt.stage!r}")
    images, _ = fer_corpus(cfg, "train", cfg.n_train)
    return train_inversion(cfg, ckpt, images=images, stage="finetune", history=history)


# ---------------------------------------------------------------------------
# stage 3: FER


def train_fer(cfg: RunConfig, ckpt: Checkpoint | None, history: list | None = None):
    """Train encoder + head with cross-entropy. Returns (checkpoint, report)."""
    if not cfg.from_scratch:
        if ckpt is None or ckpt.stage not in INVERSION_STAGES:
            raise CheckpointError("train-fer needs an inversion/finetune checkpoint unless from_scratch is set")
    torch.manual_seed(cfg.seed)
    encoder = build_encoder(cfg, None if cfg.from_scratch else ckpt)
    gen = None
    if ckpt is not None and ckpt.has("generator"):
        gen = frozen_generator(cfg, ckpt)
        if not cfg.from_scratch:
            encoder.latent_avg.copy_(gen.w_avg)
    before = parameter_checksum(gen) if gen is not None else None
    head = FERHead(cfg.head_config())
    model = IFERModel(encoder, head)
    images, labels = fer_corpus(cfg, "train", cfg.n_train)
    counts = np.bincount(labels.numpy(), minlength=NUM_CLASSES)
    if counts.min() == 0 or counts.max() > 1.5 * counts.min():
        log.warning("class-imbalanced FER training set: counts %s", counts.tolist())
    rng = torch.Generator().manual_seed(cfg.seed + 3)
    opt = _optimizer(model.parameters(), cfg, cfg.lr)
    model.train()
    for step in range(cfg.iterations):
        idx = _sample(rng, len(images), cfg.batch_size)
        loss = F.cross_entropy(model(images[idx]), labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _check_finite(step, fer=loss)
        if history is not None:
            history.append({"step": step, "fer": loss.item()})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("fer step %d loss %.4f", step, loss.item())
    recalibrate_norm(model, images, cfg.batch_size)
    model.eval()
    if gen is not None and parameter_checksum(gen) != before:
        raise FrozenGeneratorError("generator parameters changed during FER training")

    out = Checkpoint(stage=FER_STAGE, iteration=cfg.iterations, arch=arch_record(cfg, with_head=True),
                     rng_state=_rng_state(rng),
                     meta={"seed": cfg.seed, "from_scratch": cfg.from_scratch, "head_mode": cfg.head_mode})
    if gen is not None:
        out.add_module("generator", gen)
        out.meta["generator_checksum"] = before
    out.add_module("encoder", encoder)
    out.add_module("head", head)
    test_images, test_labels = fer_corpus(cfg, "test", cfg.n_eval)
    report = fer_report(model, test_images, test_labels)
    report.update(head_mode=cfg.head_mode, from_scratch=cfg.from_scratch, iteration=cfg.iterations)
    return out, report


@torch.no_grad()
def recalibrate_norm(model: IFERModel, images: torch.Tensor, batch: int) -> None:
    """Re-estimate the head's batch-norm statistics with the final encoder.

    Running averages collected during training lag behind the moving encoder,
    and the per-face spread of its outputs is small next to that lag.
    """
    norms = [m for m in model.head.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    model.eval()
    for norm in norms:
        norm.reset_running_stats()
        norm.momentum = None  # cumulative average
        norm.train()
    for i in range(0, len(images) - batch + 1, batch):
        model(images[i:i + batch])
    for norm in norms:
        norm.momentum = 0.1
    model.eval()


@torch.no_grad()
def predict(model: IFERModel, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    model.eval()
    return torch.cat([model(images[i:i + batch]).argmax(-1) for i in range(0, len(images), batch)]).numpy()


def fer_report(model: IFERModel, images: torch.Tensor, labels: torch.Tensor) -> dict:
    pred = predict(model, images)
    truth = labels.numpy()
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    per_class = {}
    for i, name in enumerate(CLASSES):
        n = confusion[i].sum()
        per_class[name] = float(confusion[i, i] / n) if n else 0.0
    return {
        "mode": "fer",
        "proxy_metrics": False,
        "n": int(len(truth)),
        "accuracy": float((pred == truth).mean()),
        "per_class_accuracy": per_class,
        "confusion_matrix": confusion.tolist(),
    }


def build_fer_model(cfg: RunConfig, ckpt: Checkpoint) -> IFERModel:
    encoder = build_encoder(cfg, ckpt)
    head = FERHead(cfg.head_config(ckpt.meta.get("head_mode", cfg.head_mode)))
    ckpt.load_into("head", head)
    return IFERModel(encoder, head).eval()
