"""Run configuration: a flat ``key = value`` text file plus CLI overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .fer import HeadConfig
from .objectives import LossWeights
from .synthesis import GeneratorConfig

OUTPUT_ROOT_ENV = "IFER_OUTPUT_ROOT"
STAGES = ("pretrain-gan", "train-inversion", "finetune", "train-fer", "evaluate",
          "invert", "mix", "viz-attn", "make-dataset")


def _doc(text: str, default):
    return field(default=default, metadata={"doc": text})


@dataclass
class RunConfig:
    stage: str = _doc("pipeline stage this config drives", "train-inversion")
    seed: int = _doc("seed for every random draw in the run", 0)
    iterations: int = _doc("optimisation steps", 1000)
    batch_size: int = _doc("images per step (>= 3 when the alignment loss is on)", 8)
    lr: float = _doc("learning rate of the trained network", 1e-4)
    optimizer: str = _doc("adam or adamw", "adam")
    weight_decay: float = _doc("decoupled weight decay (adamw only)", 0.01)
    gan_lr: float = _doc("generator/critic learning rate for toy-GAN pretraining", 1e-3)
    r1_gamma: float = _doc("R1 gradient-penalty weight on real images during toy-GAN pretraining", 1.0)
    critic_lr: float = _doc("inversion-critic learning rate", 1e-4)
    momentum: float = _doc("EMA weight of the momentum encoder m_k", 0.999)

    lambda_pixel: float = _doc("weight of the pixel MSE term", 0.8)
    lambda_perceptual: float = _doc("weight of the perceptual-proxy term", 1.0)
    lambda_consistency: float = _doc("weight of the identity-consistency proxy term", 0.1)
    lambda_reg: float = _doc("weight of the latent regulariser", 1e-4)
    lambda_adv: float = _doc("weight of the encoder adversarial term", 1e-3)
    lambda_alig: float = _doc("weight of the distribution-alignment term", 1.0)

    image_size: int = _doc("image side in pixels", 64)
    enc_patch: int = _doc("encoder patch-embedding size", 4)
    enc_widths: tuple = _doc("encoder stage widths (4 values)", (32, 64, 128, 128))
    enc_heads: tuple = _doc("attention heads per encoder stage (4 values)", (1, 2, 4, 4))
    enc_window: int = _doc("stage window size", 4)
    branch_windows: tuple = _doc("fine, medium, coarse branch windows", (4, 4, 4))
    n_codes: tuple = _doc("coarse, medium, fine latent-code counts", (3, 4, 3))
    style_dim: int = _doc("latent code dimension d", 128)
    structure_dim: int = _doc("structure-code channels d_s", 128)
    gen_channels: tuple = _doc("generator widths at 4, 8, 16, ... px", (128, 64, 32, 16, 8))
    critic_widths: tuple = _doc("conv trunk widths of the critics", (16, 32, 64, 128))
    embed_dim: int = _doc("siamese critic embedding size", 128)
    head_mode: str = _doc("fusion, latents or structure", "fusion")
    head_fused: int = _doc("per-layer MLP output width d_f", 128)
    head_out: int = _doc("fusion conv output channels", 128)
    head_hidden: int = _doc("classifier hidden width", 64)

    data_seed: int = _doc("seed of the procedural face corpus", 0)
    n_train: int = _doc("training images rendered", 2048)
    n_eval: int = _doc("held-out images rendered for evaluation", 224)
    w_avg_samples: int = _doc("mapped samples averaged into the mean latent", 4096)
    from_scratch: bool = _doc("train-fer: start from a randomly initialised encoder", False)
    log_every: int = _doc("log a loss line every N steps (0 = never)", 100)

    out_dir: str = _doc("directory for checkpoints and reports", "")
    checkpoint: str = _doc("input checkpoint path", "")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be adam or adamw, got {self.optimizer!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lambda_alig > 0 and self.batch_size < 3 and self.stage in ("train-inversion", "finetune"):
            raise ValueError("batch_size must be >= 3 when the alignment loss is enabled")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        LossWeights(**self.weights_kwargs())

    def weights_kwargs(self) -> dict:
        return dict(pixel=self.lambda_pixel, perceptual=self.lambda_perceptual,
                    consistency=self.lambda_consistency, latent_reg=self.lambda_reg,
                    adversarial=self.lambda_adv, alignment=self.lambda_alig)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights_kwargs())

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size, patch=self.enc_patch, widths=tuple(self.enc_widths),
            heads=tuple(self.enc_heads), window=self.enc_window, branch_windows=tuple(self.branch_windows),
            n_codes=tuple(self.n_codes), style_dim=self.style_dim, structure_dim=self.structure_dim,
        )

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(resolution=self.image_size, style_dim=self.style_dim,
                               structure_dim=self.structure_dim, channels=tuple(self.gen_channels))

    def head_config(self, mode: str | None = None) -> HeadConfig:
        return HeadConfig(n_latent=sum(self.n_codes), style_dim=self.style_dim, structure_dim=self.structure_dim,
                          fused_dim=self.head_fused, out_channels=self.head_out, hidden=self.head_hidden,
                          mode=mode or self.head_mode)

    def output_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.stage

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    kind = type(f.default)
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: cannot parse boolean {raw!r}")
    if kind is tuple:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def parse_overrides(pairs) -> dict:
    """``["key=value", ...]`` -> typed dict, rejecting unknown keys."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _coerce(FIELDS[key], raw)
    return out


def read_config_text(text: str) -> dict:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        pairs.append(line)
    return parse_overrides(pairs)


def load_config(path=None, overrides=None, **kwargs) -> RunConfig:
    values = {}
    if path:
        values.update(read_config_text(Path(path).read_text()))
    values.update(overrides or {})
    values.update({k: v for k, v in kwargs.items() if v is not None})
    return RunConfig(**values)
