"""Command-line entry point: ``ifer <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluate as ev
from . import train as tr
from .checkpoint import CheckpointError
from .config import RunConfig, load_config, parse_overrides
from .faces import CLASSES, export_dataset, load_manifest, sample_dataset
from .imageio import hstack, save_png

log = logging.getLogger("ifer")

CKPT_STAGES = {
    "train-inversion": (tr.GAN_STAGE, *tr.INVERSION_STAGES),
    "finetune": tr.INVERSION_STAGES,
    "train-fer": tr.INVERSION_STAGES,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifer", description="Toy facial inversion and expression recognition.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        p.add_argument("--out", help="output directory (default $IFER_OUTPUT_ROOT/<stage>)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("pretrain-gan", "pretrain the toy generator and its patch critic")
    for name, text in (("train-inversion", "train the inversion encoder against a frozen generator"),
                       ("finetune", "continue inversion training on the FER split")):
        add(name, text).add_argument("--checkpoint", required=True)
    p = add("train-fer", "train encoder + feature-modulation head for expression recognition")
    p.add_argument("--checkpoint", help="inversion/finetune checkpoint (optional with --from-scratch)")
    p.add_argument("--from-scratch", action="store_true", help="start from a random encoder")
    p.add_argument("--head-mode", choices=("fusion", "latents", "structure"))
    p = add("evaluate", "write a JSON metric report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("inversion", "fer"), required=True)
    p.add_argument("--manifest", help="dataset manifest.csv (default: the built-in held-out split)")
    for name, text in (("invert", "write source | inversion PNGs"), ("viz-attn", "write attention overlays")):
        p = add(name, text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("images", nargs="+")
    p = add("mix", "style-mix the inversions of two images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--crossover", type=int, required=True)
    p.add_argument("img_a")
    p.add_argument("img_b")
    p = add("make-dataset", "render toy faces to PNG with a manifest")
    p.add_argument("--n", type=int, default=70)
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    return parser


def _config(args) -> RunConfig:
    overrides = parse_overrides(args.overrides)
    overrides["stage"] = args.command
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if getattr(args, "checkpoint", None):
        overrides["checkpoint"] = args.checkpoint
    if getattr(args, "from_scratch", False):
        overrides["from_scratch"] = True
    if getattr(args, "head_mode", None):
        overrides["head_mode"] = args.head_mode
    return load_config(args.config, overrides)


def _check_paths(args, cfg: RunConfig) -> None:
    """Fail before any work if an input path is missing."""
    paths = []
    if cfg.checkpoint:
        paths.append(cfg.checkpoint)
    if getattr(args, "manifest", None):
        paths.append(args.manifest)
    for name in ("img_a", "img_b"):
        if getattr(args, name, None):
            paths.append(getattr(args, name))
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"missing input path(s): {', '.join(missing)}")


def _write_json(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _write_history(history: list, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / "losses.jsonl").open("w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _load(cfg: RunConfig, stages=None):
    return tr.load_checkpoint(cfg, cfg.checkpoint, stages)


def _labelled_images(path):
    items = load_manifest(path)
    images = torch.from_numpy(np.stack([im for im, _, _ in items]))
    labels = torch.tensor([lab for _, lab, _ in items])
    return images, labels


def run(args) -> dict:
    """Execute one subcommand; returns a small summary (also printed as JSON)."""
    cfg = _config(args)
    _check_paths(args, cfg)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    cmd = args.command
    summary = {"command": cmd, "out_dir": str(out)}

    if cmd == "pretrain-gan":
        history = []
        ckpt = tr.pretrain_generator(cfg, history)
        _write_history(history, out)
        summary["checkpoint"] = str(ckpt.save(out / "gan.ckpt"))
        gen = tr.build_generator(cfg, ckpt).eval()
        samples = tr.sample_images(gen, 8, cfg.seed)
        summary["samples"] = str(save_png(hstack(list(samples.numpy())), out / "samples.png"))
    elif cmd in ("train-inversion", "finetune"):
        ckpt = _load(cfg, CKPT_STAGES[cmd])
        history = []
        if cmd == "finetune":
            result = tr.finetune_inversion(cfg, ckpt, history)
        else:
            result = tr.train_inversion(cfg, ckpt, history=history)
        _write_history(history, out)
        summary["checkpoint"] = str(result.save(out / f"{result.stage}.ckpt"))
    elif cmd == "train-fer":
        ckpt = _load(cfg, CKPT_STAGES[cmd]) if cfg.checkpoint else None
        history = []
        result, report = tr.train_fer(cfg, ckpt, history)
        _write_history(history, out)
        summary["checkpoint"] = str(result.save(out / "fer.ckpt"))
        summary["report"] = str(_write_json(report, out / "report.json"))
        summary["accuracy"] = report["accuracy"]
    elif cmd == "evaluate":
        ckpt = _load(cfg)
        images = labels = None
        if args.manifest:
            images, labels = _labelled_images(args.manifest)
        report = ev.evaluate(cfg, ckpt, args.mode, images, labels)
        summary["report"] = str(_write_json(report, out / f"report_{args.mode}.json"))
    elif cmd in ("invert", "viz-attn"):
        ckpt = _load(cfg)
        paths, images = ev.read_images(args.images, cfg.image_size)
        names = [p.stem for p in paths]
        fn = ev.invert if cmd == "invert" else ev.viz_attn
        written = fn(cfg, ckpt, images, out, names) if len(images) else []
        summary["written"] = [str(p) for p in written]
        summary["skipped"] = len(args.images) - len(paths)
    elif cmd == "mix":
        ckpt = _load(cfg)
        paths, images = ev.read_images([args.img_a, args.img_b], cfg.image_size)
        if len(paths) != 2:
            raise ValueError("mix needs two readable images")
        summary["written"] = [str(ev.mix(cfg, ckpt, images[0], images[1], args.crossover, out))]
    elif cmd == "make-dataset":
        items = sample_dataset(args.n, cfg.data_seed, args.split)
        summary["manifest"] = str(export_dataset(items, out))
        summary["classes"] = list(CLASSES)
    return summary


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        summary = run(args)
    except (CheckpointError, FileNotFoundError, ValueError, tr.DivergenceError, tr.FrozenGeneratorError) as exc:
        log.error("%s", exc)
        return 2
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
