"""Procedural toy faces with rule-defined expression labels.

Faces are drawn analytically (soft-edged ellipses, segments and a mouth band)
so the renderer is pure numpy and exactly reproducible. The expression label is
a decision list over the four expression parameters; the jitter seed only
touches colours and small placement offsets and never the label.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLASSES = ("neutral", "happy", "sad", "surprise", "fear", "disgust", "anger")
NUM_CLASSES = len(CLASSES)
SPLITS = ("train", "val", "test")
IMAGE_SIZE = 64

_RANGES = {
    "cx": (0.4, 0.6),
    "cy": (0.4, 0.6),
    "ax": (0.26, 0.36),
    "ay": (0.32, 0.42),
    "tone": (0.0, 1.0),
    "eye_open": (0.0, 1.0),
    "brow": (-1.0, 1.0),
    "mouth_curve": (-1.0, 1.0),
    "mouth_open": (0.0, 1.0),
}

# Per-class sampling boxes; each sits inside its label region with a margin.
# Keys not listed fall back to the full range of the parameter.
_CLASS_BOXES = {
    "neutral": {"mouth_curve": (-0.25, 0.25), "mouth_open": (0.0, 0.4),
                "eye_open": (0.45, 0.9), "brow": (-0.25, 0.25)},
    "happy": {"mouth_curve": (0.6, 1.0), "mouth_open": (0.0, 0.45),
              "eye_open": (0.3, 0.8), "brow": (-0.2, 0.3)},
    "sad": {"mouth_curve": (-1.0, -0.6), "mouth_open": (0.0, 0.3),
            "eye_open": (0.3, 0.7), "brow": (0.1, 0.6)},
    "surprise": {"mouth_curve": (-0.2, 0.2), "mouth_open": (0.75, 1.0),
                 "eye_open": (0.85, 1.0), "brow": (0.3, 1.0)},
    "fear": {"mouth_curve": (-0.5, -0.1), "mouth_open": (0.75, 1.0),
             "eye_open": (0.3, 0.6), "brow": (0.2, 0.8)},
    "disgust": {"mouth_curve": (-0.3, 0.2), "mouth_open": (0.0, 0.35),
                "eye_open": (0.0, 0.2), "brow": (-0.3, 0.2)},
    "anger": {"mouth_curve": (-0.3, 0.1), "mouth_open": (0.0, 0.4),
              "eye_open": (0.4, 0.9), "brow": (-1.0, -0.6)},
}

_SPLIT_SEED_STRIDE = 1 << 40


@dataclass(frozen=True)
class FaceParams:
    cx: float = 0.5
    cy: float = 0.5
    ax: float = 0.31
    ay: float = 0.37
    tone: float = 0.3
    eye_open: float = 0.5
    brow: float = 0.0
    mouth_curve: float = 0.0
    mouth_open: float = 0.5
    jitter_seed: int = 0

    def validate(self) -> None:
        for name, (lo, hi) in _RANGES.items():
            value = getattr(self, name)
            if not np.isfinite(value) or not lo <= value <= hi:
                raise ValueError(f"FaceParams.{name}={value} outside [{lo}, {hi}]")
        if int(self.jitter_seed) != self.jitter_seed or self.jitter_seed < 0:
            raise ValueError(f"jitter_seed must be a non-negative integer, got {self.jitter_seed}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def expression_label(p: FaceParams) -> int:
    """Class index for a parameter set. Total over the parameter space."""
    if p.mouth_open > 0.6:
        return CLASSES.index("surprise") if p.eye_open > 0.7 else CLASSES.index("fear")
    if p.mouth_curve > 0.4:
        return CLASSES.index("happy")
    if p.brow < -0.4:
        return CLASSES.index("anger")
    if p.mouth_curve < -0.4:
        return CLASSES.index("sad")
    if p.eye_open < 0.3:
        return CLASSES.index("disgust")
    return CLASSES.index("neutral")


def face_box(p: FaceParams) -> tuple[float, float, float, float]:
    """Face ellipse bounding box as (x0, y0, x1, y1) in normalised coordinates."""
    return (p.cx - p.ax, p.cy - p.ay, p.cx + p.ax, p.cy + p.ay)


def _coverage(sd: np.ndarray, size: int) -> np.ndarray:
    # signed distance (normalised units, negative inside) -> pixel coverage
    return np.clip(0.5 - sd * size, 0.0, 1.0)


def _ellipse_sd(x, y, cx, cy, ax, ay):
    r = np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2)
    return (r - 1.0) * min(ax, ay)


def _segment_sd(x, y, x0, y0, x1, y1, half_width):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(x - (x0 + t * dx), y - (y0 + t * dy)) - half_width


def _blend(canvas, colour, alpha):
    canvas *= 1.0 - alpha[..., None]
    canvas += alpha[..., None] * np.asarray(colour)[None, None, :]


def render_face(p: FaceParams, size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterise a face to a float32 array of shape [3, size, size] in [0, 1]."""
    p.validate()
    rng = np.random.default_rng(p.jitter_seed)
    jit = lambda s: float(rng.uniform(-s, s))  # noqa: E731

    coords = (np.arange(size) + 0.5) / size
    x, y = np.meshgrid(coords, coords)

    background = np.clip(np.array([0.55, 0.6, 0.7]) + rng.uniform(-0.15, 0.15, 3), 0, 1)
    light, dark = np.array([0.96, 0.82, 0.70]), np.array([0.45, 0.30, 0.20])
    skin = np.clip(light + (dark - light) * p.tone + rng.uniform(-0.04, 0.04, 3), 0, 1)
    feature = np.array([0.12, 0.08, 0.08]) + jit(0.04)
    lips = np.array([0.55, 0.12, 0.15]) + rng.uniform(-0.05, 0.05, 3)

    canvas = np.empty((size, size, 3), dtype=np.float64)
    canvas[:] = background
    _blend(canvas, skin, _coverage(_ellipse_sd(x, y, p.cx, p.cy, p.ax, p.ay), size))

    eye_dx = 0.42 * p.ax + jit(0.01)
    eye_y = p.cy - 0.22 * p.ay + jit(0.01)
    eye_w = 0.16 * p.ax
    eye_h = 0.015 + 0.055 * p.eye_open
    brow_y = eye_y - eye_h - 0.05
    brow_w = 0.2 * p.ax
    brow_tilt = 0.045 * p.brow
    for side in (-1.0, 1.0):
        ex = p.cx + side * eye_dx
        _blend(canvas, feature, _coverage(_ellipse_sd(x, y, ex, eye_y, eye_w, eye_h), size))
        # inner brow end sits closer to the face midline
        outer = (ex + side * brow_w, brow_y)
        inner = (ex - side * brow_w, brow_y - brow_tilt)
        sd = _segment_sd(x, y, outer[0], outer[1], inner[0], inner[1], 0.012)
        _blend(canvas, feature, _coverage(sd, size))

    mx = p.cx + jit(0.008)
    my = p.cy + 0.5 * p.ay + jit(0.01)
    mw = 0.38 * p.ax + jit(0.01)
    t = np.clip((x - mx) / mw, -1.0, 1.0)
    centre = my + 0.06 * p.mouth_curve * (0.5 - t * t)
    half = 0.012
    opening = 0.09 * p.mouth_open * (1.0 - t * t)
    sd = np.maximum.reduce([
        np.abs(x - mx) - mw,
        (centre - half) - y,
        y - (centre + half + opening),
    ])
    _blend(canvas, lips, _coverage(sd, size))

    return np.ascontiguousarray(np.clip(canvas, 0.0, 1.0).transpose(2, 0, 1), dtype=np.float32)


def _split_index(split: str) -> int:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    return SPLITS.index(split)


def sample_params(n: int, seed: int, split: str = "train") -> list[FaceParams]:
    """Class-balanced parameter draws; class ``i % 7`` for the i-th sample."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = _split_index(split)
    rng = np.random.default_rng([seed, k])
    out = []
    for i in range(n):
        name = CLASSES[i % NUM_CLASSES]
        box = _CLASS_BOXES[name]
        values = {key: float(rng.uniform(*box.get(key, rng_range)))
                  for key, rng_range in _RANGES.items()}
        # jitter seeds live in a split-specific band so splits never share a FaceParams
        jitter = k * _SPLIT_SEED_STRIDE + int(rng.integers(0, _SPLIT_SEED_STRIDE))
        p = FaceParams(**values, jitter_seed=jitter)
        assert expression_label(p) == i % NUM_CLASSES, (name, p)
        out.append(p)
    return out


def sample_dataset(n: int, seed: int, split: str = "train"):
    """List of ``(image, label, params)`` triples."""
    return [(render_face(p), expression_label(p), p) for p in sample_params(n, seed, split)]


def dataset_arrays(n: int, seed: int, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Stacked images ``[n, 3, 64, 64]`` and integer labels ``[n]``."""
    params = sample_params(n, seed, split)
    images = np.stack([render_face(p) for p in params])
    labels = np.array([expression_label(p) for p in params], dtype=np.int64)
    return images, labels


def dataset_hash(items) -> str:
    h = hashlib.sha256()
    for image, label, params in items:
        h.update(np.ascontiguousarray(image).tobytes())
        h.update(str(label).encode())
        h.update(repr(params).encode())
    return h.hexdigest()


def export_dataset(items, out_dir: str | Path) -> Path:
    """Write PNGs plus ``manifest.csv`` (path, class, parameters)."""
    from .imageio import save_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    fields = [f.name for f in dataclasses.fields(FaceParams)]
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class", *fields])
        for i, (image, label, params) in enumerate(items):
            name = f"{i:06d}.png"
            save_png(image, out_dir / name)
            writer.writerow([name, CLASSES[label], *(getattr(params, f) for f in fields)])
    return manifest


def load_manifest(path: str | Path):
    """Read a manifest written by :func:`export_dataset` back to (image, label, params)."""
    from .imageio import load_png

    path = Path(path)
    items = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            params = FaceParams(**{
                f.name: (int(row[f.name]) if f.name == "jitter_seed" else float(row[f.name]))
                for f in dataclasses.fields(FaceParams)
            })
            items.append((load_png(path.parent / row["path"]), CLASSES.index(row["class"]), params))
    return items
