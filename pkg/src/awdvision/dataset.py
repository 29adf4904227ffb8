"""Sample manifests, deterministic splits, and the synthetic pipe scene
generator that stands in for field data.

A scene is a frontal view of a vertical observation pipe (25 cm tall,
10 cm radius) with a horizontal waterline whose pixel row is linear in the
labeled water height. Disturbance knobs (lighting scale, Gaussian noise,
waterline ripple, specular streaks, camera angle jitter) perturb the image
but never the label.
"""

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from awdvision import imgio, imgproc
from awdvision.errors import ConfigError

PIPE_HEIGHT_CM = 25.0
SPLITS = ("train", "val", "test")
SOURCES = ("field", "lab", "synthetic")
MANIFEST_HEADER = ["path", "height_cm", "timestamp", "source", "split"]


@dataclass
class Sample:
    path: str
    height_cm: float
    timestamp: str = ""
    source: str = "synthetic"
    split: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.height_cm <= PIPE_HEIGHT_CM:
            raise ConfigError(
                f"height {self.height_cm} outside [0, {PIPE_HEIGHT_CM}] cm")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")


class Manifest:
    """Ordered list of samples with lossless CSV round-tripping."""

    def __init__(self, samples=None):
        self.samples = list(samples or [])

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def split(self, name):
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]

    def save(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(MANIFEST_HEADER)
            for s in self.samples:
                writer.writerow([s.path, repr(s.height_cm), s.timestamp,
                                 s.source, s.split])

    @classmethod
    def load(cls, path):
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != MANIFEST_HEADER:
                raise ConfigError(f"{path}: unexpected manifest header {header}")
            samples = [Sample(row[0], float(row[1]), row[2], row[3], row[4])
                       for row in reader]
        return cls(samples)


@dataclass(frozen=True)
class SynthConfig:
    """Scene generator knobs. ``seed`` is mandatory; all randomness in a
    dataset derives from (seed, sample index)."""

    seed: int
    image_size: tuple = (64, 64)
    pipe_height_cm: float = PIPE_HEIGHT_CM
    pipe_radius_cm: float = 10.0
    angle_jitter_deg: float = 2.0
    lighting_range: tuple = (0.75, 1.15)
    ripple_amplitude_px: float = 1.0
    reflections: bool = True
    noise_sigma: float = 0.02

    def __post_init__(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigError(f"image_size too small: {self.image_size}")
        if self.pipe_height_cm <= 0 or self.pipe_radius_cm <= 0:
            raise ConfigError("pipe dimensions must be positive")
        lo, hi = self.lighting_range
        if not (0 < lo <= hi):
            raise ConfigError(f"bad lighting_range {self.lighting_range}")
        if self.noise_sigma < 0 or self.ripple_amplitude_px < 0 \
                or self.angle_jitter_deg < 0:
            raise ConfigError("disturbance magnitudes must be >= 0")

    def quiet(self):
        """Copy with every disturbance turned off."""
        return replace(self, angle_jitter_deg=0.0, lighting_range=(1.0, 1.0),
                       ripple_amplitude_px=0.0, reflections=False,
                       noise_sigma=0.0)


def pipe_geometry(cfg):
    """Pixel geometry: (top_row, bottom_row, left_col, right_col).

    The pipe fills 78% of the image height; its width follows the physical
    aspect ratio (diameter / height), capped at 60% of the image width.
    """
    h, w = cfg.image_size
    ph = int(round(0.78 * h))
    top = (h - ph) // 2
    aspect = 2.0 * cfg.pipe_radius_cm / cfg.pipe_height_cm
    pw = min(int(round(ph * aspect)), int(round(0.6 * w)))
    left = (w - pw) // 2
    return top, top + ph, left, left + pw


def waterline_row(cfg, height_cm):
    """Row of the waterline: top + (1 - h / pipe_height) * pipe pixel height."""
    top, bottom, _, _ = pipe_geometry(cfg)
    frac = 1.0 - height_cm / cfg.pipe_height_cm
    return int(round(top + frac * (bottom - top)))


def generate_scene(cfg, height_cm, index=0):
    """Render one labeled scene; returns (image (H, W, 3), Sample).

    Deterministic in (cfg.seed, index): the same call yields bit-identical
    pixels. The sample's path is left empty; callers that persist the image
    fill it in.
    """
    if not 0.0 <= height_cm <= cfg.pipe_height_cm:
        raise ConfigError(
            f"height {height_cm} outside [0, {cfg.pipe_height_cm}] cm")
    rng = np.random.default_rng((cfg.seed, index))
    h, w = cfg.image_size
    top, bottom, left, right = pipe_geometry(cfg)
    wl = waterline_row(cfg, height_cm)

    # muddy-field background with a soft vertical gradient
    base = np.array([0.42, 0.46, 0.30]) + rng.uniform(-0.04, 0.04, 3)
    img = np.empty((h, w, 3))
    ramp = np.linspace(-0.06, 0.06, h)[:, None]
    img[:] = base[None, None, :]
    img[:, :, :] += ramp[:, :, None]

    # pipe with cylindrical shading: bright center, darker edges
    u = np.linspace(-1.0, 1.0, right - left)
    shade = 0.55 + 0.45 * np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0))
    wall = np.array([0.82, 0.84, 0.86])
    water = np.array([0.22, 0.30, 0.38])
    rows = np.arange(top, bottom + 1)

    ripple = np.zeros(right - left)
    if cfg.ripple_amplitude_px > 0:
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ripple = cfg.ripple_amplitude_px * np.sin(
            2.0 * np.pi * freq * np.arange(right - left) / max(right - left, 1)
            + phase)
    wl_cols = np.clip(np.round(wl + ripple).astype(int), top, bottom)

    for ci, col in enumerate(range(left, right)):
        color = np.where(rows[:, None] < wl_cols[ci], wall[None, :],
                         water[None, :])
        img[top:bottom + 1, col, :] = color * shade[ci]
        line = wl_cols[ci]
        img[line, col, :] = np.array([0.05, 0.07, 0.09]) * (0.8 + 0.2 * shade[ci])

    if cfg.reflections and rng.uniform() < 0.7:
        streak_col = int(rng.integers(left + 1, right - 1))
        streak_top = int(min(wl_cols.max() + 1, bottom))
        img[streak_top:bottom, streak_col, :] = np.minimum(
            img[streak_top:bottom, streak_col, :] + 0.35, 1.0)

    img = np.clip(img, 0.0, 1.0)
    if cfg.angle_jitter_deg > 0:
        img = imgproc.rotate(img, rng.uniform(-cfg.angle_jitter_deg,
                                              cfg.angle_jitter_deg))
    light = rng.uniform(*cfg.lighting_range)
    img = np.clip(img * light, 0.0, 1.0)
    if cfg.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, img.shape), 0.0, 1.0)

    sample = Sample(path="", height_cm=float(height_cm))
    return img, sample


def split_sizes(n):
    """80:10:10 split sizes: (floor(0.8 n), floor(0.1 n), remainder)."""
    train = int(0.8 * n)
    val = int(0.1 * n)
    return train, val, n - train - val


def make_dataset(n, cfg, out_dir):
    """Render n scenes with uniform heights, write PNGs + manifest.csv.

    Split assignment is a deterministic shuffle from cfg.seed.
    """
    if n < 10:
        raise ConfigError(f"need at least 10 samples for a 80:10:10 split, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    heights = rng.uniform(0.0, cfg.pipe_height_cm, size=n)
    n_train, n_val, _ = split_sizes(n)
    order = rng.permutation(n)
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = ("train" if rank < n_train
                         else "val" if rank < n_train + n_val else "test")
    samples = []
    for i in range(n):
        img, sample = generate_scene(cfg, heights[i], index=i)
        path = out_dir / f"scene_{i:05d}.png"
        imgio.save_image(path, img)
        sample.path = str(path)
        sample.split = split_of[i]
        samples.append(sample)
    manifest = Manifest(samples)
    manifest.save(out_dir / "manifest.csv")
    return manifest


def augment_dataset(manifest, target_count, seed, pipeline_cfg=None):
    """Grow the manifest to target_count by augmenting training images only.

    Children keep their parent's label and split (always train), so no
    augmented copy can leak into val or test. New images are written next to
    their parents; the returned manifest contains originals plus children.
    """
    current = len(manifest)
    if target_count < current:
        raise ConfigError(
            f"target {target_count} below current size {current}")
    pipeline_cfg = pipeline_cfg or imgproc.PipelineConfig()
    parents = manifest.split("train")
    if target_count > current and not parents:
        raise ConfigError("no training samples to augment")
    children = []
    for j in range(target_count - current):
        parent = parents[j % len(parents)]
        img = imgio.load_image(parent.path)
        out = imgproc.augment(img, (seed, j), pipeline_cfg)
        parent_path = Path(parent.path)
        child_path = parent_path.with_name(f"{parent_path.stem}_aug{j:05d}.png")
        imgio.save_image(child_path, out)
        children.append(Sample(str(child_path), parent.height_cm,
                               parent.timestamp, parent.source, "train"))
    return Manifest(list(manifest) + children)
