"""Synthetic camera-trap corpus.

Stands in for real photo-trap data at desk scale. Every scene type is a
parametric background (colour gradient plus a scene-specific sinusoidal
texture; some scene types are dim grey "night" shots lit by a flash spot).
Animal images are a freshly drawn background with one elliptical blob whose
intensity differs from the area it covers by a relative factor.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDimensions
from .imageio import ANIMAL, EMPTY, DatasetManifest, ManifestEntry, quantize, save_image


@dataclass(frozen=True)
class SynthSpec:
    n_empty: int = 700
    n_animal: int = 350
    width: int = 96
    height: int = 64
    n_scene_types: int = 7
    # blob area as a fraction of the image
    blob_area: tuple[float, float] = (0.02, 0.12)
    # blob intensity relative to the background it covers, so animals in
    # dim scenes are faint in raw pixels
    blob_contrast: tuple[float, float] = (0.15, 0.45)
    # per-image sensor noise std
    noise: tuple[float, float] = (0.005, 0.02)
    # per-image multiplicative illumination change
    brightness: tuple[float, float] = (0.80, 1.20)
    grid: tuple[int, int] = (6, 4)


@dataclass
class Scene:
    night: bool
    base: np.ndarray  # (3,)
    gradient: np.ndarray  # (3,) colour change across the gradient direction
    angle: float
    tex_amp: float
    tex_freq: np.ndarray  # (3, 2) cycles per image along x, y
    tex_phase: np.ndarray  # (3,)
    spot: tuple[float, float]  # flash centre (x, y) in [0,1] for night scenes


@dataclass
class SynthCorpus:
    manifest: DatasetManifest
    images: list[np.ndarray]
    scene_ids: np.ndarray
    labels: np.ndarray
    # animal images only: the background before the blob was drawn, and the
    # blob bounding box (y0, y1, x0, x1), half-open
    backgrounds: dict[int, np.ndarray] = field(default_factory=dict)
    bboxes: dict[int, tuple[int, int, int, int]] = field(default_factory=dict)

    def write(self, out_dir) -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for entry, img in zip(self.manifest.entries, self.images):
            save_image(img, out / entry.path)
        self.manifest.write_csv(out / "manifest.csv")


def make_scenes(n: int, seed: int) -> list[Scene]:
    rng = np.random.default_rng([seed, 0x5CE7E])
    scenes = []
    for s in range(n):
        night = s % 3 == 2
        if night:
            level = 0.12 + 0.08 * rng.random()
            base = np.full(3, level)
            gradient = np.full(3, 0.05 + 0.05 * rng.random())
        else:
            hue = (s / n + 0.05 * rng.random()) % 1.0
            base = np.array(colorsys.hsv_to_rgb(hue, 0.55 + 0.2 * rng.random(), 0.40 + 0.15 * rng.random()))
            gradient = rng.uniform(-0.12, 0.12, size=3)
        scenes.append(Scene(
            night=night,
            base=base,
            gradient=gradient,
            angle=float(rng.uniform(0, 2 * np.pi)),
            tex_amp=float(rng.uniform(0.03, 0.07)),
            tex_freq=rng.uniform(1.0, 6.0, size=(3, 2)) * rng.choice([-1, 1], size=(3, 2)),
            tex_phase=rng.uniform(0, 2 * np.pi, size=3),
            spot=(float(0.25 + 0.5 * (s % 2)), float(rng.uniform(0.4, 0.7))),
        ))
    return scenes


def render_background(scene: Scene, width: int, height: int, spec: SynthSpec,
                      rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    u = xs / width
    v = ys / height
    ramp = (np.cos(scene.angle) * (u - 0.5) + np.sin(scene.angle) * (v - 0.5))
    shift = rng.uniform(-0.04, 0.04, size=2)
    tex = np.zeros((height, width))
    for (fx, fy), ph in zip(scene.tex_freq, scene.tex_phase):
        tex += np.sin(2 * np.pi * (fx * (u + shift[0]) + fy * (v + shift[1])) + ph)
    tex *= scene.tex_amp / len(scene.tex_phase)

    img = scene.base[:, None, None] + scene.gradient[:, None, None] * ramp[None] + tex[None]
    if scene.night:
        d2 = (u - scene.spot[0]) ** 2 + ((v - scene.spot[1]) * height / width) ** 2
        img = img + 0.25 * np.exp(-d2 / 0.08)[None]
    img = img * rng.uniform(*spec.brightness)
    img = img + rng.normal(0.0, rng.uniform(*spec.noise), size=img.shape)
    return np.clip(img, 0.0, 1.0)


def draw_blob(background: np.ndarray, spec: SynthSpec, rng: np.random.Generator):
    """Paint one elliptical 'animal'; returns (image, bbox)."""
    _, h, w = background.shape
    area = rng.uniform(*spec.blob_area) * w * h
    aspect = rng.uniform(0.6, 1.6)
    rx = np.sqrt(area * aspect / np.pi)
    ry = rx / aspect
    rx, ry = min(rx, w / 2 - 1), min(ry, h / 2 - 1)
    cx = rng.uniform(rx, w - rx)
    cy = rng.uniform(ry, h - ry)
    ys, xs = np.mgrid[0:h, 0:w]
    mask = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    bbox = (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)

    under = background[:, mask].mean(axis=1)
    delta = rng.uniform(*spec.blob_contrast)
    # go in the direction with more headroom
    sign = 1.0 if under.mean() < 0.5 else -1.0
    tint = rng.uniform(0.7, 1.0, size=3)
    colour = np.clip(under * (1.0 + sign * delta * tint), 0.0, 1.0)
    fur = rng.normal(0.0, 0.08, size=(3, int(mask.sum()))) * under[:, None]

    img = background.copy()
    img[:, mask] = np.clip(colour[:, None] + fur, 0.0, 1.0)
    return img, bbox


def synth_generate(spec: SynthSpec, seed: int) -> SynthCorpus:
    """Deterministic corpus of ``spec.n_empty`` empty and ``spec.n_animal`` animal images."""
    if spec.n_empty < 1 or spec.n_animal < 1 or spec.n_scene_types < 1:
        raise InvalidDimensions("counts must be >= 1")
    gw, gh = spec.grid
    if spec.width % 16 or spec.height % 16 or spec.width % gw or spec.height % gh:
        raise InvalidDimensions(
            f"{spec.width}x{spec.height} must be divisible by 16 and by the {gw}x{gh} grid")

    scenes = make_scenes(spec.n_scene_types, seed)
    rng = np.random.default_rng([seed, 0xA11])
    total = spec.n_empty + spec.n_animal
    entries, images, scene_ids, labels = [], [], [], []
    backgrounds, bboxes = {}, {}
    for i in range(total):
        label = EMPTY if i < spec.n_empty else ANIMAL
        k = i if label == EMPTY else i - spec.n_empty
        scene_id = k % spec.n_scene_types
        bg = render_background(scenes[scene_id], spec.width, spec.height, spec, rng)
        if label == ANIMAL:
            bg = quantize(bg)
            img, bbox = draw_blob(bg, spec, rng)
            backgrounds[i] = bg
            bboxes[i] = bbox
        else:
            img = bg
        images.append(quantize(img))
        entries.append(ManifestEntry(f"img_{i:05d}.png", label))
        scene_ids.append(scene_id)
        labels.append(label)
    return SynthCorpus(
        manifest=DatasetManifest(entries),
        images=images,
        scene_ids=np.array(scene_ids),
        labels=np.array(labels),
        backgrounds=backgrounds,
        bboxes=bboxes,
    )
