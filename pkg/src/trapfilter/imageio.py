"""Image loading, preprocessing, dataset manifests, splitting and balancing.

Images are float32 numpy arrays shaped ``(channels, height, width)`` with
values in ``[0, 1]``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    AlreadyGray,
    AlreadySplit,
    DecodeError,
    EmptyClass,
    InvalidDimensions,
    ShapeMismatch,
)

EMPTY = 0
ANIMAL = 1
LABEL_NAMES = {EMPTY: "empty", ANIMAL: "animal"}
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}
SPLITS = ("train", "val", "test", "unassigned")
SPLIT_FRACTIONS = (("train", 0.6), ("val", 0.2))

LUMA = np.array([0.299, 0.587, 0.114])


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeMismatch(f"expected (C,H,W) with C in (1,3), got {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise InvalidDimensions(f"empty image {img.shape}")
    return img


def load_image(path) -> np.ndarray:
    """Decode a PNG/JPEG file into a 3-channel float32 tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / np.float32(255.0)


def save_image(img: np.ndarray, path) -> None:
    """Write an image as 8-bit PNG (or whatever the suffix selects)."""
    img = check_image(img)
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory images match what PNG stores."""
    return (np.clip(np.rint(img * 255.0), 0, 255) / 255.0).astype(np.float32)


def _interp_axis(n_in: int, n_out: int):
    # align_corners=False: source coordinate of output i is (i + 0.5) * scale - 0.5
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    img = check_image(img)
    if out_w < 1 or out_h < 1:
        raise InvalidDimensions(f"target size must be positive, got {out_w}x{out_h}")
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    x = img.astype(np.float64)
    lo, hi, fr = _interp_axis(h, out_h)
    x = x[:, lo, :] * (1.0 - fr)[None, :, None] + x[:, hi, :] * fr[None, :, None]
    lo, hi, fr = _interp_axis(w, out_w)
    x = x[:, :, lo] * (1.0 - fr)[None, None, :] + x[:, :, hi] * fr[None, None, :]
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def _equalize_channel(ch: np.ndarray) -> np.ndarray:
    levels = np.clip(np.rint(ch * 255.0), 0, 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    total = levels.size
    cdf_min = cdf[hist > 0][0]
    if cdf_min == total:
        # single occupied level: the remap is 0/0
        return ch
    lut = (cdf - cdf_min) / (total - cdf_min)
    return lut[levels].astype(np.float32)


def equalize(img: np.ndarray) -> np.ndarray:
    """Per-channel 256-bin histogram equalization.

    Each level ``v`` maps to ``(cdf(v) - cdf_min) / (P - cdf_min)``. Channels
    holding a single value are returned untouched.
    """
    img = check_image(img)
    if img.shape[0] != 3:
        raise ShapeMismatch("equalize expects a 3-channel image")
    return np.stack([_equalize_channel(ch) for ch in img]).astype(np.float32)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = check_image(img)
    if img.shape[0] == 1:
        raise AlreadyGray("image already has a single channel")
    gray = np.tensordot(LUMA, img.astype(np.float64), axes=(0, 0))
    return np.clip(gray, 0.0, 1.0)[None].astype(np.float32)


def histogram_features(img: np.ndarray, bins: int = 256) -> np.ndarray:
    """Concatenated per-channel histograms, each normalized to sum to 1."""
    img = check_image(img)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    out = []
    for ch in img:
        counts, _ = np.histogram(ch, bins=bins, range=(0.0, 1.0))
        out.append(counts / ch.size)
    return np.concatenate(out)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ValueError(f"duplicate manifest path {e.path!r}")
            if e.label not in LABEL_NAMES:
                raise ValueError(f"bad label {e.label!r} for {e.path!r}")
            if e.split not in SPLITS:
                raise ValueError(f"bad split {e.split!r} for {e.path!r}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    def select(self, split: str | None = None, label: int | None = None) -> list[ManifestEntry]:
        return [
            e for e in self.entries
            if (split is None or e.split == split) and (label is None or e.label == label)
        ]

    def counts(self) -> dict[tuple[str, int], int]:
        out: dict[tuple[str, int], int] = {}
        for e in self.entries:
            out[(e.split, e.label)] = out.get((e.split, e.label), 0) + 1
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path", "label", "split"])
            for e in self.entries:
                wr.writerow([e.path, LABEL_NAMES[e.label], e.split])

    @classmethod
    def read_csv(cls, path) -> "DatasetManifest":
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames is None or list(rd.fieldnames)[:3] != ["path", "label", "split"]:
                raise ValueError(f"{path}: expected header path,label,split")
            entries = []
            for row in rd:
                if row["label"] not in LABEL_CODES:
                    raise ValueError(f"{path}: unknown label {row['label']!r}")
                entries.append(ManifestEntry(row["path"], LABEL_CODES[row["label"]], row["split"]))
        return cls(entries)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int) -> dict[str, int]:
    """Train/val sizes by half-up rounding of 60%/20%; test takes the remainder."""
    out = {name: _round_half_up(frac * n) for name, frac in SPLIT_FRACTIONS}
    out["test"] = n - sum(out.values())
    return out


def split_dataset(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Stratified, seeded 60/20/20 train/val/test assignment."""
    if any(e.split != "unassigned" for e in manifest.entries):
        raise AlreadySplit("manifest already carries split assignments")
    rng = np.random.default_rng(seed)
    new_split = [""] * len(manifest.entries)
    for label in sorted(LABEL_NAMES):
        idx = np.array([i for i, e in enumerate(manifest.entries) if e.label == label], dtype=np.int64)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        sizes = split_counts(idx.size)
        start = 0
        for name in ("train", "val", "test"):
            for i in idx[start:start + sizes[name]]:
                new_split[i] = name
            start += sizes[name]
    return DatasetManifest([replace(e, split=s) for e, s in zip(manifest.entries, new_split)])


class BalanceMode(str, enum.Enum):
    NONE = "none"
    GLOBAL = "global"
    PER_CLUSTER = "per_cluster"


def _undersample(indices: Sequence[int], keep: int, rng: np.random.Generator) -> list[int]:
    if keep >= len(indices):
        return list(indices)
    chosen = rng.choice(len(indices), size=keep, replace=False)
    return [indices[i] for i in sorted(chosen)]


def balance(items: Sequence[tuple[np.ndarray, int]], mode: BalanceMode | str, seed: int) -> list:
    """Undersample empty items until they match the animal count.

    ``per_cluster`` applies the rule inside each cluster (the last feature of
    each vector is its cluster id). Animal items are never removed and
    nothing is ever duplicated; the original order is preserved.
    """
    mode = BalanceMode(mode)
    items = list(items)
    if mode is BalanceMode.NONE:
        return items
    labels = [lab for _, lab in items]
    if EMPTY not in labels or ANIMAL not in labels:
        raise EmptyClass("balancing needs both empty and animal items")
    rng = np.random.default_rng(seed)

    if mode is BalanceMode.GLOBAL:
        groups = {None: range(len(items))}
    else:
        groups = {}
        for i, (fv, _) in enumerate(items):
            groups.setdefault(int(fv[-1]), []).append(i)

    keep: set[int] = set()
    for key in sorted(groups, key=lambda g: -1 if g is None else g):
        members = groups[key]
        empties = [i for i in members if labels[i] == EMPTY]
        animals = [i for i in members if labels[i] == ANIMAL]
        keep.update(animals)
        keep.update(_undersample(empties, len(animals), rng))
    return [items[i] for i in range(len(items)) if i in keep]


def load_split(manifest: DatasetManifest, split: str, root=".", size: tuple[int, int] | None = None):
    """Load every image of one split; returns (entries, images)."""
    entries = manifest.select(split=split)
    images = [load_resized(Path(root) / e.path, size) for e in entries]
    return entries, images


def load_resized(path, size: tuple[int, int] | None = None) -> np.ndarray:
    img = load_image(path)
    if size is not None:
        w, h = size
        img = resize_bilinear(img, w, h)
    return img


def iter_labels(entries: Iterable[ManifestEntry]) -> np.ndarray:
    return np.array([e.label for e in entries], dtype=np.int64)
