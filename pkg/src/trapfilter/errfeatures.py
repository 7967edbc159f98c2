"""Grid-partitioned reconstruction-error features.

For every block of a W x H grid the feature vector holds ``[mse, mae, ssim]``
(blocks in row-major order) and ends with the cluster id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import IndivisibleGrid, ShapeMismatch, TooSmall
from .imageio import LABEL_CODES, LABEL_NAMES

SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 1.0
C1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
C2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
METRICS = ("mse", "mae", "ssim")


@dataclass(frozen=True)
class GridSpec:
    blocks_w: int = 6
    blocks_h: int = 4

    @property
    def n_blocks(self) -> int:
        return self.blocks_w * self.blocks_h

    @property
    def feature_dim(self) -> int:
        return 3 * self.n_blocks + 1

    def check(self, height: int, width: int) -> None:
        if self.blocks_w < 1 or self.blocks_h < 1:
            raise IndivisibleGrid("grid must have at least one block each way")
        if width % self.blocks_w or height % self.blocks_h:
            raise IndivisibleGrid(
                f"{width}x{height} image is not divisible into a {self.blocks_w}x{self.blocks_h} grid")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        w, h = text.lower().split("x")
        return cls(int(w), int(h))

    def __str__(self):
        return f"{self.blocks_w}x{self.blocks_h}"


def _blocks_view(img: np.ndarray, grid: GridSpec) -> np.ndarray:
    """(H, W, c, bh, bw) view of the image's blocks."""
    c, h, w = img.shape
    grid.check(h, w)
    bh, bw = h // grid.blocks_h, w // grid.blocks_w
    return img.reshape(c, grid.blocks_h, bh, grid.blocks_w, bw).transpose(1, 3, 0, 2, 4)


def partition_grid(img: np.ndarray, grid: GridSpec) -> list[np.ndarray]:
    """Blocks left-to-right, top-to-bottom, each ``(c, h/H, w/W)``."""
    v = _blocks_view(img, grid)
    return [v[r, q].copy() for r in range(grid.blocks_h) for q in range(grid.blocks_w)]


def assemble_grid(blocks: list[np.ndarray], grid: GridSpec) -> np.ndarray:
    rows = [np.concatenate(blocks[r * grid.blocks_w:(r + 1) * grid.blocks_w], axis=2)
            for r in range(grid.blocks_h)]
    return np.concatenate(rows, axis=1)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} != {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    return a, b


def block_mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def block_mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def block_ssim(a, b) -> float:
    """Single-window SSIM over the whole block, averaged over channels."""
    a, b = _pair(a, b)
    if a[0].size < 2:
        raise TooSmall("SSIM needs at least two pixels")
    return float(_ssim_channels(a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)).mean())


def _ssim_channels(x, y):
    # x, y: (..., pixels); population statistics along the last axis
    mx = x.mean(axis=-1)
    my = y.mean(axis=-1)
    dx = x - mx[..., None]
    dy = y - my[..., None]
    vx = (dx * dx).mean(axis=-1)
    vy = (dy * dy).mean(axis=-1)
    cov = (dx * dy).mean(axis=-1)
    return ((2 * mx * my + C1) * (2 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))


def block_metrics(original: np.ndarray, reconstructed: np.ndarray, grid: GridSpec) -> np.ndarray:
    """(n_blocks, 3) array of per-block [mse, mae, ssim]."""
    a, b = _pair(original, reconstructed)
    va = _blocks_view(a, grid)
    vb = _blocks_view(b, grid)
    H, W, c = va.shape[:3]
    if va.shape[3] * va.shape[4] < 2:
        raise TooSmall("SSIM needs at least two pixels per block")
    xa = va.reshape(H * W, c, -1)
    xb = vb.reshape(H * W, c, -1)
    diff = xa - xb
    mse = (diff * diff).mean(axis=(1, 2))
    mae = np.abs(diff).mean(axis=(1, 2))
    ssim = _ssim_channels(xa, xb).mean(axis=1)
    return np.stack([mse, mae, ssim], axis=1)


def extract_features(original: np.ndarray, reconstructed: np.ndarray, cluster_id: int,
                     grid: GridSpec = GridSpec()) -> np.ndarray:
    """Length ``3*W*H + 1`` vector: block-major metric triplets, then the cluster id."""
    if int(cluster_id) != cluster_id or cluster_id < 0:
        raise ValueError(f"cluster id must be a non-negative integer, got {cluster_id}")
    m = block_metrics(original, reconstructed, grid)
    return np.concatenate([m.ravel(), [float(cluster_id)]])


def feature_names(grid: GridSpec) -> list[str]:
    return [f"b{i}_{m}" for i in range(grid.n_blocks) for m in METRICS] + ["cluster"]


def write_features_csv(path, X: np.ndarray, labels, grid: GridSpec) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(feature_names(grid) + ["label"])
        for row, lab in zip(X, labels):
            vals = [repr(float(v)) for v in row[:-1]] + [str(int(row[-1]))]
            wr.writerow(vals + [LABEL_NAMES[int(lab)] if lab is not None else ""])


def read_features_csv(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows, labels = [], []
        for r in rd:
            rows.append([float(v) for v in r[:-1]])
            labels.append(LABEL_CODES.get(r[-1]))
    n_blocks = (len(header) - 2) // 3
    return np.array(rows), labels, n_blocks
