"""Per-cluster robust autoencoders trained on empty images only."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyCluster, EmptyTrainingSet, IndivisibleDims, ShapeMismatch
from .nnengine import (
    LOSSES,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2,
    Network,
    ParamStore,
    Reshape,
    TransposedConv2D,
    Upsample2,
    adam_step,
    correntropy_loss,
)

log = logging.getLogger(__name__)

N_POOL = 4
DOWNSCALE = 2 ** N_POOL


@dataclass(frozen=True)
class RaeConfig:
    height: int = 64
    width: int = 96
    channels: int = 3
    filters: tuple[int, ...] = (32, 48, 64, 48)
    df_halved: bool = False
    epochs: int = 70
    batch_size: int = 16
    loss: str = "correntropy"
    sigma: float = 0.2
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if len(self.filters) != N_POOL:
            raise ValueError(f"need {N_POOL} encoder filter counts, got {self.filters}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def effective_filters(self) -> tuple[int, ...]:
        if self.df_halved:
            return tuple(max(1, f // 2) for f in self.filters)
        return self.filters

    @property
    def bottleneck(self) -> int:
        return (self.height // DOWNSCALE) * (self.width // DOWNSCALE) * self.effective_filters[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RaeConfig":
        return cls(**d)


def build_rae(config: RaeConfig) -> Network:
    """Four conv+pool packs, a dense bottleneck, four upsample+transposed-conv packs."""
    h, w = config.height, config.width
    if h % DOWNSCALE or w % DOWNSCALE or h < DOWNSCALE or w < DOWNSCALE:
        raise IndivisibleDims(f"height and width must be positive multiples of {DOWNSCALE}, got {h}x{w}")
    f = config.effective_filters
    layers = []
    for n in f:
        layers += [Conv2D(n, "relu"), MaxPool2()]
    layers += [Flatten(), Dense(config.bottleneck, "relu"), Reshape(f[-1], h // DOWNSCALE, w // DOWNSCALE)]
    for n in reversed(f[:-1]):
        layers += [Upsample2(), TransposedConv2D(n, "relu")]
    layers += [Upsample2(), TransposedConv2D(config.channels, "sigmoid")]
    return Network(config.input_shape, layers)


@dataclass(frozen=True)
class RaeModel:
    cluster_id: int
    config: RaeConfig
    params: ParamStore = field(repr=False)
    final_loss: float = float("nan")
    loss_history: tuple[float, ...] = ()

    def __post_init__(self):
        for p in self.params.params:
            for a in p.values():
                a.flags.writeable = False

    @property
    def network(self) -> Network:
        # Network is a pure shape description, cheap to rebuild
        return build_rae(self.config)


def _batch_loss(config: RaeConfig, y, yhat):
    if config.loss == "correntropy":
        return correntropy_loss(y, yhat, config.sigma)
    return LOSSES[config.loss](y, yhat)


def _stack(images, shape) -> np.ndarray:
    X = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if X.shape[1:] != tuple(shape):
        raise ShapeMismatch(f"images have shape {X.shape[1:]}, network expects {tuple(shape)}")
    return X


def train_rae(net: Network, empty_images, config: RaeConfig, cluster_id: int = 0) -> RaeModel:
    """Adam over seeded per-epoch shuffles; no early stopping."""
    if len(empty_images) == 0:
        raise EmptyTrainingSet("an autoencoder needs at least one training image")
    X = _stack(empty_images, net.input_shape)
    rng = np.random.default_rng(config.seed)
    params = net.init_params(int(rng.integers(2**31)))
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), config.batch_size):
            batch = X[order[start:start + config.batch_size]]
            yhat, cache = net.forward(params, batch)
            loss, grad = _batch_loss(config, batch, yhat)
            grads, _ = net.backward(params, cache, grad, input_grad=False)
            adam_step(params, grads, config.lr)
            total += loss * len(batch)
        history.append(total / len(X))
        if epoch % 10 == 0 or epoch == config.epochs - 1:
            log.debug("rae cluster=%d epoch=%d loss=%.6f", cluster_id, epoch, history[-1])
    final = history[-1] if history else float("nan")
    return RaeModel(cluster_id, config, ParamStore([{k: a.copy() for k, a in p.items()} for p in params.params]),
                    final, tuple(history))


def train_all(clusters: dict[int, list], config: RaeConfig, workers: int = 1) -> list[RaeModel]:
    """One autoencoder per cluster, ordered by cluster id.

    Every cluster uses ``config.seed``, so results do not depend on
    ``workers`` or on the order in which clusters finish.
    """
    ids = sorted(clusters)
    for cid in ids:
        if len(clusters[cid]) == 0:
            raise EmptyCluster(cid)
    net = build_rae(config)

    def job(cid):
        log.info("training rae for cluster %d on %d empty images", cid, len(clusters[cid]))
        return train_rae(net, clusters[cid], config, cluster_id=cid)

    if workers <= 1:
        return [job(cid) for cid in ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, ids))


def reconstruct(model: RaeModel, img: np.ndarray, net: Network | None = None) -> np.ndarray:
    net = net or model.network
    x = np.asarray(img, dtype=np.float32)
    if x.shape != net.input_shape:
        raise ShapeMismatch(f"image shape {x.shape} does not match autoencoder input {net.input_shape}")
    return net.predict(model.params, x[None])[0]


def reconstruction_stats(model: RaeModel, images, net: Network | None = None) -> dict[str, np.ndarray]:
    """Whole-image MSE, MAE and SSIM for each image against its reconstruction."""
    from .errfeatures import block_mae, block_mse, block_ssim

    net = net or model.network
    out = {"mse": [], "mae": [], "ssim": []}
    for img in images:
        rec = reconstruct(model, img, net)
        out["mse"].append(block_mse(img, rec))
        out["mae"].append(block_mae(img, rec))
        out["ssim"].append(block_ssim(img, rec))
    return {k: np.array(v) for k, v in out.items()}
