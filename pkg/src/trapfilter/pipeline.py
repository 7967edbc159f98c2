"""End-to-end training, inference, evaluation and model-bundle persistence.

Training order: split -> K-Means on empty training images -> one
autoencoder per cluster on that cluster's (equalized) empty training images
-> grid reconstruction-error features for every training image -> balance
-> random forest. Only the forest ever sees labels.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import time
import zipfile
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .clustering import FeatureMode, KMeansModel, assign, featurize, fit_kmeans
from .errfeatures import GridSpec, extract_features
from .errors import (
    ChecksumMismatch,
    CorruptBundle,
    DimensionMismatch,
    EmptyClass,
    StageError,
    TrapFilterError,
    VersionMismatch,
)
from .evaluation import MetricsReport, evaluate, tune_threshold
from .forest import ForestModel, ForestParams, check_threshold, predict_proba_many, train_forest
from .imageio import (
    ANIMAL,
    EMPTY,
    LABEL_NAMES,
    BalanceMode,
    DatasetManifest,
    balance,
    equalize,
    load_resized,
    resize_bilinear,
    split_dataset,
)
from .nnengine import ParamStore
from .rae import DOWNSCALE, RaeConfig, RaeModel, build_rae, reconstruct, train_all

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
SEED_STAGES = ("split", "kmeans", "rae", "forest", "balance")


def derive_seeds(master: int) -> dict[str, int]:
    state = np.random.SeedSequence(master).generate_state(len(SEED_STAGES))
    return {name: int(s) for name, s in zip(SEED_STAGES, state)}


@dataclass
class PipelineConfig:
    width: int = 96
    height: int = 64
    feature_mode: str = FeatureMode.RGB_IMAGE.value
    k: int = 7
    grid: GridSpec = field(default_factory=GridSpec)
    rae: RaeConfig = field(default_factory=lambda: RaeConfig(df_halved=True))
    forest: ForestParams = field(default_factory=ForestParams)
    balance: str = BalanceMode.GLOBAL.value
    equalize: bool = True
    threshold: float = 0.5
    tune_threshold: bool = False
    fn_target: float = 0.05
    kmeans_n_init: int = 10
    seed: int = 0
    seeds: dict[str, int] = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        self.seeds = {**derive_seeds(self.seed), **self.seeds}
        # the autoencoder always matches the pipeline image size
        self.rae = replace(self.rae, height=self.height, width=self.width, seed=self.seeds["rae"])
        self.validate()

    def validate(self) -> None:
        FeatureMode(self.feature_mode)
        BalanceMode(self.balance)
        if self.width % DOWNSCALE or self.height % DOWNSCALE:
            raise DimensionMismatch(f"image size {self.width}x{self.height} must be divisible by {DOWNSCALE}")
        self.grid.check(self.height, self.width)
        if self.k < 2:
            raise ValueError("k must be >= 2")
        check_threshold(self.threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = str(self.grid)
        d["rae"] = self.rae.to_dict()
        d["forest"] = {k: v for k, v in asdict(self.forest).items() if k != "workers"}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if isinstance(d.get("grid"), str):
            d["grid"] = GridSpec.parse(d["grid"])
        elif isinstance(d.get("grid"), dict):
            d["grid"] = GridSpec(**d["grid"])
        if isinstance(d.get("rae"), dict):
            rae = dict(d["rae"])
            if "filters" in rae:
                rae["filters"] = tuple(rae["filters"])
            d["rae"] = RaeConfig(**{**asdict(RaeConfig(df_halved=True)), **rae})
        if isinstance(d.get("forest"), dict):
            d["forest"] = ForestParams(**d["forest"])
        return cls(**d)


@dataclass
class ModelBundle:
    config: PipelineConfig
    kmeans: KMeansModel
    raes: list[RaeModel]
    forest: ForestModel
    threshold: float
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        ids = sorted(m.cluster_id for m in self.raes)
        if ids != list(range(self.kmeans.k)):
            raise CorruptBundle(f"expected autoencoders for clusters 0..{self.kmeans.k - 1}, got {ids}")
        self.raes = sorted(self.raes, key=lambda m: m.cluster_id)
        self._net = build_rae(self.raes[0].config)

    def preprocess(self, img: np.ndarray) -> np.ndarray:
        """Resize to the bundle's size if needed."""
        c = self.config
        if img.shape[1:] != (c.height, c.width):
            img = resize_bilinear(img, c.width, c.height)
        return img

    def cluster_of(self, img: np.ndarray) -> int:
        return assign(self.kmeans, featurize(img, self.kmeans.mode))

    def features(self, img: np.ndarray, cluster: int | None = None) -> tuple[np.ndarray, int]:
        """Feature vector and cluster of one (already resized) image."""
        if cluster is None:
            cluster = self.cluster_of(img)
        x = equalize(img) if self.config.equalize else img
        rec = reconstruct(self.raes[cluster], x, self._net)
        return extract_features(x, rec, cluster, self.config.grid), cluster


@contextlib.contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    log.info("[%s] start", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        log.error("[%s] failed: %s", name, exc)
        raise StageError(name, exc) from exc
    log.info("[%s] done in %.1fs", name, time.perf_counter() - t0)


def _digest(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()


def _manifest_digest(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for e in manifest.entries:
        h.update(f"{e.path}\t{e.label}\t{e.split}\n".encode())
    return h.hexdigest()


def _created_at() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible bundles
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


def _check_label_free(labels, where: str) -> dict:
    n_animal = int(np.sum(np.asarray(labels) == ANIMAL))
    if n_animal:
        raise TrapFilterError(f"{n_animal} animal images reached the {where} training set")
    return {"empty": int(len(labels)), "animal": 0}


def make_loader(root, config: PipelineConfig) -> Callable[[str], np.ndarray]:
    root = Path(root)
    return lambda path: load_resized(root / path, (config.width, config.height))


def cmd_train(manifest: DatasetManifest, config: PipelineConfig, root=".",
              loader: Callable[[str], np.ndarray] | None = None) -> tuple[ModelBundle, MetricsReport]:
    """Fit the whole pipeline; returns the bundle and its validation report."""
    loader = loader or make_loader(root, config)
    seeds = config.seeds

    with stage("split"):
        if all(e.split == "unassigned" for e in manifest.entries):
            manifest = split_dataset(manifest, seeds["split"])
        train = manifest.select("train")
        if not any(e.label == EMPTY for e in train) or not any(e.label == ANIMAL for e in train):
            raise EmptyClass("training split needs both empty and animal images")

    with stage("load"):
        images = {e.path: loader(e.path) for e in manifest.entries if e.split in ("train", "val")}
        train_imgs = [images[e.path] for e in train]
        train_labels = np.array([e.label for e in train])

    audit = {}
    with stage("kmeans"):
        empty_idx = np.flatnonzero(train_labels == EMPTY)
        audit["kmeans"] = _check_label_free(train_labels[empty_idx], "clustering")
        vecs = np.stack([featurize(train_imgs[i], config.feature_mode) for i in empty_idx])
        km = fit_kmeans(vecs, k=config.k, seed=seeds["kmeans"], mode=config.feature_mode,
                        n_init=config.kmeans_n_init)
        clusters = np.array([assign(km, featurize(im, km.mode)) for im in train_imgs])

    with stage("rae"):
        groups = {}
        audit["rae"] = {}
        for cid in range(config.k):
            members = [i for i in empty_idx if clusters[i] == cid]
            audit["rae"][str(cid)] = _check_label_free(train_labels[members], f"cluster {cid} autoencoder")
            groups[cid] = [equalize(train_imgs[i]) if config.equalize else train_imgs[i] for i in members]
        raes = train_all(groups, config.rae, workers=config.workers)

    bundle = ModelBundle(config=config, kmeans=km, raes=raes, forest=None, threshold=config.threshold)  # type: ignore[arg-type]

    with stage("features"):
        X = np.stack([bundle.features(im, int(c))[0] for im, c in zip(train_imgs, clusters)])

    with stage("balance"):
        items = balance(list(zip(X, train_labels.tolist())), config.balance, seeds["balance"])
        log.info("[balance] %s: %d -> %d items", config.balance, len(X), len(items))

    with stage("forest"):
        bundle.forest = train_forest(items, config.forest, seed=seeds["forest"])

    with stage("validate"):
        val = manifest.select("val")
        report = None
        if val:
            Xv = np.stack([bundle.features(images[e.path])[0] for e in val])
            yv = np.array([e.label for e in val])
            pv = predict_proba_many(bundle.forest, Xv)
            if config.tune_threshold and (yv == ANIMAL).any():
                bundle.threshold = tune_threshold(pv, yv, config.fn_target)
                log.info("[validate] tuned threshold %.4f (fn target %.3f)", bundle.threshold, config.fn_target)
            if len(np.unique(yv)) == 2:
                report = evaluate(pv, yv, bundle.threshold, split="val")

    bundle.metadata = {
        "created_at": _created_at(),
        "package_version": __version__,
        "manifest_sha256": _manifest_digest(manifest),
        "train_pixels_sha256": _digest(train_imgs),
        "counts": {f"{s}/{LABEL_NAMES[l]}": n for (s, l), n in sorted(manifest.counts().items())},
        "audit": audit,
        "rae_final_loss": [m.final_loss for m in bundle.raes],
        "kmeans_inertia": km.inertia,
        "validation": _summary(report),
    }
    return bundle, report


def _summary(report: MetricsReport | None) -> dict | None:
    if report is None:
        return None
    d = report.to_dict()
    d.pop("roc_points")
    return d


def cmd_predict(bundle: ModelBundle, images: Sequence) -> list[dict]:
    """Per image: cluster, animal probability and thresholded label, in input order.

    ``images`` may hold arrays or paths.
    """
    out = []
    for item in images:
        img = load_resized(item) if isinstance(item, (str, os.PathLike)) else np.asarray(item, dtype=np.float32)
        fv, cid = bundle.features(bundle.preprocess(img))
        p = float(predict_proba_many(bundle.forest, fv)[0])
        out.append({"cluster": cid, "probability": p,
                    "label": LABEL_NAMES[ANIMAL if p >= bundle.threshold else EMPTY]})
    return out


def cmd_eval(bundle: ModelBundle, manifest: DatasetManifest, split: str = "test", root=".",
             out_dir=None, loader: Callable[[str], np.ndarray] | None = None) -> MetricsReport:
    """Score one split; optionally write metrics JSON, ROC CSV and predictions CSV."""
    loader = loader or make_loader(root, bundle.config)
    entries = manifest.select(split)
    with stage("eval"):
        preds = cmd_predict(bundle, [loader(e.path) for e in entries])
        scores = np.array([p["probability"] for p in preds])
        labels = np.array([e.label for e in entries])
        report = evaluate(scores, labels, bundle.threshold, split=split)
    if out_dir is not None:
        report.write(out_dir)
        write_predictions_csv(Path(out_dir) / "predictions.csv", [e.path for e in entries], preds)
    return report


def write_predictions_csv(dest, paths, preds) -> None:
    """``dest`` is a path or an open text stream."""
    with contextlib.ExitStack() as stack:
        fh = dest if hasattr(dest, "write") else stack.enter_context(open(dest, "w", newline=""))
        wr = csv.writer(fh)
        wr.writerow(["path", "cluster", "probability", "label"])
        for p, r in zip(paths, preds):
            wr.writerow([str(p), r["cluster"], repr(r["probability"]), r["label"]])


# ---------------------------------------------------------------- persistence

def _members(bundle: ModelBundle) -> dict[str, bytes]:
    m: dict[str, bytes] = {}
    km = bundle.kmeans
    m["kmeans.json"] = _json(km.header())
    m["kmeans.bin"] = np.ascontiguousarray(km.centroids, dtype="<f4").tobytes()
    for rae in bundle.raes:
        index, blob = rae.params.to_blob()
        m[f"rae_{rae.cluster_id}.json"] = _json({
            "cluster_id": rae.cluster_id,
            "config": rae.config.to_dict(),
            "final_loss": rae.final_loss,
            "loss_history": list(rae.loss_history),
            "network": build_rae(rae.config).describe(),
            "index": index,
        })
        m[f"rae_{rae.cluster_id}.bin"] = blob
    m["forest.json"] = _json(bundle.forest.to_dict())
    return m


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def bundle_bytes(bundle: ModelBundle) -> bytes:
    members = _members(bundle)
    meta = {
        "format_version": bundle.format_version,
        "config": bundle.config.to_dict(),
        "threshold": bundle.threshold,
        "metadata": bundle.metadata,
        "members": {name: zlib.crc32(data) for name, data in members.items()},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in [("meta.json", _json(meta)), *members.items()]:
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return buf.getvalue()


def save_bundle(bundle: ModelBundle, path) -> None:
    Path(path).write_bytes(bundle_bytes(bundle))


def load_bundle(path) -> ModelBundle:
    raw = Path(path).read_bytes()
    try:
        zf = zipfile.ZipFile(io.BytesIO(raw))
        names = set(zf.namelist())
        if "meta.json" not in names:
            raise CorruptBundle("bundle has no meta.json")
        meta = json.loads(zf.read("meta.json"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"bundle format {version!r}, this build reads {FORMAT_VERSION}")
        data = {}
        for name, crc in meta["members"].items():
            if name not in names:
                raise CorruptBundle(f"bundle is missing {name}")
            blob = zf.read(name)
            if zlib.crc32(blob) != crc:
                raise ChecksumMismatch(f"CRC mismatch in {name}")
            data[name] = blob
    except (zipfile.BadZipFile, zlib.error, EOFError) as exc:
        raise ChecksumMismatch(f"damaged bundle archive: {exc}") from exc
    except (KeyError, ValueError) as exc:
        if isinstance(exc, TrapFilterError):
            raise
        raise CorruptBundle(f"malformed bundle: {exc}") from exc

    try:
        config = PipelineConfig.from_dict(meta["config"])
        head = json.loads(data["kmeans.json"])
        cents = np.frombuffer(data["kmeans.bin"], dtype="<f4").astype(np.float32)
        km = KMeansModel(k=head["k"], mode=FeatureMode(head["mode"]),
                         centroids=cents.reshape(head["k"], head["d"]), seed=head["seed"],
                         inertia=head["inertia"], n_iter=head.get("n_iter", 0))
        raes = []
        for cid in range(km.k):
            info = json.loads(data[f"rae_{cid}.json"])
            rcfg = RaeConfig.from_dict({**info["config"], "filters": tuple(info["config"]["filters"])})
            n_layers = len(info["network"]["layers"])
            params = ParamStore.from_blob(info["index"], data[f"rae_{cid}.bin"], n_layers)
            raes.append(RaeModel(info["cluster_id"], rcfg, params, info["final_loss"],
                                 tuple(info["loss_history"])))
        forest = ForestModel.from_dict(json.loads(data["forest.json"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptBundle(f"malformed bundle contents: {exc}") from exc
    return ModelBundle(config=config, kmeans=km, raes=raes, forest=forest, threshold=meta["threshold"],
                       metadata=meta.get("metadata", {}), format_version=meta["format_version"])


def inspect_bundle(path) -> dict:
    b = load_bundle(path)
    return {
        "format_version": b.format_version,
        "config": b.config.to_dict(),
        "threshold": b.threshold,
        "k": b.kmeans.k,
        "feature_mode": b.kmeans.mode.value,
        "feature_dim": b.forest.feature_dim,
        "n_trees": b.forest.n_trees,
        "rae_bottleneck": b.raes[0].config.bottleneck,
        "rae_params": b.raes[0].params.n_params(),
        "metadata": b.metadata,
    }
