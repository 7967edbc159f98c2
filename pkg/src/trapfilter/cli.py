"""Command-line entry point: synth, split, train, predict, eval, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .clustering import FeatureMode
from .errors import TrapFilterError
from .imageio import DatasetManifest, split_dataset
from .pipeline import (
    PipelineConfig,
    cmd_eval,
    cmd_predict,
    cmd_train,
    inspect_bundle,
    load_bundle,
    save_bundle,
    write_predictions_csv,
)
from .synth import SynthSpec, synth_generate

log = logging.getLogger("trapfilter")


def read_config_file(path) -> dict:
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    return json.loads(path.read_text())


def build_config(args) -> PipelineConfig:
    """Defaults, then the config file, then explicit CLI flags."""
    base = PipelineConfig().to_dict()
    if args.config:
        data = read_config_file(args.config)
        for key in ("rae", "forest"):
            if key in data:
                base[key] = {**base[key], **data.pop(key)}
        base.update(data)
    flat = {
        "width": args.width, "height": args.height, "k": args.k, "feature_mode": args.feature_mode,
        "balance": args.balance, "threshold": args.threshold, "fn_target": args.fn_target,
        "seed": args.seed, "workers": args.workers, "kmeans_n_init": args.kmeans_n_init,
    }
    base.update({k: v for k, v in flat.items() if v is not None})
    if args.grid:
        base["grid"] = args.grid
    if args.tune_threshold:
        base["tune_threshold"] = True
    if args.no_equalize:
        base["equalize"] = False
    rae = {"epochs": args.epochs, "batch_size": args.batch_size, "sigma": args.sigma, "lr": args.lr,
           "loss": args.loss}
    base["rae"].update({k: v for k, v in rae.items() if v is not None})
    if args.full_filters:
        base["rae"]["df_halved"] = False
    forest = {"n_trees": args.trees, "max_depth": args.max_depth, "mtry": args.mtry}
    base["forest"].update({k: v for k, v in forest.items() if v is not None})
    if args.workers:
        base["forest"]["workers"] = args.workers
    # stage seeds are always re-derived from the master seed
    base.pop("seeds", None)
    return PipelineConfig.from_dict(base)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON or TOML file with PipelineConfig fields")
    p.add_argument("--seed", type=int, help="master seed; stage seeds derive from it")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--feature-mode", choices=[m.value for m in FeatureMode])
    p.add_argument("--grid", help="blocks as WxH, e.g. 6x4")
    p.add_argument("--balance", choices=["none", "global", "per_cluster"])
    p.add_argument("--threshold", type=float)
    p.add_argument("--tune-threshold", action="store_true")
    p.add_argument("--fn-target", type=float)
    p.add_argument("--no-equalize", action="store_true", help="feed raw RGB to the autoencoders")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=["correntropy", "mse"])
    p.add_argument("--full-filters", action="store_true", help="disable the halved-filter variant")
    p.add_argument("--trees", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--mtry", type=int)
    p.add_argument("--kmeans-n-init", type=int)
    p.add_argument("--workers", type=int)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trapfilter", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic camera-trap corpus")
    p.add_argument("out", help="output directory")
    p.add_argument("--n-empty", type=int, default=SynthSpec.n_empty)
    p.add_argument("--n-animal", type=int, default=SynthSpec.n_animal)
    p.add_argument("--width", type=int, default=SynthSpec.width)
    p.add_argument("--height", type=int, default=SynthSpec.height)
    p.add_argument("--scenes", type=int, default=SynthSpec.n_scene_types)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("split", help="assign train/val/test to an unsplit manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="fit clustering, autoencoders and forest")
    p.add_argument("manifest")
    p.add_argument("--root", help="image directory (default: the manifest's directory)")
    p.add_argument("--out", required=True, help="bundle path")
    p.add_argument("--metrics-dir", help="where to write validation metrics")
    _add_train_flags(p)

    p = sub.add_parser("predict", help="classify images with a trained bundle")
    p.add_argument("bundle")
    p.add_argument("images", nargs="*")
    p.add_argument("--manifest", help="predict every image in a manifest instead")
    p.add_argument("--split", help="restrict --manifest to one split")
    p.add_argument("--root")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("eval", help="score one split of a manifest")
    p.add_argument("bundle")
    p.add_argument("manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--root")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("inspect", help="print bundle metadata as JSON")
    p.add_argument("bundle")
    return ap


def _root(args) -> Path:
    return Path(args.root) if args.root else Path(args.manifest).parent


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        return _dispatch(args)
    except (TrapFilterError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "synth":
        spec = replace(SynthSpec(), n_empty=args.n_empty, n_animal=args.n_animal, width=args.width,
                       height=args.height, n_scene_types=args.scenes)
        corpus = synth_generate(spec, args.seed)
        corpus.write(args.out)
        print(f"wrote {len(corpus.manifest)} images to {args.out}")
    elif args.command == "split":
        manifest = split_dataset(DatasetManifest.read_csv(args.manifest), args.seed)
        manifest.write_csv(args.out)
    elif args.command == "train":
        config = build_config(args)
        manifest = DatasetManifest.read_csv(args.manifest)
        bundle, report = cmd_train(manifest, config, _root(args))
        save_bundle(bundle, args.out)
        if report is not None:
            if args.metrics_dir:
                report.write(args.metrics_dir, "val_metrics")
            print(f"validation auc={report.auc:.4f} fn_rate={report.fn_rate} threshold={bundle.threshold:.4f}")
    elif args.command == "predict":
        bundle = load_bundle(args.bundle)
        if args.manifest:
            entries = DatasetManifest.read_csv(args.manifest).select(args.split)
            paths = [_root(args) / e.path for e in entries]
        else:
            paths = [Path(p) for p in args.images]
        preds = cmd_predict(bundle, paths)
        write_predictions_csv(args.out or sys.stdout, paths, preds)
    elif args.command == "eval":
        bundle = load_bundle(args.bundle)
        manifest = DatasetManifest.read_csv(args.manifest)
        report = cmd_eval(bundle, manifest, args.split, _root(args), out_dir=args.out)
        print(f"{args.split}: auc={report.auc:.4f} acc={report.acc:.4f} fn_rate={report.fn_rate} "
              f"fp_rate={report.fp_rate}")
    elif args.command == "inspect":
        print(json.dumps(inspect_bundle(args.bundle), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
