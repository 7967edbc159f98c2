"""Acceptance gate.

Every test records one PASS/FAIL line; the lines are repeated in the
"acceptance criteria" section of the pytest summary. The end-to-end tests
(criteria 7 and 8) train the full pipeline twice on the desk-scale synthetic
corpus and take roughly a quarter of an hour on one CPU core.
"""

import copy
import io
import json
import time
import zipfile
from dataclasses import replace

import numpy as np
import pytest

from oracles import (
    GRAD_CASES,
    LOSS_CASES,
    fd_grads,
    make_case,
    mae_direct,
    mann_whitney,
    mse_direct,
    nearest_centroid,
    rel_err,
    ssim_direct,
)
from trapfilter.clustering import assign, assign_many, featurize, fit_kmeans, purity
from trapfilter.errfeatures import C1, C2, GridSpec, block_mae, block_mse, block_ssim
from trapfilter.errors import ChecksumMismatch, VersionMismatch
from trapfilter.evaluation import diff_metrics, evaluate, roc_auc
from trapfilter.forest import ForestParams, predict, predict_proba_many, train_forest
from trapfilter.imageio import ANIMAL, EMPTY, balance, equalize, split_dataset
from trapfilter.pipeline import PipelineConfig, bundle_bytes, cmd_eval, cmd_predict, cmd_train, load_bundle
from trapfilter.rae import RaeConfig, build_rae, reconstruction_stats
from trapfilter.synth import SynthSpec, synth_generate

DESK_SEED = 0


def test_c1_metric_exactness(recorder):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        h, w = rng.integers(2, 9, size=2)
        x, y = rng.random((3, h, w)), rng.random((3, h, w))
        ssim_ref = sum(ssim_direct(x[c], y[c]) for c in range(3)) / 3
        worst = max(worst, abs(block_mse(x, y) - mse_direct(x, y)), abs(block_mae(x, y) - mae_direct(x, y)),
                    abs(block_ssim(x, y) - ssim_ref))
    x = rng.random((3, 8, 8))
    self_ssim = block_ssim(x, x)
    consts = C1 == pytest.approx(1e-4, rel=1e-12) and C2 == pytest.approx(9e-4, rel=1e-12)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and abs(self_ssim - 1.0) <= 1e-12 and consts and elapsed < 10
    recorder("1", ok, f"max |err| {worst:.2e} over 1000 pairs, SSIM(x,x)={self_ssim:.12f}, "
                      f"c1={C1:g} c2={C2:g}, {elapsed:.1f}s")
    assert ok


def test_c2_gradients(recorder):
    t0 = time.perf_counter()
    cases = GRAD_CASES + LOSS_CASES
    worst = 0.0
    for i, (layers, shape, *loss) in enumerate(cases):
        net, params, x, fn = make_case(layers, shape, seed=1000 + i, loss=loss[0] if loss else "probe")
        num_p, num_x, p64, x64 = fd_grads(net, params, x, fn, eps=1e-4)
        yhat, cache = net.forward(p64, x64)
        grads, dx = net.backward(p64, cache, fn(yhat)[1])
        worst = max(worst, rel_err(dx, num_x), *(rel_err(g[k], n[k]) for g, n in zip(grads, num_p) for k in n))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and len(cases) >= 20 and elapsed < 60
    recorder("2", ok, f"{len(cases)} configurations, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_c3_shapes(recorder):
    full = RaeConfig(height=256, width=384)
    halved = RaeConfig(height=256, width=384, df_halved=True)
    rng = np.random.default_rng(3)
    same = True
    for _ in range(10):
        h, w = (16 * rng.integers(1, 9, size=2)).tolist()
        same &= build_rae(RaeConfig(height=h, width=w, filters=(2, 3, 4, 3))).output_shape == (3, h, w)
    net = build_rae(full)
    flat = net.shapes[[type(l).__name__ for l in net.layers].index("Flatten") + 1][0]
    ok = full.bottleneck == 18432 and flat == 18432 and halved.bottleneck == 9216 and same
    recorder("3", ok, f"bottleneck {flat} (halved {halved.bottleneck}), output==input on 10 random dims: {same}")
    assert ok


def test_c4_lloyd(recorder):
    t0 = time.perf_counter()
    monotone = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = rng.random((int(rng.integers(20, 120)), int(rng.integers(1, 6))))
        h = np.array(fit_kmeans(X, k=int(rng.integers(2, 8)), seed=seed, n_init=1).history)
        monotone &= bool(np.all(np.diff(h) <= 1e-9 * h[0]))
    rng = np.random.default_rng(99)
    model = fit_kmeans(rng.random((300, 6)), k=7, seed=0)
    Q = rng.random((10_000, 6)) * 1.2 - 0.1
    agree = all(assign(model, q) == nearest_centroid(q, model.centroids) for q in Q)
    corpus = synth_generate(SynthSpec(), DESK_SEED)
    keep = corpus.labels == EMPTY
    X = np.stack([featurize(img, "rgb_image") for img, k in zip(corpus.images, keep) if k])
    km = fit_kmeans(X, k=7, seed=0)
    pur = purity(assign_many(km, X), corpus.scene_ids[keep])
    elapsed = time.perf_counter() - t0
    ok = monotone and agree and pur >= 0.95 and elapsed < 60
    recorder("4", ok, f"monotone over 50 runs: {monotone}, brute-force agreement on 10000 queries: {agree}, "
                      f"7-scene purity {pur:.3f}, {elapsed:.1f}s")
    assert ok


def test_c5_auc_oracle(recorder):
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(200):
        n = int(rng.integers(2, 80))
        s = rng.integers(0, 8, n) / 7 if i % 2 else rng.random(n)
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        worst = max(worst, abs(roc_auc(s, y)[0] - mann_whitney(s, y)))
    ok = worst <= 1e-12
    recorder("5", ok, f"max |trapezoid - Mann-Whitney| {worst:.1e} over 200 sets (half with ties)")
    assert ok


def test_c6_forest(recorder):
    rng = np.random.default_rng(6)
    X = rng.random((120, 5))
    y = (X[:, 0] + 0.3 * rng.random(120) > 0.6).astype(int)
    data = list(zip(X, y))
    a = train_forest(data, ForestParams(n_trees=20), seed=4)
    b = train_forest(data, ForestParams(n_trees=20), seed=4)
    deterministic = a.to_dict() == b.to_dict()
    one = train_forest(data, ForestParams(n_trees=1, bootstrap=False), seed=0)
    memorized = np.mean([predict(one, x) == t for x, t in data]) == 1.0
    xor_X = np.array([[0.0, 0], [0, 1], [1, 0], [1, 1]])
    xor_y = [0, 1, 1, 0]
    xor = train_forest(list(zip(xor_X, xor_y)), ForestParams(n_trees=1, bootstrap=False), seed=0)
    xor_ok = xor.trees[0].depth() >= 2 and [predict(xor, x) for x in xor_X] == xor_y
    Q = rng.random((200, 5))
    sweep = [np.array([predict(a, q, t) for q in Q]) for t in np.linspace(0, 1, 21)]
    monotone = all(np.all(n <= p) for p, n in zip(sweep, sweep[1:])) and sweep[0].all()
    ok = deterministic and memorized and xor_ok and monotone
    recorder("6", ok, f"deterministic {deterministic}, memorizes {memorized}, XOR depth "
                      f"{xor.trees[0].depth()} solved {xor_ok}, sweep monotone {monotone}")
    assert ok


# ---------------------------------------------------------------- desk scale

def _refit(bundle, manifest, images, grid, mode):
    """Forest retrained on the same autoencoders with another grid or balancing."""
    b = copy.copy(bundle)
    b.config = replace(bundle.config, grid=grid, balance=mode)
    train = manifest.select("train")
    X = [b.features(images[e.path])[0] for e in train]
    items = balance(list(zip(X, [e.label for e in train])), mode, b.config.seeds["balance"])
    b.forest = train_forest(items, b.config.forest, seed=b.config.seeds["forest"])
    test = manifest.select("test")
    scores = predict_proba_many(b.forest, np.stack([b.features(images[e.path])[0] for e in test]))
    return evaluate(scores, [e.label for e in test], b.threshold, "test")


def _class_stats(bundle, manifest, images, splits=("val", "test")):
    """Whole-image reconstruction stats per (cluster, label) on held-out images."""
    out = {}
    for e in (e for s in splits for e in manifest.select(s)):
        img = images[e.path]
        cid = bundle.cluster_of(img)
        x = equalize(img) if bundle.config.equalize else img
        st = reconstruction_stats(bundle.raes[cid], [x])
        for k in ("mse", "mae", "ssim"):
            out.setdefault((cid, e.label), {}).setdefault(k, []).append(float(st[k][0]))
    return out


@pytest.fixture(scope="module")
def desk():
    corpus = synth_generate(SynthSpec(), DESK_SEED)
    manifest = split_dataset(corpus.manifest, 0)
    images = dict(zip([e.path for e in corpus.manifest.entries], corpus.images))
    t0 = time.perf_counter()
    bundle, val = cmd_train(manifest, PipelineConfig(seed=DESK_SEED), loader=images.__getitem__)
    test = cmd_eval(bundle, manifest, "test", loader=images.__getitem__)
    elapsed = time.perf_counter() - t0
    return dict(manifest=manifest, images=images, bundle=bundle, val=val, test=test, elapsed=elapsed)


@pytest.mark.slow
def test_c7_end_to_end(desk, recorder):
    b, test = desk["bundle"], desk["test"]
    ok = (desk["elapsed"] < 15 * 60 and test.auc >= 0.90 and test.fn_rate <= 0.10
          and len(b.raes) == 7 and b.forest.feature_dim == 73 and desk["val"].auc >= 0.90)
    recorder("7", ok, f"train+eval {desk['elapsed']:.0f}s, test AUC {test.auc:.4f}, fn_rate {test.fn_rate:.4f} "
                      f"(val AUC {desk['val'].auc:.4f}), {len(b.raes)} autoencoders, feature dim "
                      f"{b.forest.feature_dim}")
    assert ok


@pytest.mark.slow
def test_c8a_animals_reconstruct_worse(desk, recorder):
    stats = _class_stats(desk["bundle"], desk["manifest"], desk["images"])
    rows, ok = [], True
    for cid in range(desk["bundle"].kmeans.k):
        e, a = stats.get((cid, EMPTY)), stats.get((cid, ANIMAL))
        if e is None or a is None:
            ok = False
            rows.append(f"c{cid}: missing class")
            continue
        m = {k: (np.mean(a[k]), np.mean(e[k])) for k in ("mse", "mae", "ssim")}
        ok &= m["mse"][0] > m["mse"][1] and m["mae"][0] > m["mae"][1] and m["ssim"][0] < m["ssim"][1]
        rows.append(f"c{cid} mse {m['mse'][0]:.4f}>{m['mse'][1]:.4f}")
    recorder("8a", ok, "animal error above empty (MSE, MAE up, SSIM down) in every cluster: " + ", ".join(rows))
    assert ok


@pytest.mark.slow
def test_c8b_equalization_widens_gap(desk, recorder):
    manifest, images = desk["manifest"], desk["images"]
    rgb_bundle, _ = cmd_train(manifest, PipelineConfig(seed=DESK_SEED, equalize=False), loader=images.__getitem__)

    def gap(bundle):
        stats = _class_stats(bundle, manifest, images)
        pool = lambda lab: {k: sum((v[k] for (c, l), v in stats.items() if l == lab), [])  # noqa: E731
                            for k in ("mse", "mae", "ssim")}
        return diff_metrics(pool(ANIMAL), pool(EMPTY))

    eq, raw = gap(desk["bundle"]), gap(rgb_bundle)
    ok = all(a > b for a, b in zip(eq, raw))
    recorder("8b", ok, "Diff (MSE, MAE, SSIM) equalized " + ", ".join(f"{v:.4f}" for v in eq)
             + " vs RGB " + ", ".join(f"{v:.4f}" for v in raw))
    assert ok


@pytest.mark.slow
def test_c8c_grid_beats_whole_image(desk, recorder):
    grid = _refit(desk["bundle"], desk["manifest"], desk["images"], GridSpec(6, 4), "global")
    whole = _refit(desk["bundle"], desk["manifest"], desk["images"], GridSpec(1, 1), "global")
    ok = grid.auc >= whole.auc + 0.02
    recorder("8c", ok, f"test AUC 6x4 {grid.auc:.4f} vs 1x1 {whole.auc:.4f}")
    assert ok


@pytest.mark.slow
def test_c8d_balancing_lowers_fn(desk, recorder):
    bal = _refit(desk["bundle"], desk["manifest"], desk["images"], GridSpec(6, 4), "global")
    raw = _refit(desk["bundle"], desk["manifest"], desk["images"], GridSpec(6, 4), "none")
    ok = bal.fn_rate <= raw.fn_rate
    recorder("8d", ok, f"test fn_rate global {bal.fn_rate:.4f} vs unbalanced {raw.fn_rate:.4f}")
    assert ok


@pytest.mark.slow
def test_c9_persistence(desk, recorder, tmp_path):
    bundle = desk["bundle"]
    path = tmp_path / "bundle.zip"
    path.write_bytes(bundle_bytes(bundle))
    again = load_bundle(path)
    held = [desk["images"][e.path] for e in desk["manifest"].select("test")[:50]]
    same = cmd_predict(again, held) == cmd_predict(bundle, held)

    raw = path.read_bytes()
    (tmp_path / "cut.zip").write_bytes(raw[: len(raw) - 1000])
    try:
        load_bundle(tmp_path / "cut.zip")
        truncated = False
    except ChecksumMismatch:
        truncated = True

    src = zipfile.ZipFile(io.BytesIO(raw))
    with zipfile.ZipFile(tmp_path / "future.zip", "w") as out:
        for name in src.namelist():
            data = src.read(name)
            if name == "meta.json":
                meta = json.loads(data)
                meta["format_version"] += 1
                data = json.dumps(meta).encode()
            out.writestr(name, data)
    try:
        load_bundle(tmp_path / "future.zip")
        future = False
    except VersionMismatch:
        future = True
    ok = same and truncated and future
    recorder("9", ok, f"identical predictions on {len(held)} held-out images: {same}, truncated -> "
                      f"ChecksumMismatch: {truncated}, future version -> VersionMismatch: {future}")
    assert ok
