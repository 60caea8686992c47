"""Release checklist for the full pipeline.

Every guarantee the package makes is exercised here against independent
oracles: hand-rolled co-occurrence statistics, analytic warp recovery,
finite-difference gradients, pair-counting AUC, an exhaustive vote table,
and a from-scratch logistic-regression baseline on the synthetic study.
Each test prints one ``[PASS]``/``[FAIL]`` line per checked property
(visible with ``-s``) before asserting, so a red run names exactly which
guarantee broke.
"""

import math
import os
import time

import numpy as np
import pytest
from scipy.optimize import minimize

from thermoviab import pipeline as pl
from thermoviab.features import (
    FAMILIES,
    FAMILY_SIZES,
    GLCM_ANGLES,
    GLCM_DISTANCES,
    glcm,
)
from thermoviab.io import read_case, read_manifest, read_mask_pgm
from thermoviab.learning import (
    EnsembleModel,
    FamilyModel,
    ForestModel,
    PcaModel,
    fit_pca,
    predict,
)
from thermoviab.metrics import ConfusionCounts, as_percent, auc, stratified_split
from thermoviab.phantom import PhantomSpec, generate_case, generate_study
from thermoviab.registration import WarpModel, ecc_align
from thermoviab.segmentation import (
    SegmenterNet,
    TrainConfig,
    dice,
    infer_mask,
    segment_cold_region,
    train_segmenter,
)


def check(name: str, ok: bool, detail: str = ""):
    verdict = "PASS" if ok else "FAIL"
    line = f"[{verdict}] {name}" + (f": {detail}" if detail else "")
    print(line)
    assert ok, line


# --------------------------------------------------------------------------
# co-occurrence statistics vs a dict-based oracle
# --------------------------------------------------------------------------

_OFFSETS = {0: (0, 1), 45: (-1, 1), 90: (-1, 0), 135: (-1, -1)}


def oracle_glcm(grid, distance, angle, levels):
    dr, dc = _OFFSETS[angle]
    dr, dc = dr * distance, dc * distance
    h, w = grid.shape
    counts = {}
    for i in range(h):
        for j in range(w):
            i2, j2 = i + dr, j + dc
            if not (0 <= i2 < h and 0 <= j2 < w):
                continue
            a, b = int(grid[i, j]), int(grid[i2, j2])
            if a < 0 or b < 0:
                continue
            counts[(a, b)] = counts.get((a, b), 0) + 1
            counts[(b, a)] = counts.get((b, a), 0) + 1
    total = float(sum(counts.values()))
    p = {k: v / total for k, v in counts.items()}
    contrast = sum(v * (a - b) ** 2 for (a, b), v in p.items())
    dissimilarity = sum(v * abs(a - b) for (a, b), v in p.items())
    homogeneity = sum(v / (1.0 + (a - b) ** 2) for (a, b), v in p.items())
    asm = sum(v * v for v in p.values())
    energy = math.sqrt(asm)
    marginal = [0.0] * levels
    for (a, _), v in p.items():
        marginal[a] += v
    mu = sum(a * marginal[a] for a in range(levels))
    var = sum((a - mu) ** 2 * marginal[a] for a in range(levels))
    if var <= 0.0:
        correlation = 1.0
    else:
        correlation = sum(v * (a - mu) * (b - mu) for (a, b), v in p.items()) / var
    return contrast, dissimilarity, homogeneity, asm, energy, correlation


def test_glcm_matches_bruteforce_oracle():
    rng = np.random.default_rng(42)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        grid = rng.integers(0, 8, size=(8, 8))
        for d in GLCM_DISTANCES:
            for a in GLCM_ANGLES:
                got = glcm(grid, d, a, levels=8)
                want = oracle_glcm(grid, d, a, levels=8)
                worst = max(worst, max(abs(g - w) for g, w in zip(got, want)))
    elapsed = time.perf_counter() - t0
    check("glcm oracle", worst <= 1e-12,
          f"100 grids x {len(GLCM_DISTANCES)} distances x {len(GLCM_ANGLES)} angles, "
          f"max |err| {worst:.2e}")
    check("glcm oracle runtime", elapsed < 10.0, f"{elapsed:.1f}s (budget 10s)")


# --------------------------------------------------------------------------
# registration vs analytically shifted images
# --------------------------------------------------------------------------

def _smooth(xs, ys):
    return (30.0 + 0.004 * xs + 0.006 * ys
            + 0.8 * np.sin(xs / 9.3) + 0.7 * np.cos(ys / 11.1)
            + 0.5 * np.sin((xs + ys) / 17.0)
            + 0.35 * np.cos(xs / 5.1 - ys / 7.7)
            + 0.25 * np.sin(xs / 3.9 + ys / 13.3))


def test_ecc_recovers_known_translations():
    ys, xs = np.mgrid[0:240, 0:320]
    xs = xs + 0.5
    ys = ys + 0.5
    ref = _smooth(xs, ys)
    rng = np.random.default_rng(17)
    t0 = time.perf_counter()

    def run(noise):
        worst = 0.0
        for _ in range(50):
            tx, ty = rng.uniform(-4.0, 4.0, size=2)
            mov = _smooth(xs - tx, ys - ty)
            r = ref
            if noise > 0:
                r = ref + rng.normal(0.0, noise, ref.shape)
                mov = mov + rng.normal(0.0, noise, ref.shape)
            res = ecc_align(r, mov, kind="translation")
            err = float(np.hypot(res.warp.params[0] - tx, res.warp.params[1] - ty))
            worst = max(worst, err)
        return worst

    clean = run(0.0)
    noisy = run(0.04)
    self_res = ecc_align(ref, ref, kind="translation")
    elapsed = time.perf_counter() - t0
    check("ecc noise-free recovery", clean < 0.1,
          f"50 translations in [-4,4]^2, worst {clean:.4f}px (< 0.1)")
    check("ecc noisy recovery", noisy < 0.5,
          f"sigma 0.04, worst {noisy:.4f}px (< 0.5)")
    check("ecc self-alignment", abs(self_res.rho - 1.0) <= 1e-9,
          f"|rho-1| = {abs(self_res.rho - 1.0):.2e}")
    check("ecc runtime", elapsed < 60.0, f"{elapsed:.1f}s (budget 60s)")


# --------------------------------------------------------------------------
# trainable segmenter: gradients and overfit capacity
# --------------------------------------------------------------------------

def test_segmenter_gradients_and_overfit():
    t0 = time.perf_counter()
    net = SegmenterNet(widths=(2, 3, 4), seed=3)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 8))
    y = (rng.random((8, 8)) > 0.5).astype(np.float64)
    _, grads = net.loss_and_grads(x, y)

    worst_rel = 0.0
    h = 1e-6
    for key, param in net.params.items():
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi, _ = net.loss_and_grads(x, y)
            flat[i] = orig - h
            lo, _ = net.loss_and_grads(x, y)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * h)
        denom = max(float(np.linalg.norm(numeric)), 1e-12)
        rel = float(np.linalg.norm(grads[key] - numeric)) / denom
        worst_rel = max(worst_rel, rel)
    check("segmenter gradient check", worst_rel <= 1e-3,
          f"all {sum(p.size for p in net.params.values())} parameters, "
          f"worst tensor rel err {worst_rel:.2e}")

    geoms = [
        ((26.0, 22.0), 12.0, 100),
        ((38.0, 26.0), 11.0, 101),
        ((30.0, 20.0), 13.0, 102),
        ((34.0, 28.0), 14.0, 103),
        ((24.0, 24.0), 12.0, 104),
    ]
    dataset = []
    for center, radius, seed in geoms:
        spec = PhantomSpec(width=64, height=48, disk_center=center,
                           disk_radius=radius, nodule_radius=3.0, duration=2.0,
                           noise_sigma=0.02, jitter_amp=0.0, seed=seed)
        _, seq, truth = generate_case(spec)
        dataset.append((seq.frames[0], truth.mask))
    trained = train_segmenter(dataset, TrainConfig(epochs=200, batch_size=5, seed=11))
    scores = [dice(infer_mask(trained, frame), mask) for frame, mask in dataset]
    elapsed = time.perf_counter() - t0
    check("segmenter overfit", min(scores) >= 0.95,
          f"5 frames, 200 epochs, dice {['%.3f' % s for s in scores]}")
    check("segmenter runtime", elapsed < 120.0, f"{elapsed:.1f}s (budget 120s)")


# --------------------------------------------------------------------------
# classical segmentation quality on generated studies
# --------------------------------------------------------------------------

def test_classical_segmentation_quality(tmp_path):
    template = PhantomSpec(width=96, height=72, disk_radius=20.0,
                           nodule_radius=5.0, duration=6.0, rate=1.0)
    root = str(tmp_path / "seg20")
    generate_study(root, 20, 0.5, seed=31, template=template)
    scores = []
    for case_dir in pl.discover_cases(root):
        _, seq = read_case(case_dir)
        mask = segment_cold_region(seq.frames[0])
        truth = read_mask_pgm(os.path.join(case_dir, "truth_mask.pgm"))
        scores.append(dice(mask, truth))
    check("classical segmentation dice", min(scores) >= 0.9,
          f"20 cases, min {min(scores):.3f} mean {np.mean(scores):.3f}")


# --------------------------------------------------------------------------
# shared end-to-end study (built once, inspected by several tests)
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    base = tmp_path_factory.mktemp("study60")
    root = str(base / "cases")
    template = PhantomSpec(width=128, height=96, disk_radius=24.0,
                           nodule_radius=8.0, rate=0.2, duration=120.0)
    t0 = time.perf_counter()
    generate_study(root, 60, 0.5, seed=1, template=template)
    dirs = pl.discover_cases(root)
    by_id = {}
    cases = []
    for d in dirs:
        m = read_manifest(d)
        by_id[m["case_id"]] = d
        cases.append((m["case_id"], m["label"] == "viable"))
    split = stratified_split(cases, ratio=(2, 1), seed=1)
    train_ids = set(split.train)
    test_ids = [cid for cid, _ in cases if cid not in train_ids]

    train_dir = str(base / "train")
    test_dir = str(base / "test")
    os.makedirs(train_dir)
    os.makedirs(test_dir)
    for cid, target in [(c, train_dir) for c in split.train] + \
                       [(c, test_dir) for c in test_ids]:
        src = by_id[cid]
        os.symlink(src, os.path.join(target, os.path.basename(src)))

    bundle = str(base / "bundle")
    pl.train_on_dataset(train_dir, bundle, ratio=(80, 20), seed=1,
                        cfg=pl.RunConfig(data_dir=train_dir, seed=1, jobs=4))
    report = pl.evaluate_dataset(test_dir, bundle, str(base / "report.json"),
                                 cfg=pl.RunConfig(data_dir=test_dir, seed=1, jobs=4))
    elapsed = time.perf_counter() - t0
    return {
        "root": root, "dirs": dirs, "train_dir": train_dir, "test_dir": test_dir,
        "bundle": bundle, "report": report, "elapsed": elapsed,
        "train_ids": sorted(train_ids), "test_ids": sorted(test_ids),
        "labels": dict(cases),
    }


def test_feature_vector_cardinality(e2e):
    from thermoviab.features import read_feature_csv

    reference_names = None
    for case_dir in e2e["dirs"]:
        _, names, values = read_feature_csv(os.path.join(case_dir, "case_features.csv"))
        if reference_names is None:
            reference_names = names
        assert names == reference_names
        assert values.shape[1] == len(names)
    counts = {fam: sum(1 for n in reference_names if n.startswith(fam + "."))
              for fam in FAMILIES}
    ok = counts == FAMILY_SIZES and sum(counts.values()) == len(reference_names)
    check("feature cardinality", ok,
          " ".join(f"{fam}={counts[fam]}" for fam in FAMILIES) +
          f" total={len(reference_names)}")


def test_pca_contract(e2e):
    data = pl.collect_features(pl.discover_cases(e2e["train_dir"]))
    worst_cum = 1.0
    worst_orth = 0.0
    worst_rel = 0.0
    for family in FAMILIES:
        X = data.matrices[family]
        pca = fit_pca(X, 0.95, family)
        cum = float(np.sum(pca.explained_ratios))
        worst_cum = min(worst_cum, cum)
        gram = pca.components @ pca.components.T
        worst_orth = max(worst_orth, float(np.max(np.abs(gram - np.eye(pca.k)))))

        keep = np.ones(pca.n_features, dtype=bool)
        keep[pca.dropped_columns] = False
        Xs = (X[:, keep] - pca.mean[keep]) / pca.std[keep]
        Z = pca.project(X)
        residual = Xs - Z @ pca.components
        mse = float((residual ** 2).sum()) / (X.shape[0] - 1)
        tail = float(pca.total_variance - pca.eigenvalues[: pca.k].sum())
        if tail < 1e-12:
            rel = 0.0 if mse < 1e-9 else 1.0
        else:
            rel = abs(mse - tail) / tail
        worst_rel = max(worst_rel, rel)
    check("pca variance capture", worst_cum >= 0.95, f"min cumulative {worst_cum:.4f}")
    check("pca orthonormal components", worst_orth <= 1e-8, f"max |C C^T - I| {worst_orth:.2e}")
    check("pca reconstruction identity", worst_rel <= 1e-6,
          f"residual mass vs tail eigenvalues, worst rel {worst_rel:.2e}")


# --------------------------------------------------------------------------
# voting ensemble: exhaustive truth table
# --------------------------------------------------------------------------

def _stub_member(family: str, vote: int) -> FamilyModel:
    pca = PcaModel(family, np.zeros(1), np.ones(1), np.eye(1),
                   np.ones(1), np.ones(1), 1.0, [], 1)
    leaf = 1.0 if vote else 0.0
    forest = ForestModel(family, [{"leaf": leaf} for _ in range(40)],
                         seed=0, n_inputs=1, tau=0.5)
    return FamilyModel(pca, forest)


def test_vote_table_exhaustive():
    features = {fam: np.zeros(1) for fam in FAMILIES}
    bad = []
    for bits in range(32):
        votes = [(bits >> i) & 1 for i in range(5)]
        ens = EnsembleModel({fam: _stub_member(fam, v)
                             for fam, v in zip(FAMILIES, votes)}, vote_threshold=2)
        out = predict(ens, features)
        pop = sum(votes)
        want_label = "viable" if pop >= 2 else "nonviable"
        if out.score != pop or out.label != want_label or \
                out.votes != {fam: v for fam, v in zip(FAMILIES, votes)}:
            bad.append(bits)
    check("vote truth table", not bad,
          f"all 32 patterns, threshold 2{'' if not bad else ' bad=' + str(bad)}")


# --------------------------------------------------------------------------
# metrics vs pair counting and exact rationals
# --------------------------------------------------------------------------

def _pair_count_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_auc_and_confusion_oracles():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(4, 41))
        labels = rng.integers(0, 2, n).astype(bool)
        if labels.all():
            labels[0] = False
        if not labels.any():
            labels[0] = True
        scores = np.round(rng.normal(0.0, 1.0, n), 1)  # quantized: ties happen
        if auc(scores, labels) != _pair_count_auc(scores.tolist(), labels.tolist()):
            mismatches += 1
    check("auc pair-count oracle", mismatches == 0,
          f"200 random score sets with ties, {mismatches} mismatches")

    c = ConfusionCounts(tp=15, fn=7, tn=25, fp=1)
    sens = as_percent(c.sensitivity)
    spec = as_percent(c.specificity)
    check("confusion percentages", sens == 68.18 and spec == 96.15,
          f"15/7/25/1 -> sensitivity {sens} specificity {spec}")


# --------------------------------------------------------------------------
# end-to-end study with an independent logistic baseline
# --------------------------------------------------------------------------

def _windows(shape, point, half):
    h, w = shape
    x, y = point
    j0, i0 = int(round(x - half)), int(round(y - half))
    win = np.zeros((h, w), dtype=bool)
    win[max(0, i0):i0 + 2 * half, max(0, j0):j0 + 2 * half] = True
    big = np.zeros((h, w), dtype=bool)
    big[max(0, i0 - 2 * half):i0 + 4 * half, max(0, j0 - 2 * half):j0 + 4 * half] = True
    return win, big & ~win


def _recovery_features(case_dir, half=6):
    """Two physics-grounded contrasts at the annotated point.

    A perfused nodule re-warms faster than the surrounding skin, so the
    log-deficit of the nodule window decays at a steeper rate than the
    ring around it, and it settles warmer once equilibrium is reached.
    Slopes are amplitude-invariant, which cancels the cooling-depth
    geometry shared by both classes.
    """
    record, seq = read_case(case_dir)
    point = record.annotations[0].point
    pre = np.asarray(seq.precool.temps, dtype=np.float64)
    win, ring = _windows(pre.shape, point, half)
    times, dwin, dring = [], [], []
    for f in seq.frames:
        if f.timestamp > 60:
            break
        img = np.asarray(f.temps, dtype=np.float64)
        times.append(f.timestamp)
        dwin.append(pre[win].mean() - img[win].mean())
        dring.append(pre[ring].mean() - img[ring].mean())
    t = np.array(times)
    dwin = np.array(dwin)
    dring = np.array(dring)
    ok = (dwin > 0.05) & (dring > 0.05)
    t, dwin, dring = t[ok], dwin[ok], dring[ok]

    def slope(tt, dd):
        A = np.vstack([tt, np.ones_like(tt)]).T
        coef, *_ = np.linalg.lstsq(A, np.log(dd), rcond=None)
        return coef[0]

    f1 = slope(t, dwin) - slope(t, dring)
    late = np.mean([np.asarray(f.temps, dtype=np.float64) for f in seq.frames[-3:]], axis=0)
    f2 = late[win].mean() - late[ring].mean()
    return [f1, f2]


def _logistic_auc(e2e):
    ids, X, y = [], [], []
    for d in e2e["dirs"]:
        m = read_manifest(d)
        ids.append(m["case_id"])
        X.append(_recovery_features(d))
        y.append(e2e["labels"][m["case_id"]])
    X = np.array(X)
    y = np.array(y)
    tr = np.array([cid in set(e2e["train_ids"]) for cid in ids])
    te = ~tr
    mu, sd = X[tr].mean(0), X[tr].std(0) + 1e-12
    Z = (X - mu) / sd

    def loss(wb):
        w, b = wb[:2], wb[2]
        z = Z[tr] @ w + b
        nll = np.logaddexp(0, -z) * y[tr] + np.logaddexp(0, z) * (~y[tr])
        return nll.mean() + 1e-3 * (w @ w)

    res = minimize(loss, np.zeros(3), method="BFGS")
    scores = Z[te] @ res.x[:2] + res.x[2]
    return auc(scores, y[te])


def test_end_to_end_study(e2e):
    check("study split", len(e2e["train_ids"]) == 40 and len(e2e["test_ids"]) == 20,
          f"{len(e2e['train_ids'])} train / {len(e2e['test_ids'])} held out")
    rows = {r["key"]: r for r in e2e["report"].rows}
    ens = rows["ensemble"]
    check("ensemble auc", ens["auc"] >= 0.90, f"held-out AUC {ens['auc']:.3f} (>= 0.90)")
    check("ensemble specificity", ens["specificity"] >= 0.90,
          f"operating point specificity {ens['specificity']:.3f} (>= 0.90), "
          f"sensitivity {ens['sensitivity']:.3f}")
    baseline = _logistic_auc(e2e)
    check("logistic baseline", baseline >= 0.85,
          f"2-contrast logistic oracle AUC {baseline:.3f} (>= 0.85)")
    check("study runtime", e2e["elapsed"] < 600.0,
          f"generate+train+evaluate {e2e['elapsed']:.1f}s (budget 600s)")


# --------------------------------------------------------------------------
# byte determinism across independent runs in different directories
# --------------------------------------------------------------------------

def _study_and_train(base):
    root = os.path.join(base, "cases")
    template = PhantomSpec(width=96, height=72, disk_radius=20.0,
                           nodule_radius=5.0, duration=6.0, rate=1.0)
    generate_study(root, 8, 0.5, seed=23, template=template)
    bundle = os.path.join(base, "bundle")
    pl.train_on_dataset(root, bundle, seed=23,
                        cfg=pl.RunConfig(data_dir=root, seed=23, jobs=2))
    return root, bundle


def _tree_bytes(top):
    out = {}
    for dirpath, _, filenames in os.walk(top, followlinks=True):
        for name in filenames:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, top)] = fh.read()
    return out


def test_byte_determinism(tmp_path):
    root_a, bundle_a = _study_and_train(str(tmp_path / "a"))
    root_b, bundle_b = _study_and_train(str(tmp_path / "b"))

    mismatched_csvs = []
    for da, db in zip(pl.discover_cases(root_a), pl.discover_cases(root_b)):
        assert os.path.basename(da) == os.path.basename(db)
        for rel in ["case_features.csv"] + \
                [os.path.join("features", f"{fam}.csv") for fam in FAMILIES]:
            with open(os.path.join(da, rel), "rb") as fa, \
                    open(os.path.join(db, rel), "rb") as fb:
                if fa.read() != fb.read():
                    mismatched_csvs.append(os.path.join(os.path.basename(da), rel))
    check("feature csv determinism", not mismatched_csvs,
          f"8 cases x 6 csvs byte-compared{'' if not mismatched_csvs else ': ' + str(mismatched_csvs)}")

    tree_a = _tree_bytes(bundle_a)
    tree_b = _tree_bytes(bundle_b)
    same_names = sorted(tree_a) == sorted(tree_b)
    diffs = [rel for rel in tree_a if tree_a[rel] != tree_b.get(rel)]
    check("bundle determinism", same_names and not diffs,
          f"{len(tree_a)} files (incl. validation report) byte-identical"
          + ("" if same_names and not diffs else f" diffs={diffs}"))
