"""Per-family dimensionality reduction, random-forest voters, operating
points, and the voting ensemble.

Each feature family gets a z-scored PCA (smallest k reaching the variance
target) and a 40-tree depth-3 random forest fit on the projected training
data. A decision threshold per family is picked on validation data:
specificity above 0.95 with the best sensitivity above 0.60 when reachable,
otherwise the best-specificity point with nonzero sensitivity, flagged low
quality. The ensemble votes: viable when at least V of the five families
fire.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateData,
    DimensionMismatch,
    IoFailure,
    MissingFamily,
    SingleClass,
    TooFewSamples,
)
from .features import FAMILIES

PCA_MAGIC = b"TVPC"
DEFAULT_VARIANCE_TARGET = 0.95
DEFAULT_TREES = 40
DEFAULT_DEPTH = 3
DEFAULT_VOTES = 2
ZERO_STD = 1e-12


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaModel:
    family: str
    mean: np.ndarray
    std: np.ndarray
    components: np.ndarray
    explained_ratios: np.ndarray
    eigenvalues: np.ndarray
    total_variance: float
    dropped_columns: list[int]
    n_features: int

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def _kept(self) -> np.ndarray:
        keep = np.ones(self.n_features, dtype=bool)
        keep[self.dropped_columns] = False
        return keep

    def project(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        keep = self._kept()
        Z = (X[:, keep] - self.mean[keep]) / self.std[keep]
        return Z @ self.components.T

    def backproject(self, Y: np.ndarray) -> np.ndarray:
        """Back to the original feature space; dropped columns return at
        their training means."""
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        Z = Y @ self.components
        keep = self._kept()
        out = np.tile(self.mean, (Y.shape[0], 1))
        out[:, keep] = Z * self.std[keep] + self.mean[keep]
        return out


def fit_pca(X: np.ndarray, variance_target: float = DEFAULT_VARIANCE_TARGET, family: str = "") -> PcaModel:
    """Eigendecomposition of the z-scored covariance; when the feature count
    exceeds the sample count the n x n Gram matrix yields the same nonzero
    spectrum at far lower cost."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch("training matrix must be 2D")
    n, d = X.shape
    if n < 2:
        raise DegenerateData(f"PCA needs at least 2 samples, got {n}")
    mean_all = X.mean(axis=0)
    std_all = X.std(axis=0)
    keep = std_all > ZERO_STD
    dropped = [int(i) for i in np.nonzero(~keep)[0]]
    if not keep.any():
        raise DegenerateData("all columns have zero variance")
    Z = (X[:, keep] - mean_all[keep]) / std_all[keep]
    d_kept = Z.shape[1]
    denom = n - 1
    if d_kept <= n:
        cov = Z.T @ Z / denom
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals = np.maximum(eigvals[order], 0.0)
        components = eigvecs[:, order].T
    else:
        gram = Z @ Z.T / denom
        gvals, gvecs = np.linalg.eigh(gram)
        order = np.argsort(gvals)[::-1]
        gvals = np.maximum(gvals[order], 0.0)
        gvecs = gvecs[:, order]
        nonzero = gvals > 1e-12 * max(gvals[0], 1.0)
        gvals = gvals[nonzero]
        scale = np.sqrt(gvals * denom)
        components = (Z.T @ gvecs[:, nonzero] / scale).T
        eigvals = gvals
    total = float((Z * Z).sum()) / denom
    if total <= 0:
        raise DegenerateData("zero total variance after standardization")
    ratios = eigvals / total
    cumulative = np.cumsum(ratios)
    k = int(np.searchsorted(cumulative, variance_target) + 1)
    k = min(k, len(eigvals))
    components = components[:k]
    # fix sign so repeated fits serialize identically
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return PcaModel(
        family=family,
        mean=mean_all,
        std=std_all,
        components=components,
        explained_ratios=ratios[:k],
        eigenvalues=eigvals[:k],
        total_variance=total,
        dropped_columns=dropped,
        n_features=d,
    )


# ---------------------------------------------------------------------------
# random forest
# ---------------------------------------------------------------------------

@dataclass
class ForestConfig:
    trees: int = DEFAULT_TREES
    depth: int = DEFAULT_DEPTH
    seed: int = 0

    def __post_init__(self):
        if self.trees < 1 or self.depth < 1:
            raise ValueError("trees and depth must be positive")


@dataclass
class ForestModel:
    family: str
    trees: list[dict]
    seed: int
    n_inputs: int
    tau: float = 0.5

    def predict_proba(self, Z: np.ndarray) -> np.ndarray:
        """Fraction of trees voting viable (leaf probability >= 0.5)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.n_inputs:
            raise DimensionMismatch(f"expected {self.n_inputs} inputs, got {Z.shape[1]}")
        out = np.zeros(Z.shape[0])
        for i, x in enumerate(Z):
            votes = sum(1 for t in self.trees if _tree_leaf(t, x) >= 0.5)
            out[i] = votes / len(self.trees)
        return out


def _tree_leaf(node: dict, x: np.ndarray) -> float:
    while "leaf" not in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["leaf"]


def _gini(y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    p = float(y.mean())
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def _grow(Z: np.ndarray, y: np.ndarray, idx: np.ndarray, depth: int, max_depth: int,
          rng: np.random.Generator) -> dict:
    node_y = y[idx]
    p = float(node_y.mean())
    if depth >= max_depth or p == 0.0 or p == 1.0 or len(idx) < 2:
        return {"leaf": p}
    k = Z.shape[1]
    m = max(1, int(math.sqrt(k)))
    feats = rng.choice(k, size=min(m, k), replace=False)
    best = None
    for f in feats:
        vals = Z[idx, f]
        uniq = np.unique(vals)
        if len(uniq) < 2:
            continue
        mids = (uniq[:-1] + uniq[1:]) / 2.0
        for thr in mids:
            go_left = vals <= thr
            left, right = idx[go_left], idx[~go_left]
            imp = (len(left) * _gini(y[left]) + len(right) * _gini(y[right])) / len(idx)
            if best is None or imp < best[0]:
                best = (imp, int(f), float(thr), left, right)
    if best is None or best[0] >= _gini(node_y):
        return {"leaf": p}
    _, f, thr, left, right = best
    return {
        "feature": f,
        "threshold": thr,
        "left": _grow(Z, y, left, depth + 1, max_depth, rng),
        "right": _grow(Z, y, right, depth + 1, max_depth, rng),
    }


def fit_forest(Z: np.ndarray, y: np.ndarray, cfg: ForestConfig | None = None, family: str = "") -> ForestModel:
    """Bootstrap-bagged Gini trees; each tree draws its own generator from
    (seed, tree index) so the whole fit is reproducible."""
    cfg = cfg or ForestConfig()
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    y = np.asarray(y).astype(np.int64).ravel()
    n = Z.shape[0]
    if y.shape[0] != n:
        raise DimensionMismatch("labels must match samples")
    if n < 4:
        raise TooFewSamples(f"forest needs at least 4 samples, got {n}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClass("training labels are all one class")
    trees = []
    for t in range(cfg.trees):
        rng = np.random.default_rng([cfg.seed, t])
        boot = rng.integers(0, n, size=n)
        trees.append(_grow(Z, y, boot, 0, cfg.depth, rng))
    return ForestModel(family=family, trees=trees, seed=cfg.seed, n_inputs=Z.shape[1])


# ---------------------------------------------------------------------------
# operating point
# ---------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    tau: float
    sensitivity: float
    specificity: float
    low_quality: bool


def calibrate_threshold(probs: np.ndarray, labels: np.ndarray,
                        spec_target: float = 0.95,
                        sens_target: float = 0.60) -> CalibrationResult:
    """Pick tau on validation probabilities.

    Primary branch: thresholds with specificity > spec_target and
    sensitivity > sens_target, maximizing sensitivity (ties to higher
    specificity, then larger tau). Fallback when empty: among thresholds
    with nonzero sensitivity, maximize specificity (ties to sensitivity,
    then larger tau), flagged low quality.
    """
    probs = np.asarray(probs, dtype=np.float64).ravel()
    pos = np.asarray(labels).astype(bool).ravel()
    if probs.shape != pos.shape:
        raise DimensionMismatch("probs and labels must align")
    if pos.all() or not pos.any():
        raise SingleClass("validation set must contain both classes")
    best_primary = None
    best_fallback = None
    for tau in np.unique(probs):
        pred = probs >= tau
        tp = int((pred & pos).sum())
        fn = int((~pred & pos).sum())
        tn = int((~pred & ~pos).sum())
        fp = int((pred & ~pos).sum())
        sens = tp / (tp + fn)
        spec = tn / (tn + fp)
        if spec > spec_target and sens > sens_target:
            key = (sens, spec, tau)
            if best_primary is None or key > best_primary[0]:
                best_primary = (key, float(tau), sens, spec)
        if sens > 0.0:
            key = (spec, sens, tau)
            if best_fallback is None or key > best_fallback[0]:
                best_fallback = (key, float(tau), sens, spec)
    if best_primary is not None:
        _, tau, sens, spec = best_primary
        return CalibrationResult(tau, sens, spec, low_quality=False)
    _, tau, sens, spec = best_fallback
    return CalibrationResult(tau, sens, spec, low_quality=True)


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------

@dataclass
class FamilyModel:
    pca: PcaModel
    forest: ForestModel
    calibration: CalibrationResult | None = None

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.forest.predict_proba(self.pca.project(X))


@dataclass
class EnsembleModel:
    members: dict[str, FamilyModel]
    vote_threshold: int = DEFAULT_VOTES

    def __post_init__(self):
        if set(self.members) != set(FAMILIES):
            missing = set(FAMILIES) - set(self.members)
            extra = set(self.members) - set(FAMILIES)
            raise MissingFamily(f"missing={sorted(missing)} extra={sorted(extra)}")
        if not 1 <= self.vote_threshold <= 5:
            raise ValueError("vote threshold must be in 1..5")


@dataclass
class ClassificationOutcome:
    probabilities: dict[str, float]
    votes: dict[str, int]
    score: int
    label: str
    vote_threshold: int


def predict(ensemble: EnsembleModel, features: dict[str, np.ndarray]) -> ClassificationOutcome:
    """One nodule's feature vectors (keyed by family) to a voted label."""
    probabilities = {}
    votes = {}
    for family in FAMILIES:
        if family not in features:
            raise MissingFamily(f"features missing family {family!r}")
        member = ensemble.members[family]
        p = float(member.predict_proba(np.asarray(features[family], dtype=np.float64)[None, :])[0])
        probabilities[family] = p
        votes[family] = int(p >= member.forest.tau)
    score = sum(votes.values())
    label = "viable" if score >= ensemble.vote_threshold else "nonviable"
    return ClassificationOutcome(probabilities, votes, score, label, ensemble.vote_threshold)


def fit_family(X_train, y_train, X_val, y_val, family: str,
               variance_target: float = DEFAULT_VARIANCE_TARGET,
               cfg: ForestConfig | None = None,
               spec_target: float = 0.95,
               sens_target: float = 0.60) -> FamilyModel:
    """PCA on training features, forest on the projection, tau on the
    held-out validation split."""
    pca = fit_pca(X_train, variance_target, family)
    forest = fit_forest(pca.project(X_train), y_train, cfg, family)
    cal = calibrate_threshold(forest.predict_proba(pca.project(X_val)), y_val,
                              spec_target, sens_target)
    forest.tau = cal.tau
    return FamilyModel(pca, forest, cal)


# ---------------------------------------------------------------------------
# bundle persistence
# ---------------------------------------------------------------------------

def _write_pca(pca: PcaModel, path) -> None:
    tensors = {
        "mean": pca.mean,
        "std": pca.std,
        "components": pca.components,
        "explained_ratios": pca.explained_ratios,
        "eigenvalues": pca.eigenvalues,
    }
    names = sorted(tensors)
    header = {
        "family": pca.family,
        "n_features": pca.n_features,
        "dropped_columns": pca.dropped_columns,
        "total_variance": pca.total_variance,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PCA_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def _read_pca(path) -> PcaModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PCA_MAGIC:
        raise IoFailure(f"{path}: not a PCA tensor file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    pos = 8 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += count * 8
    return PcaModel(
        family=header["family"],
        mean=tensors["mean"],
        std=tensors["std"],
        components=tensors["components"],
        explained_ratios=tensors["explained_ratios"],
        eigenvalues=tensors["eigenvalues"],
        total_variance=header["total_variance"],
        dropped_columns=list(header["dropped_columns"]),
        n_features=header["n_features"],
    )


def save_bundle(ensemble: EnsembleModel, bundle_dir) -> None:
    """model.bundle layout: manifest.json plus pca_<family>.bin and
    forest_<family>.json per member; fully deterministic bytes."""
    os.makedirs(bundle_dir, exist_ok=True)
    manifest = {"schema": 1, "vote_threshold": ensemble.vote_threshold, "families": {}}
    for family in FAMILIES:
        member = ensemble.members[family]
        cal = member.calibration
        manifest["families"][family] = {
            "seed": member.forest.seed,
            "tau": member.forest.tau,
            "k": member.pca.k,
            "n_features": member.pca.n_features,
            "dropped_columns": member.pca.dropped_columns,
            "calibration": None if cal is None else {
                "sensitivity": cal.sensitivity,
                "specificity": cal.specificity,
                "low_quality": cal.low_quality,
            },
        }
        _write_pca(member.pca, os.path.join(bundle_dir, f"pca_{family}.bin"))
        forest_doc = {
            "family": family,
            "seed": member.forest.seed,
            "n_inputs": member.forest.n_inputs,
            "tau": member.forest.tau,
            "trees": member.forest.trees,
        }
        with open(os.path.join(bundle_dir, f"forest_{family}.json"), "w") as fh:
            json.dump(forest_doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    with open(os.path.join(bundle_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_bundle(bundle_dir) -> EnsembleModel:
    manifest_path = os.path.join(bundle_dir, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{manifest_path}: invalid JSON: {exc}") from exc
    members = {}
    for family in FAMILIES:
        if family not in manifest.get("families", {}):
            raise MissingFamily(f"bundle manifest lacks family {family!r}")
        meta = manifest["families"][family]
        pca = _read_pca(os.path.join(bundle_dir, f"pca_{family}.bin"))
        with open(os.path.join(bundle_dir, f"forest_{family}.json")) as fh:
            doc = json.load(fh)
        forest = ForestModel(
            family=family, trees=doc["trees"], seed=doc["seed"],
            n_inputs=doc["n_inputs"], tau=doc["tau"],
        )
        cal = meta.get("calibration")
        calibration = None if cal is None else CalibrationResult(
            tau=meta["tau"], sensitivity=cal["sensitivity"],
            specificity=cal["specificity"], low_quality=cal["low_quality"],
        )
        members[family] = FamilyModel(pca, forest, calibration)
    return EnsembleModel(members, vote_threshold=manifest["vote_threshold"])
