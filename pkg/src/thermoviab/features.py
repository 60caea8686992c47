"""Feature extraction over an aligned, masked, annotated sequence.

Five families with fixed cardinalities and stable ordering:

  temporal (42)           7 time-series features for each of 6 region series
  roi_textural (576)      GLCM properties of the cooled region
  nodule_textural (576)   the same grid evaluated on the nodule region
  relative_textural (1152) differences then ratios between the two
  first_order (90)        5 order statistics across 18 signals

Feature names follow a dotted grammar::

  name      = family "." detail
  family    = "temporal" | "roi_textural" | "nodule_textural"
            | "relative_textural" | "first_order"
  temporal  detail = series "." tfeat
  series    = region "_" signal          ; e.g. "win20_mean"
  region    = "roi" | "win20" | "win40"
  signal    = "mean" | "std"
  tfeat     = "auc" | "slope" | "skewness" | "kurtosis"
            | "spectral_centroid" | "spectral_slope" | "dominant_frequency"
  textural  detail = "image_" label "." "d" dist "." "a" angle "." prop
  label     = "precool" | "t15" | "t30" | "t45" | "t60" | "t75" | "t90" | "t105"
  dist      = "1" | "3" | "5"
  angle     = "0" | "45" | "90" | "135"
  prop      = "contrast" | "dissimilarity" | "homogeneity" | "asm"
            | "energy" | "correlation"
  relative  detail = ("diff" | "ratio") "." textural-detail
  firstorder detail = fsignal "." stat
  fsignal   = fbase "_t" time | fbase "_t" time "_minus_t" time
  fbase     = "roi" | "nodule" | "nodule_minus_roi"
  time      = "0" | "60" | "120"
  stat      = "min" | "mean" | "max" | "std" | "mode"

All statistics are population-level (no bias correction); degenerate
moments follow fixed total rules so every successful extraction is finite.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyRegion,
    FeatureExtractionError,
    ThermoviabError,
    TooFewPairs,
)

FAMILY_SIZES = {
    "temporal": 42,
    "roi_textural": 576,
    "nodule_textural": 576,
    "relative_textural": 1152,
    "first_order": 90,
}
FAMILIES = tuple(FAMILY_SIZES)

GLCM_LEVELS = 64
GLCM_DISTANCES = (1, 3, 5)
GLCM_ANGLES = (0, 45, 90, 135)
GLCM_PROPS = ("contrast", "dissimilarity", "homogeneity", "asm", "energy", "correlation")
MIN_GLCM_PAIRS = 16
TEXTURAL_TIMES = (15, 30, 45, 60, 75, 90, 105)
FIRST_ORDER_TIMES = (0, 60, 120)
SERIES_LENGTH = 121
SPECTRUM_LENGTH = 128
WINDOW_SIZES = {"win20": 20, "win40": 40}
TEMPORAL_FEATURES = (
    "auc", "slope", "skewness", "kurtosis",
    "spectral_centroid", "spectral_slope", "dominant_frequency",
)
FIRST_ORDER_STATS = ("min", "mean", "max", "std", "mode")
MODE_BIN_C = 0.1

# (row, col) unit offsets; rows grow downward, so 45 deg points up-right
_ANGLE_OFFSETS = {
    0: (0, 1), 45: (-1, 1), 90: (-1, 0), 135: (-1, -1),
    180: (0, -1), 225: (1, -1), 270: (1, 0), 315: (1, 1),
}


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class FeatureBlock:
    family: str
    names: list[str]
    values: np.ndarray

    def __post_init__(self):
        if self.family not in FAMILY_SIZES:
            raise ValueError(f"unknown family {self.family!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = FAMILY_SIZES[self.family]
        if len(self.names) != expected or self.values.shape != (expected,):
            raise DimensionMismatch(
                f"{self.family} needs {expected} features, got {len(self.names)} names / {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise FeatureExtractionError(self.family, "non-finite feature value")


@dataclass
class RegionSeries:
    region: str
    signal: str
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (SERIES_LENGTH,):
            raise DimensionMismatch(f"series must have {SERIES_LENGTH} samples")
        if not np.all(np.isfinite(self.samples)):
            raise EmptyRegion(f"{self.region} {self.signal} series has non-finite samples")

    @property
    def name(self) -> str:
        return f"{self.region}_{self.signal}"


@dataclass
class AlignedNodule:
    """One nodule in frame-0 coordinates after warp transport."""

    nodule_id: str
    point: tuple[float, float]
    polygon_mask: np.ndarray | None = None


@dataclass
class AlignedCase:
    """Everything feature extraction needs, already in frame-0 coordinates.

    temps/valid cover the video frames; the precool image rides separately
    with its own validity. valid marks pixels that fell inside the source
    frame when resampling (all true for identity alignment).
    """

    case_id: str
    timestamps: np.ndarray
    temps: np.ndarray
    valid: np.ndarray
    precool_temps: np.ndarray
    precool_valid: np.ndarray
    mask: np.ndarray
    nodules: list[AlignedNodule] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.temps = np.asarray(self.temps, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.precool_temps = np.asarray(self.precool_temps, dtype=np.float64)
        self.precool_valid = np.asarray(self.precool_valid, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.temps.ndim != 3 or self.temps.shape[0] != len(self.timestamps):
            raise DimensionMismatch("temps must be (frames, height, width) matching timestamps")
        if self.valid.shape != self.temps.shape:
            raise DimensionMismatch("valid must match temps shape")
        if self.mask.shape != self.temps.shape[1:]:
            raise DimensionMismatch("mask must match the frame grid")
        if self.precool_temps.shape != self.mask.shape:
            raise DimensionMismatch("precool image must match the frame grid")


@dataclass
class NoduleFeatures:
    case_id: str
    nodule_id: str
    blocks: dict[str, FeatureBlock]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.blocks[f].values for f in FAMILIES])

    def names(self) -> list[str]:
        out: list[str] = []
        for f in FAMILIES:
            out.extend(self.blocks[f].names)
        return out


def _frame_at(timestamps: np.ndarray, t: float) -> int:
    """Nearest video frame; ties break toward the earlier frame."""
    return int(np.argmin(np.abs(timestamps - t)))


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------

def _window_mask(shape, point, size: int) -> np.ndarray:
    x, y = point
    j0 = int(round(x - size / 2))
    i0 = int(round(y - size / 2))
    win = np.zeros(shape, dtype=bool)
    win[max(0, i0) : max(0, i0 + size), max(0, j0) : max(0, j0 + size)] = True
    return win


def nodule_region(case: AlignedCase, nodule: AlignedNodule) -> np.ndarray:
    """Annotation polygon when present, else the 20x20 window intersected
    with the cooled-region mask."""
    if nodule.polygon_mask is not None:
        region = np.asarray(nodule.polygon_mask, dtype=bool)
        if region.shape != case.mask.shape:
            raise DimensionMismatch("polygon mask must match the frame grid")
    else:
        region = _window_mask(case.mask.shape, nodule.point, 20) & case.mask
    if not region.any():
        raise EmptyRegion(f"nodule {nodule.nodule_id}: empty nodule region")
    return region


# ---------------------------------------------------------------------------
# temporal family
# ---------------------------------------------------------------------------

def extract_region_series(case: AlignedCase, point) -> list[RegionSeries]:
    """Six series sampled at t = 0..120 s by the nearest-frame rule:
    (roi, win20, win40) x (mean, std) of valid masked pixels."""
    regions = [("roi", case.mask)]
    for name, size in WINDOW_SIZES.items():
        regions.append((name, _window_mask(case.mask.shape, point, size) & case.mask))
    out = []
    indices = [_frame_at(case.timestamps, float(t)) for t in range(SERIES_LENGTH)]
    for name, region in regions:
        if not region.any():
            raise EmptyRegion(f"{name} region does not intersect the mask")
        means = np.empty(SERIES_LENGTH)
        stds = np.empty(SERIES_LENGTH)
        for t, k in enumerate(indices):
            sel = region & case.valid[k]
            if not sel.any():
                raise EmptyRegion(f"{name} region has no valid pixel at t={t}")
            px = case.temps[k][sel]
            means[t] = px.mean()
            stds[t] = px.std()
        out.append(RegionSeries(name, "mean", means))
        out.append(RegionSeries(name, "std", stds))
    return out


def _skew_kurtosis(x: np.ndarray) -> tuple[float, float]:
    d = x - x.mean()
    m2 = float((d * d).mean())
    if m2 <= 0.0:
        return 0.0, 0.0
    m3 = float((d**3).mean())
    m4 = float((d**4).mean())
    return m3 / m2**1.5, m4 / (m2 * m2) - 3.0


def _spectral(x: np.ndarray) -> tuple[float, float, float]:
    """Centroid, log-power slope, and dominant frequency of the mean-removed
    zero-padded spectrum; an all-zero spectrum maps to (0, 0, 0)."""
    spectrum = np.fft.rfft(x - x.mean(), n=SPECTRUM_LENGTH)
    power = np.abs(spectrum) ** 2
    freqs = np.fft.rfftfreq(SPECTRUM_LENGTH, d=1.0)
    p, f = power[1:], freqs[1:]
    total = float(p.sum())
    if total <= 0.0:
        return 0.0, 0.0, 0.0
    centroid = float((f * p).sum() / total)
    logp = np.log(np.maximum(p, 1e-300))
    fc = f - f.mean()
    slope = float((fc * (logp - logp.mean())).sum() / (fc * fc).sum())
    dominant = float(f[int(np.argmax(p))])
    return centroid, slope, dominant


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _series_features(samples: np.ndarray) -> list[float]:
    t = np.arange(SERIES_LENGTH, dtype=np.float64)
    auc = float(_trapezoid(samples, t))
    tc = t - t.mean()
    slope = float((tc * (samples - samples.mean())).sum() / (tc * tc).sum())
    skew, kurt = _skew_kurtosis(samples)
    centroid, sslope, dominant = _spectral(samples)
    return [auc, slope, skew, kurt, centroid, sslope, dominant]


def temporal_features(series: list[RegionSeries]) -> FeatureBlock:
    names: list[str] = []
    values: list[float] = []
    for s in series:
        feats = _series_features(s.samples)
        for fname, v in zip(TEMPORAL_FEATURES, feats):
            names.append(f"temporal.{s.name}.{fname}")
            values.append(v)
    return FeatureBlock("temporal", names, np.array(values))


# ---------------------------------------------------------------------------
# textural families
# ---------------------------------------------------------------------------

def quantize(values: np.ndarray, lo: float, hi: float, levels: int = GLCM_LEVELS) -> np.ndarray:
    """Min-max quantization to integer gray levels 0..levels-1."""
    v = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.int64)
    q = np.floor((v - lo) / (hi - lo) * levels).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def glcm(grid: np.ndarray, distance: int, angle: int, levels: int = GLCM_LEVELS):
    """Six co-occurrence properties of a quantized grid; cells < 0 are
    excluded. The matrix is symmetrized and normalized, and the valid-pair
    minimum is counted before symmetrization."""
    q = np.asarray(grid, dtype=np.int64)
    dr, dc = _ANGLE_OFFSETS[angle]
    dr, dc = dr * distance, dc * distance
    h, w = q.shape
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    if r0 >= r1 or c0 >= c1:
        raise TooFewPairs(f"d={distance} a={angle}: offset exceeds grid")
    a = q[r0:r1, c0:c1]
    b = q[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
    ok = (a >= 0) & (b >= 0)
    # pairs are tallied on the symmetrized matrix: each co-occurrence counts
    # in both directions
    n_pairs = 2 * int(ok.sum())
    if n_pairs < MIN_GLCM_PAIRS:
        raise TooFewPairs(f"d={distance} a={angle}: {n_pairs} valid pairs (< {MIN_GLCM_PAIRS})")
    counts = np.zeros((levels, levels), dtype=np.float64)
    np.add.at(counts, (a[ok], b[ok]), 1.0)
    p = counts + counts.T
    p /= p.sum()
    idx = np.arange(levels, dtype=np.float64)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    diff = ii - jj
    contrast = float((p * diff * diff).sum())
    dissimilarity = float((p * np.abs(diff)).sum())
    homogeneity = float((p / (1.0 + diff * diff)).sum())
    asm = float((p * p).sum())
    energy = math.sqrt(asm)
    marginal = p.sum(axis=1)
    mu = float((idx * marginal).sum())
    var = float(((idx - mu) ** 2 * marginal).sum())
    if var <= 0.0:
        correlation = 1.0
    else:
        correlation = float((p * (ii - mu) * (jj - mu)).sum() / var)
    return contrast, dissimilarity, homogeneity, asm, energy, correlation


def _textural_images(case: AlignedCase):
    images = [("precool", case.precool_temps, case.precool_valid)]
    for t in TEXTURAL_TIMES:
        k = _frame_at(case.timestamps, float(t))
        images.append((f"t{t}", case.temps[k], case.valid[k]))
    return images


def case_gray_scale(case: AlignedCase) -> tuple[float, float]:
    """One shared min-max range per case: the union of valid cooled-region
    pixels across the eight analyzed images."""
    chunks = []
    for _, temps, valid in _textural_images(case):
        sel = case.mask & valid
        if sel.any():
            chunks.append(temps[sel])
    if not chunks:
        raise EmptyRegion("no valid masked pixels in the analyzed images")
    allv = np.concatenate(chunks)
    return float(allv.min()), float(allv.max())


def textural_block(case: AlignedCase, region: np.ndarray, family: str) -> FeatureBlock:
    lo, hi = case_gray_scale(case)
    names: list[str] = []
    values: list[float] = []
    for label, temps, valid in _textural_images(case):
        q = np.where(region & valid, quantize(temps, lo, hi), -1)
        for d in GLCM_DISTANCES:
            for angle in GLCM_ANGLES:
                try:
                    props = glcm(q, d, angle)
                except TooFewPairs as exc:
                    raise TooFewPairs(f"image_{label}: {exc}") from exc
                for prop, v in zip(GLCM_PROPS, props):
                    names.append(f"{family}.image_{label}.d{d}.a{angle}.{prop}")
                    values.append(v)
    return FeatureBlock(family, names, np.array(values))


def relative_textural(roi_block: FeatureBlock, nodule_block: FeatureBlock) -> FeatureBlock:
    """Differences then ratios, index-aligned with the textural blocks;
    a ratio with a near-zero denominator is defined as 0."""
    names: list[str] = []
    values: list[float] = []
    strip = len("roi_textural.")
    for name, r, n in zip(roi_block.names, roi_block.values, nodule_block.values):
        names.append(f"relative_textural.diff.{name[strip:]}")
        values.append(float(r - n))
    for name, r, n in zip(roi_block.names, roi_block.values, nodule_block.values):
        names.append(f"relative_textural.ratio.{name[strip:]}")
        values.append(float(n / r) if abs(r) >= 1e-9 else 0.0)
    return FeatureBlock("relative_textural", names, np.array(values))


# ---------------------------------------------------------------------------
# first-order family
# ---------------------------------------------------------------------------

def _mode(px: np.ndarray) -> float:
    bins = np.floor(px / MODE_BIN_C).astype(np.int64)
    uniq, counts = np.unique(bins, return_counts=True)
    best = uniq[int(np.argmax(counts))]  # unique sorts, argmax takes first: lower center wins ties
    return (best + 0.5) * MODE_BIN_C


def _stats5(px: np.ndarray) -> np.ndarray:
    return np.array([
        float(px.min()), float(px.mean()), float(px.max()), float(px.std()), _mode(px),
    ])


def first_order(case: AlignedCase, region: np.ndarray) -> FeatureBlock:
    """90 features: (min, mean, max, std, mode) of 18 signals built from the
    roi and nodule pixel populations at t in {0, 60, 120} s. Composite
    signals (nodule - roi, and frame-pair differences) are statistic-wise
    differences, so e.g. the mean of nodule - roi is the difference of the
    two means."""
    base: dict[tuple[str, int], np.ndarray] = {}
    for reg_name, reg in (("roi", case.mask), ("nodule", region)):
        for t in FIRST_ORDER_TIMES:
            k = _frame_at(case.timestamps, float(t))
            sel = reg & case.valid[k]
            if not sel.any():
                raise EmptyRegion(f"{reg_name} region has no valid pixel at t={t}")
            base[(reg_name, t)] = _stats5(case.temps[k][sel])
    for t in FIRST_ORDER_TIMES:
        base[("nodule_minus_roi", t)] = base[("nodule", t)] - base[("roi", t)]
    signals: list[tuple[str, np.ndarray]] = []
    for reg_name in ("roi", "nodule", "nodule_minus_roi"):
        for t in FIRST_ORDER_TIMES:
            signals.append((f"{reg_name}_t{t}", base[(reg_name, t)]))
    pairs = ((60, 0), (120, 60), (120, 0))
    for reg_name in ("roi", "nodule", "nodule_minus_roi"):
        for late, early in pairs:
            signals.append((
                f"{reg_name}_t{late}_minus_t{early}",
                base[(reg_name, late)] - base[(reg_name, early)],
            ))
    names: list[str] = []
    values: list[float] = []
    for sig_name, stats in signals:
        for stat_name, v in zip(FIRST_ORDER_STATS, stats):
            names.append(f"first_order.{sig_name}.{stat_name}")
            values.append(float(v))
    return FeatureBlock("first_order", names, np.array(values))


# ---------------------------------------------------------------------------
# orchestration and export
# ---------------------------------------------------------------------------

def extract_all(case: AlignedCase) -> list[NoduleFeatures]:
    """All five blocks for every nodule; family failures carry the family
    tag. The roi_textural block is computed once and shared."""

    def run(family, fn):
        try:
            return fn()
        except FeatureExtractionError:
            raise
        except ThermoviabError as exc:
            raise FeatureExtractionError(family, exc) from exc

    if not case.nodules:
        raise EmptyRegion(f"case {case.case_id} has no nodules")
    roi_block = run("roi_textural", lambda: textural_block(case, case.mask, "roi_textural"))
    records = []
    for nod in case.nodules:
        region = run("nodule_textural", lambda: nodule_region(case, nod))
        series = run("temporal", lambda: extract_region_series(case, nod.point))
        blocks = {
            "temporal": run("temporal", lambda: temporal_features(series)),
            "roi_textural": roi_block,
            "nodule_textural": run(
                "nodule_textural", lambda: textural_block(case, region, "nodule_textural")
            ),
            "first_order": run("first_order", lambda: first_order(case, region)),
        }
        blocks["relative_textural"] = run(
            "relative_textural",
            lambda: relative_textural(blocks["roi_textural"], blocks["nodule_textural"]),
        )
        records.append(NoduleFeatures(case.case_id, nod.nodule_id, blocks))
    return records


def write_feature_csvs(records: list[NoduleFeatures], out_dir) -> None:
    """One CSV per family plus a combined wide CSV, keyed by
    (case_id, nodule_id); floats serialized with repr for exact round trip."""
    os.makedirs(out_dir, exist_ok=True)
    if not records:
        raise EmptyRegion("nothing to export")
    for family in FAMILIES:
        path = os.path.join(out_dir, f"{family}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "nodule_id"] + records[0].blocks[family].names)
            for rec in records:
                w.writerow([rec.case_id, rec.nodule_id] + [repr(float(v)) for v in rec.blocks[family].values])
    with open(os.path.join(out_dir, "features.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "nodule_id"] + records[0].names())
        for rec in records:
            w.writerow([rec.case_id, rec.nodule_id] + [repr(float(v)) for v in rec.vector()])


def read_feature_csv(path) -> tuple[list[tuple[str, str]], list[str], np.ndarray]:
    """Keys, feature names, and the value matrix of one exported CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    names = header[2:]
    keys = [(r[0], r[1]) for r in rows[1:]]
    values = np.array([[float(v) for v in r[2:]] for r in rows[1:]], dtype=np.float64)
    return keys, names, values
