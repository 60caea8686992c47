"""File-based stage orchestration over case directories.

Each stage reads the previous stage's artifacts from the case directory
and writes its own; that handoff lets a technician interpose between any
two stages. Reruns with unchanged inputs are byte-identical no-ops, and
a stage whose output actually changes deletes everything downstream of
it so stale artifacts can never leak into a result.

Artifacts: warps.jsonl (align), roi.pgm + segment_meta.json (segment),
case_features.csv + features/ (features), outcome.json (predict).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import json
import os
import shutil

import numpy as np

from .errors import (
    EmptyDataset,
    InvalidAnnotation,
    InvalidSpec,
    IoFailure,
    MissingAnnotation,
    NoColdRegion,
    StageOrderError,
)
from .features import (
    FAMILIES,
    AlignedCase,
    AlignedNodule,
    extract_all,
    read_feature_csv,
    write_feature_csvs,
)
from .io import (
    CaseRecord,
    NoduleAnnotation,
    RoiMask,
    ThermalSequence,
    rasterize_polygon,
    read_case,
    read_manifest,
    read_mask_pgm,
    write_mask_pgm,
)
from .learning import (
    EnsembleModel,
    ForestConfig,
    fit_family,
    load_bundle,
    predict,
    save_bundle,
)
from .metrics import RowMetrics, StudyReport, auc, confusion, report, stratified_split
from .registration import (
    StabilizationResult,
    read_warps,
    resample,
    stabilize_sequence,
    transport_point,
    transport_polygon,
    write_warps,
)
from .segmentation import (
    infer_mask,
    load_checkpoint,
    otsu_threshold,
    segment_cold_region,
)

STAGES = ("align", "segment", "features", "predict")

STAGE_ARTIFACTS = {
    "align": ("warps.jsonl",),
    "segment": ("roi.pgm", "segment_meta.json"),
    "features": ("case_features.csv", "features"),
    "predict": ("outcome.json",),
}

STATUS_BY_STAGE = {
    None: "raw",
    "align": "aligned",
    "segment": "segmented",
    "features": "featured",
    "predict": "predicted",
}

_MISSING_MESSAGE = {
    "align": "alignment missing: run align first",
    "segment": "segmentation missing: run segment first",
    "features": "features missing: run features first",
}

SEGMENTERS = ("otsu", "net", "manual")
WARP_KINDS = ("translation", "euclidean", "affine")


@dataclass
class RunConfig:
    """Knobs shared by the CLI and the gateway."""

    data_dir: str = "."
    seed: int = 0
    warp_kind: str = "euclidean"
    segmenter: str = "otsu"
    segmenter_model: str = None
    vote_threshold: int = 2
    spec_target: float = 0.95
    sens_target: float = 0.60
    jobs: int = 1

    def __post_init__(self):
        if self.warp_kind not in WARP_KINDS:
            raise InvalidSpec(f"warp kind must be one of {WARP_KINDS}, got {self.warp_kind!r}")
        if self.segmenter not in SEGMENTERS:
            raise InvalidSpec(f"segmenter must be one of {SEGMENTERS}, got {self.segmenter!r}")
        if not (1 <= int(self.vote_threshold) <= 5):
            raise InvalidSpec(f"vote threshold must be in 1..5, got {self.vote_threshold}")
        for name in ("spec_target", "sens_target"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise InvalidSpec(f"{name} must be in (0, 1), got {v}")
        if self.jobs < 1:
            raise InvalidSpec(f"jobs must be >= 1, got {self.jobs}")


# ---------------------------------------------------------------------------
# stage bookkeeping
# ---------------------------------------------------------------------------

def _artifact_paths(case_dir: str, stage: str) -> list:
    return [os.path.join(case_dir, name) for name in STAGE_ARTIFACTS[stage]]


def stage_done(case_dir: str, stage: str) -> bool:
    return all(os.path.exists(p) for p in _artifact_paths(case_dir, stage))


def stage_status(case_dir: str) -> str:
    """Highest contiguously completed stage."""
    last = None
    for stage in STAGES:
        if not stage_done(case_dir, stage):
            break
        last = stage
    return STATUS_BY_STAGE[last]


def require_stages(case_dir: str, upto: str) -> None:
    """Raise StageOrderError naming the earliest missing prerequisite."""
    for stage in STAGES[: STAGES.index(upto)]:
        if not stage_done(case_dir, stage):
            raise StageOrderError(_MISSING_MESSAGE[stage])


def invalidate_after(case_dir: str, stage: str) -> None:
    """Remove every artifact downstream of the given stage."""
    for later in STAGES[STAGES.index(stage) + 1 :]:
        for path in _artifact_paths(case_dir, later):
            if os.path.isdir(path):
                shutil.rmtree(path)
            elif os.path.exists(path):
                os.remove(path)


def case_status(case_dir: str) -> dict:
    """Listing row: identity, truth label if known, progress, review flag."""
    manifest = read_manifest(case_dir)
    status = stage_status(case_dir)
    review = False
    warp_path = os.path.join(case_dir, "warps.jsonl")
    if os.path.exists(warp_path):
        review = read_warps(warp_path).review_required
    return {
        "case_id": manifest["case_id"],
        "participant_id": manifest.get("participant_id"),
        "label": manifest.get("label", "unknown"),
        "status": status,
        "review_required": review,
    }


def _write_bytes(path: str, data: bytes) -> bool:
    """Atomic write; returns whether the contents changed."""
    if os.path.exists(path):
        with open(path, "rb") as fh:
            if fh.read() == data:
                return False
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return True


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_align(case_dir: str, warp_kind: str = "euclidean", config=None) -> StabilizationResult:
    if warp_kind not in WARP_KINDS:
        raise InvalidSpec(f"warp kind must be one of {WARP_KINDS}, got {warp_kind!r}")
    _, sequence = read_case(case_dir)
    stab = stabilize_sequence(sequence, kind=warp_kind, config=config)
    tmp = os.path.join(case_dir, "warps.jsonl.new")
    write_warps(stab, tmp)
    with open(tmp, "rb") as fh:
        data = fh.read()
    os.remove(tmp)
    if _write_bytes(os.path.join(case_dir, "warps.jsonl"), data):
        invalidate_after(case_dir, "align")
    return stab


def _manual_mask(record: CaseRecord, sequence: ThermalSequence, stab: StabilizationResult) -> RoiMask:
    polygons = [a.roi_polygon for a in record.annotations if a.roi_polygon is not None]
    if not polygons:
        raise MissingAnnotation("manual segmentation needs at least one polygon annotation")
    union = np.zeros((sequence.height, sequence.width), dtype=bool)
    for poly in polygons:
        moved = transport_polygon(stab, poly)
        union |= rasterize_polygon(moved, sequence.width, sequence.height).pixels
    if not union.any():
        raise NoColdRegion("manual polygons rasterize to zero pixels")
    return RoiMask(union)


def run_segment(case_dir: str, segmenter: str = "otsu", model_path: str = None) -> RoiMask:
    require_stages(case_dir, "segment")
    record, sequence = read_case(case_dir)
    frame0 = sequence.frames[0]
    if segmenter == "otsu":
        mask = segment_cold_region(frame0)
        meta = {"method": "otsu", "threshold": float(otsu_threshold(np.asarray(frame0.temps, dtype=np.float64)))}
    elif segmenter == "net":
        if not model_path:
            raise InvalidSpec("the net segmenter needs --model pointing at a checkpoint")
        net = load_checkpoint(model_path)
        mask = infer_mask(net, frame0)
        meta = {"method": "net", "model": os.path.basename(model_path)}
    elif segmenter == "manual":
        stab = read_warps(os.path.join(case_dir, "warps.jsonl"))
        mask = _manual_mask(record, sequence, stab)
        meta = {
            "method": "manual",
            "nodules": sorted(a.nodule_id for a in record.annotations if a.roi_polygon is not None),
        }
    else:
        raise InvalidSpec(f"segmenter must be one of {SEGMENTERS}, got {segmenter!r}")
    tmp = os.path.join(case_dir, "roi.pgm.new")
    write_mask_pgm(mask, tmp)
    with open(tmp, "rb") as fh:
        data = fh.read()
    os.remove(tmp)
    changed = _write_bytes(os.path.join(case_dir, "roi.pgm"), data)
    changed |= _write_bytes(os.path.join(case_dir, "segment_meta.json"), _json_bytes(meta))
    if changed:
        invalidate_after(case_dir, "segment")
    return mask


def build_aligned_case(record: CaseRecord, sequence: ThermalSequence,
                       stab: StabilizationResult, mask: RoiMask) -> AlignedCase:
    """Resample every frame onto the frame-0 grid and carry the
    annotations across their warps."""
    temps = []
    valid = []
    for frame, res in zip(sequence.frames, stab.frames):
        img, ok = resample(frame, res.warp)
        temps.append(img)
        valid.append(ok)
    pre, pre_ok = resample(sequence.precool, stab.precool.warp)
    nodules = []
    for a in record.annotations:
        poly_mask = None
        if a.roi_polygon is not None:
            moved = transport_polygon(stab, a.roi_polygon)
            poly_mask = rasterize_polygon(moved, sequence.width, sequence.height).pixels
        nodules.append(
            AlignedNodule(
                nodule_id=a.nodule_id,
                point=transport_point(stab, a.point),
                polygon_mask=poly_mask,
            )
        )
    return AlignedCase(
        case_id=record.case_id,
        timestamps=sequence.timestamps,
        temps=np.stack(temps),
        valid=np.stack(valid),
        precool_temps=pre,
        precool_valid=pre_ok,
        mask=mask.pixels,
        nodules=nodules,
    )


def run_features(case_dir: str):
    require_stages(case_dir, "features")
    record, sequence = read_case(case_dir)
    stab = read_warps(os.path.join(case_dir, "warps.jsonl"))
    mask = read_mask_pgm(os.path.join(case_dir, "roi.pgm"))
    aligned = build_aligned_case(record, sequence, stab, mask)
    records = extract_all(aligned)
    out_dir = os.path.join(case_dir, "features")
    write_feature_csvs(records, out_dir)
    combined = os.path.join(out_dir, "features.csv")
    with open(combined, "rb") as fh:
        data = fh.read()
    os.remove(combined)
    if _write_bytes(os.path.join(case_dir, "case_features.csv"), data):
        invalidate_after(case_dir, "features")
    return records


def split_columns_by_family(names: list) -> dict:
    """Column indices per family; every exported name is family-prefixed."""
    index = {}
    claimed = 0
    for family in FAMILIES:
        cols = [i for i, n in enumerate(names) if n.startswith(family + ".")]
        index[family] = cols
        claimed += len(cols)
    if claimed != len(names):
        unknown = [n for n in names if not any(n.startswith(f + ".") for f in FAMILIES)]
        raise InvalidSpec(f"feature columns outside the known families: {unknown[:3]}")
    return index


def run_predict(case_dir: str, bundle_dir: str) -> list:
    require_stages(case_dir, "predict")
    ensemble = load_bundle(bundle_dir)
    keys, names, values = read_feature_csv(os.path.join(case_dir, "case_features.csv"))
    columns = split_columns_by_family(names)
    rows = []
    for (case_id, nodule_id), vec in zip(keys, values):
        features = {f: vec[columns[f]] for f in FAMILIES}
        outcome = predict(ensemble, features)
        rows.append(
            {
                "nodule_id": nodule_id,
                "p": [outcome.probabilities[f] for f in FAMILIES],
                "votes": [outcome.votes[f] for f in FAMILIES],
                "F": outcome.score,
                "label": outcome.label,
            }
        )
    doc = {
        "schema": 1,
        "case_id": keys[0][0] if keys else None,
        "families": list(FAMILIES),
        "vote_threshold": ensemble.vote_threshold,
        "nodules": rows,
    }
    _write_bytes(os.path.join(case_dir, "outcome.json"), _json_bytes(doc))
    return rows


def read_outcome(case_dir: str) -> dict:
    path = os.path.join(case_dir, "outcome.json")
    if not os.path.exists(path):
        raise StageOrderError("prediction missing: run predict first")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def replace_annotations(case_dir: str, annotations: list) -> None:
    """Swap the case's annotations and drop every stage artifact that
    depended on them (features and prediction always; the mask too when it
    was manually drawn from polygons)."""
    normalized = []
    for a in annotations:
        if isinstance(a, NoduleAnnotation):
            normalized.append(a)
        else:
            poly = a.get("polygon")
            normalized.append(
                NoduleAnnotation(
                    nodule_id=str(a["nodule_id"]),
                    point=(float(a["point"][0]), float(a["point"][1])),
                    roi_polygon=[(float(x), float(y)) for x, y in poly] if poly is not None else None,
                )
            )
    if not normalized:
        raise InvalidAnnotation("a case needs at least one annotation")
    manifest = read_manifest(case_dir)
    manifest["annotations"] = [
        {
            "nodule_id": a.nodule_id,
            "point": [a.point[0], a.point[1]],
            "polygon": [[x, y] for x, y in a.roi_polygon] if a.roi_polygon is not None else None,
        }
        for a in normalized
    ]
    _write_bytes(os.path.join(case_dir, "case.json"), _json_bytes(manifest))
    meta_path = os.path.join(case_dir, "segment_meta.json")
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            if json.load(fh).get("method") == "manual":
                invalidate_after(case_dir, "align")
                return
    invalidate_after(case_dir, "segment")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def discover_cases(data_dir: str) -> list:
    if not os.path.isdir(data_dir):
        raise EmptyDataset(f"{data_dir} is not a directory")
    dirs = sorted(
        os.path.join(data_dir, name)
        for name in os.listdir(data_dir)
        if os.path.isfile(os.path.join(data_dir, name, "case.json"))
    )
    if not dirs:
        raise EmptyDataset(f"no case directories under {data_dir}")
    return dirs


def ensure_stages(case_dir: str, upto: str = "features", cfg: RunConfig = None) -> None:
    """Run any missing stage up to and including `upto`."""
    cfg = cfg or RunConfig()
    runners = {
        "align": lambda: run_align(case_dir, cfg.warp_kind),
        "segment": lambda: run_segment(case_dir, cfg.segmenter, cfg.segmenter_model),
        "features": lambda: run_features(case_dir),
    }
    for stage in STAGES[: STAGES.index(upto) + 1]:
        if stage == "predict":
            break
        if not stage_done(case_dir, stage):
            runners[stage]()


def run_batch(case_dirs: list, fn, jobs: int = 1) -> list:
    """Apply fn to each case directory, optionally in parallel. Returns
    (case_dir, result, error) triples in input order."""

    def guarded(d):
        try:
            return (d, fn(d), None)
        except Exception as exc:
            return (d, None, exc)

    if jobs <= 1:
        return [guarded(d) for d in case_dirs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(guarded, case_dirs))


@dataclass
class DatasetFeatures:
    keys: list  # (case_dir, case_id, nodule_id) per row
    labels: np.ndarray  # bool per row
    case_ids: list  # one per row
    matrices: dict  # family -> (rows, family_size)
    cases: list  # (case_id, label_str, participant_id) per case


def collect_features(case_dirs: list, require_labels: bool = True) -> DatasetFeatures:
    keys = []
    labels = []
    case_ids = []
    per_family = {f: [] for f in FAMILIES}
    cases = []
    columns = None
    for case_dir in case_dirs:
        manifest = read_manifest(case_dir)
        label = manifest.get("label", "unknown")
        if label not in ("viable", "nonviable"):
            if require_labels:
                raise InvalidAnnotation(
                    f"case {manifest['case_id']} has no truth label; cannot use it for training"
                )
            continue
        cases.append((manifest["case_id"], label, manifest.get("participant_id", manifest["case_id"])))
        row_keys, names, values = read_feature_csv(os.path.join(case_dir, "case_features.csv"))
        if columns is None:
            columns = split_columns_by_family(names)
        for (case_id, nodule_id), vec in zip(row_keys, values):
            keys.append((case_dir, case_id, nodule_id))
            labels.append(label == "viable")
            case_ids.append(case_id)
            for family in FAMILIES:
                per_family[family].append(vec[columns[family]])
    if not keys:
        raise EmptyDataset("no labelled cases with features")
    return DatasetFeatures(
        keys=keys,
        labels=np.array(labels, dtype=bool),
        case_ids=case_ids,
        matrices={f: np.array(rows) for f, rows in per_family.items()},
        cases=cases,
    )


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------

def _evaluation_rows(ensemble: EnsembleModel, matrices: dict, labels: np.ndarray):
    """Per-family and ensemble metric rows over one labelled matrix set."""
    y = labels
    truth = ["viable" if v else "nonviable" for v in y]
    results = {}
    prob_stack = []
    for family in FAMILIES:
        member = ensemble.members[family]
        probs = member.predict_proba(matrices[family])
        prob_stack.append(probs)
        preds = ["viable" if p >= member.forest.tau else "nonviable" for p in probs]
        c = confusion(truth, preds)
        results[family] = RowMetrics(
            sensitivity=float(c.sensitivity),
            specificity=float(c.specificity),
            auc=auc(probs, y),
        )
    prob_stack = np.array(prob_stack)  # (5, n)
    votes = np.array(
        [prob_stack[i] >= ensemble.members[f].forest.tau for i, f in enumerate(FAMILIES)]
    )
    scores = votes.sum(axis=0)
    preds = ["viable" if s >= ensemble.vote_threshold else "nonviable" for s in scores]
    c = confusion(truth, preds)
    results["ensemble"] = RowMetrics(
        sensitivity=float(c.sensitivity),
        specificity=float(c.specificity),
        auc=auc(scores.astype(float), y),
    )
    secondary = auc(prob_stack.mean(axis=0), y)
    return results, secondary


def write_report(doc: StudyReport, base_path: str) -> tuple:
    """Write the JSON and Markdown renderings next to each other."""
    root, ext = os.path.splitext(base_path)
    json_path = base_path if ext == ".json" else base_path + ".json"
    md_path = root + ".md" if ext == ".json" else base_path + ".md"
    _write_bytes(json_path, doc.to_json().encode())
    _write_bytes(md_path, doc.to_markdown().encode())
    return json_path, md_path


@dataclass
class TrainResult:
    bundle_dir: str
    split: object
    ensemble: EnsembleModel
    report: StudyReport
    report_paths: tuple


def train_on_dataset(data_dir: str, out_bundle: str, ratio=(80, 20), seed: int = 0,
                     cfg: RunConfig = None, group_aware: bool = False) -> TrainResult:
    """Materialize features for every labelled case, split 80:20, fit the
    five family voters, calibrate on the validation fold, and persist the
    bundle plus a validation report."""
    cfg = cfg or RunConfig()
    dirs = discover_cases(data_dir)
    failures = [
        (d, err)
        for d, _, err in run_batch(dirs, lambda d: ensure_stages(d, "features", cfg), cfg.jobs)
        if err is not None
    ]
    if failures:
        raise failures[0][1]
    data = collect_features(dirs)
    plan = stratified_split(data.cases, ratio=ratio, seed=seed, group_aware=group_aware)
    train_ids = set(plan.train)
    val_ids = set(plan.validation)
    row_fold = np.array(
        [("train" if cid in train_ids else "val" if cid in val_ids else "none") for cid in data.case_ids]
    )
    y_tr = data.labels[row_fold == "train"]
    y_val = data.labels[row_fold == "val"]
    members = {}
    for i, family in enumerate(FAMILIES):
        X = data.matrices[family]
        members[family] = fit_family(
            X[row_fold == "train"],
            y_tr,
            X[row_fold == "val"],
            y_val,
            family,
            cfg=ForestConfig(seed=seed + i),
            spec_target=cfg.spec_target,
            sens_target=cfg.sens_target,
        )
    ensemble = EnsembleModel(members, vote_threshold=cfg.vote_threshold)
    save_bundle(ensemble, out_bundle)
    val_matrices = {f: data.matrices[f][row_fold == "val"] for f in FAMILIES}
    rows, secondary = _evaluation_rows(ensemble, val_matrices, y_val)
    doc = report(rows, secondary_ensemble_auc=secondary)
    paths = write_report(doc, os.path.join(out_bundle, "validation_report.json"))
    return TrainResult(out_bundle, plan, ensemble, doc, paths)


def evaluate_dataset(data_dir: str, bundle_dir: str, report_path: str,
                     cfg: RunConfig = None) -> StudyReport:
    """Score every labelled case in the dataset with a trained bundle and
    write the study table."""
    cfg = cfg or RunConfig()
    dirs = discover_cases(data_dir)
    failures = [
        (d, err)
        for d, _, err in run_batch(dirs, lambda d: ensure_stages(d, "features", cfg), cfg.jobs)
        if err is not None
    ]
    if failures:
        raise failures[0][1]
    ensemble = load_bundle(bundle_dir)
    data = collect_features(dirs)
    rows, secondary = _evaluation_rows(ensemble, data.matrices, data.labels)
    doc = report(rows, secondary_ensemble_auc=secondary)
    write_report(doc, report_path)
    return doc
