"""Evaluation metrics, dataset splits, and the study report.

Sensitivity and specificity are carried as exact rationals and only
rounded at report time. AUC uses the Mann-Whitney statistic with midrank
tie handling, which equals the trapezoidal area under the ROC curve.
Everything here is a pure function of its inputs so reports regenerate
byte-identically.
"""

from dataclasses import dataclass
from fractions import Fraction
import json

import numpy as np

from .errors import DimensionMismatch, EmptyClass, TooFewCases
from .features import FAMILIES

POSITIVE_LABEL = "viable"
NEGATIVE_LABEL = "nonviable"

DISPLAY_NAMES = {
    "temporal": "Temporal",
    "roi_textural": "ROI Textural",
    "nodule_textural": "Nodule Textural",
    "relative_textural": "Relative Textural",
    "first_order": "First Order",
    "ensemble": "Ensemble (Voting)",
}
ROW_ORDER = FAMILIES + ("ensemble",)


def _as_positive(labels) -> np.ndarray:
    """Normalize a label sequence to a boolean array, positive = viable."""
    out = np.empty(len(labels), dtype=bool)
    for i, v in enumerate(labels):
        if isinstance(v, str):
            key = v.strip().lower()
            if key == POSITIVE_LABEL:
                out[i] = True
            elif key == NEGATIVE_LABEL:
                out[i] = False
            else:
                raise ValueError(f"unknown label {v!r}")
        else:
            out[i] = bool(v)
    return out


# ---------------------------------------------------------------------------
# confusion counts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        for name in ("tp", "fn", "tn", "fp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def sensitivity(self) -> Fraction:
        if self.tp + self.fn == 0:
            raise EmptyClass("no positive cases; sensitivity undefined")
        return Fraction(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> Fraction:
        if self.tn + self.fp == 0:
            raise EmptyClass("no negative cases; specificity undefined")
        return Fraction(self.tn, self.tn + self.fp)


def confusion(labels, predictions) -> ConfusionCounts:
    if len(labels) != len(predictions):
        raise DimensionMismatch(
            f"{len(labels)} labels vs {len(predictions)} predictions"
        )
    truth = _as_positive(labels)
    pred = _as_positive(predictions)
    return ConfusionCounts(
        tp=int((truth & pred).sum()),
        fn=int((truth & ~pred).sum()),
        tn=int((~truth & ~pred).sum()),
        fp=int((~truth & pred).sum()),
    )


def as_percent(value: Fraction) -> float:
    """Exact rational rounded to two decimal places of percent (four
    decimal places of the underlying ratio)."""
    return float(round(value * 100, 2))


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------

def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midrank ties; identical to trapezoidal ROC
    area and to pair counting (wins + half ties) / (P * N)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = _as_positive(labels)
    if len(scores) != len(pos):
        raise DimensionMismatch(f"{len(scores)} scores vs {len(pos)} labels")
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EmptyClass("AUC needs at least one case of each class")
    ranks = _midranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    train: tuple
    validation: tuple
    test: tuple
    ratio: tuple
    seed: int
    stratified: bool
    group_aware: bool = False

    def __post_init__(self):
        folds = (set(self.train), set(self.validation), set(self.test))
        total = sum(len(f) for f in folds)
        if len(set().union(*folds)) != total:
            raise ValueError("split folds overlap")

    @property
    def all_ids(self) -> set:
        return set(self.train) | set(self.validation) | set(self.test)


def _normalize_cases(cases) -> list:
    """Accept CaseRecord-like objects or (id, label[, participant]) tuples."""
    rows = []
    for item in cases:
        if isinstance(item, (tuple, list)):
            case_id, label = item[0], item[1]
            participant = item[2] if len(item) > 2 else case_id
        else:
            case_id = item.case_id
            label = item.label
            participant = getattr(item, "participant_id", case_id)
        rows.append((str(case_id), bool(_as_positive([label])[0]), str(participant)))
    return rows


def _train_count(n: int, fraction: float) -> int:
    return int(min(max(int(np.floor(n * fraction + 0.5)), 1), n - 1))


def stratified_split(cases, ratio=(80, 20), seed: int = 0, group_aware: bool = False) -> SplitPlan:
    """Stratified shuffle split into train and validation folds.

    Splits at the nodule level by default. With group_aware, every
    participant's nodules land in a single fold; stratification is then
    best-effort and the split fails if a fold would lose a class.
    """
    rows = _normalize_cases(cases)
    fraction = ratio[0] / (ratio[0] + ratio[1])
    by_class = {False: [], True: []}
    for case_id, positive, participant in rows:
        by_class[positive].append((case_id, participant))
    for positive, members in by_class.items():
        if len(members) < 2:
            name = POSITIVE_LABEL if positive else NEGATIVE_LABEL
            raise TooFewCases(f"need at least 2 {name} cases, got {len(members)}")
    rng = np.random.default_rng(seed)
    train: list = []
    validation: list = []
    if not group_aware:
        # input-order independence: sort before the seeded shuffle
        for positive in (False, True):
            ids = sorted(cid for cid, _ in by_class[positive])
            perm = rng.permutation(len(ids))
            n_train = _train_count(len(ids), fraction)
            shuffled = [ids[i] for i in perm]
            train.extend(shuffled[:n_train])
            validation.extend(shuffled[n_train:])
    else:
        val_target = {
            positive: len(by_class[positive]) - _train_count(len(by_class[positive]), fraction)
            for positive in (False, True)
        }
        groups: dict = {}
        label_of = {}
        for case_id, positive, participant in rows:
            groups.setdefault(participant, []).append(case_id)
            label_of[case_id] = positive
        keys = sorted(groups)
        perm = rng.permutation(len(keys))
        val_count = {False: 0, True: 0}
        for gi in perm:
            members = sorted(groups[keys[gi]])
            add = {False: 0, True: 0}
            for cid in members:
                add[label_of[cid]] += 1
            fits = all(val_count[c] + add[c] <= val_target[c] for c in (False, True))
            if fits:
                validation.extend(members)
                for c in (False, True):
                    val_count[c] += add[c]
            else:
                train.extend(members)
        for fold, fold_name in ((train, "train"), (validation, "validation")):
            present = {label_of[cid] for cid in fold}
            if present != {False, True}:
                raise TooFewCases(
                    f"group structure leaves the {fold_name} fold without both classes"
                )
    return SplitPlan(
        train=tuple(sorted(train)),
        validation=tuple(sorted(validation)),
        test=(),
        ratio=tuple(ratio),
        seed=seed,
        stratified=True,
        group_aware=group_aware,
    )


# ---------------------------------------------------------------------------
# study report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RowMetrics:
    sensitivity: float
    specificity: float
    auc: float


@dataclass
class StudyReport:
    rows: list
    secondary_ensemble_auc: float = None

    def to_json(self) -> str:
        doc = {"schema": 1, "rows": self.rows}
        if self.secondary_ensemble_auc is not None:
            doc["secondary_ensemble_auc"] = self.secondary_ensemble_auc
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        lines = [
            "| Classifier | Sensitivity | Specificity | AUC |",
            "| --- | --- | --- | --- |",
        ]
        for row in self.rows:
            if row["absent"]:
                cells = ["-", "-", "-"]
            else:
                cells = [
                    f"{row['sensitivity'] * 100:.2f}",
                    f"{row['specificity'] * 100:.2f}",
                    f"{row['auc']:.4f}",
                ]
            lines.append(f"| {row['name']} | {cells[0]} | {cells[1]} | {cells[2]} |")
        if self.secondary_ensemble_auc is not None:
            lines.append("")
            lines.append(
                f"Ensemble AUC over mean member probability: {self.secondary_ensemble_auc:.4f}."
            )
        return "\n".join(lines) + "\n"


def report(results, secondary_ensemble_auc=None) -> StudyReport:
    """Build the study table: one row per feature family plus the voting
    ensemble. Pass None (or omit the key) for a family that was not
    evaluated; its row is marked absent."""
    unknown = set(results) - set(ROW_ORDER)
    if unknown:
        raise ValueError(f"unknown report rows: {sorted(unknown)}")
    rows = []
    for key in ROW_ORDER:
        metrics = results.get(key)
        if metrics is None:
            rows.append(
                {
                    "key": key,
                    "name": DISPLAY_NAMES[key],
                    "sensitivity": None,
                    "specificity": None,
                    "auc": None,
                    "absent": True,
                }
            )
        else:
            rows.append(
                {
                    "key": key,
                    "name": DISPLAY_NAMES[key],
                    "sensitivity": float(metrics.sensitivity),
                    "specificity": float(metrics.specificity),
                    "auc": float(metrics.auc),
                    "absent": False,
                }
            )
    value = None if secondary_ensemble_auc is None else float(secondary_ensemble_auc)
    return StudyReport(rows=rows, secondary_ensemble_auc=value)
