"""Dice overlap computation and aggregate reporting.

Per region k, Dice = 2 |pred_k AND truth_k| / (|pred_k| + |truth_k|). A
region absent from both maps scores 1.0; absent from exactly one scores
0.0. Subject scores average the foreground regions; the aggregate over
subjects reports mean, population std, min, and max.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .grids import LabelMap


def _labels_array(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def dice(pred, truth, region: int) -> float:
    """Dice overlap of one region between two label maps."""
    pred = _labels_array(pred)
    truth = _labels_array(truth)
    if pred.shape != truth.shape:
        raise ContractViolation(f"shape mismatch: {pred.shape} vs {truth.shape}")
    pmask = pred == region
    tmask = truth == region
    denom = int(pmask.sum()) + int(tmask.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pmask, tmask).sum()) / denom


def _merged_mask(labels, ids):
    return np.isin(labels, ids)


def _dice_masks(pmask, tmask) -> float:
    denom = int(pmask.sum()) + int(tmask.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pmask, tmask).sum()) / denom


@dataclass
class DiceReport:
    per_region: dict          # region key -> mean Dice across subjects
    per_subject: list         # per-subject mean over foreground regions
    mean: float
    std: float
    min: float
    max: float
    region_table: list = field(default_factory=list)  # rows of (subject, region, dice)

    def format_row(self, scale: float = 100.0) -> str:
        return format_table_row(self.mean * scale, self.std * scale,
                                self.min * scale, self.max * scale)

    def to_json(self) -> str:
        payload = {
            "per_region": {str(k): v for k, v in self.per_region.items()},
            "per_subject": self.per_subject,
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiceReport":
        d = json.loads(text)
        return cls(per_region=d["per_region"], per_subject=d["per_subject"],
                   mean=d["mean"], std=d["std"], min=d["min"], max=d["max"])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["region", "mean_dice"])
            for key, value in self.per_region.items():
                writer.writerow([key, f"{value:.6f}"])

    def summary_text(self) -> str:
        lines = [f"subjects: {len(self.per_subject)}",
                 f"mean(std): {self.format_row()}"]
        for key, value in self.per_region.items():
            lines.append(f"  region {key}: {100 * value:.1f}")
        return "\n".join(lines)


def format_table_row(mean, std, minimum, maximum) -> str:
    """Render one results-table row, e.g. '85.1(1.9) & 80.2 & 87.8'."""
    return f"{mean:.1f}({std:.1f}) & {minimum:.1f} & {maximum:.1f}"


def evaluate(predictions, truths, regions, merge: dict = None) -> DiceReport:
    """Score prediction/truth label-map pairs over the given foreground regions.

    `merge` optionally maps a merged-region name to a list of region ids
    whose union is scored as one structure (e.g. symmetric left/right
    pairs); merged entries replace their members in the per-region report.
    """
    if not predictions or len(predictions) != len(truths):
        raise ConfigError("need equal-length, non-empty prediction/truth lists")
    regions = list(regions)
    if not regions:
        raise ConfigError("need at least one foreground region")

    merged_ids = set()
    merge = merge or {}
    for ids in merge.values():
        merged_ids.update(ids)
    plain = [r for r in regions if r not in merged_ids]
    keys = [str(r) for r in plain] + list(merge.keys())

    per_subject = []
    rows = []
    region_scores = {key: [] for key in keys}
    for subject, (pred, truth) in enumerate(zip(predictions, truths)):
        pred = _labels_array(pred)
        truth = _labels_array(truth)
        if pred.shape != truth.shape:
            raise ContractViolation(f"subject {subject}: shape mismatch")
        scores = []
        for r in plain:
            score = _dice_masks(pred == r, truth == r)
            region_scores[str(r)].append(score)
            rows.append((subject, str(r), score))
            scores.append(score)
        for name, ids in merge.items():
            score = _dice_masks(_merged_mask(pred, ids), _merged_mask(truth, ids))
            region_scores[name].append(score)
            rows.append((subject, name, score))
            scores.append(score)
        per_subject.append(float(np.mean(scores)))

    arr = np.asarray(per_subject)
    return DiceReport(
        per_region={key: float(np.mean(vals)) for key, vals in region_scores.items()},
        per_subject=per_subject,
        mean=float(arr.mean()),
        std=float(arr.std()),  # population std
        min=float(arr.min()),
        max=float(arr.max()),
        region_table=rows,
    )
