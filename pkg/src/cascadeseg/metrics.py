"""Per-region Dice, 95% Hausdorff distance, sensitivity and specificity."""

import io
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from . import _kernels
from .data import REGIONS, encode_labels

# distance reported when exactly one of the two masks is empty
HD95_EMPTY = 373.1287

METRICS = ("dice", "hd95", "sensitivity", "specificity")


def _binary(mask, name):
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} must be binary")
        m = m.astype(bool)
    return m


def _pair(pred, true):
    p, t = _binary(pred, "pred_mask"), _binary(true, "true_mask")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return p, t


def dice_score(pred, true):
    """2|A∩B| / (|A|+|B|); 1.0 when both are empty."""
    p, t = _pair(pred, true)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def surface(mask):
    """Voxels of ``mask`` with at least one 6-neighbor outside it (the volume border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    core = tuple(slice(1, -1) for _ in range(m.ndim))
    for axis in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[core]
    return m & ~interior


def _directed(src, dst):
    d = np.sqrt(_kernels.min_sq_dist(src, dst))
    d.sort()
    rank = (95 * len(d) + 99) // 100   # nearest rank, ceil(0.95 n)
    return float(d[rank - 1])


def hausdorff95(pred, true, spacing=(1.0, 1.0, 1.0)):
    """Symmetric 95th-percentile surface distance in mm.

    Max of the two directed nearest-rank percentiles over surface-voxel
    centers. 0 if both masks are empty, ``HD95_EMPTY`` if exactly one is.
    """
    p, t = _pair(pred, true)
    pe, te = not p.any(), not t.any()
    if pe and te:
        return 0.0
    if pe or te:
        return HD95_EMPTY
    sp = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(surface(p)) * sp
    b = np.argwhere(surface(t)) * sp
    return max(_directed(a, b), _directed(b, a))


def confusion(pred, true):
    p, t = _pair(pred, true)
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    return tp, fp, fn, p.size - tp - fp - fn


def sensitivity_specificity(pred, true):
    """TP/(TP+FN) and TN/(TN+FP); an empty denominator yields 1.0 (nothing to detect or reject)."""
    tp, fp, fn, tn = confusion(pred, true)
    sens = tp / (tp + fn) if tp + fn else 1.0
    spec = tn / (tn + fp) if tn + fp else 1.0
    return sens, spec


@dataclass
class RegionReport:
    case_id: str = ""
    metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)   # region -> metric -> value
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)      # region -> tp/fp/fn/tn

    def __getitem__(self, region):
        return self.metrics[region]


def evaluate_case(pred, truth, spacing=(1.0, 1.0, 1.0), case_id="") -> RegionReport:
    pm, tm = encode_labels(pred), encode_labels(truth)
    if pm.wt.shape != tm.wt.shape:
        raise ValueError(f"prediction dims {pm.wt.shape} differ from truth dims {tm.wt.shape}")
    report = RegionReport(case_id)
    for region, p, t in zip(REGIONS, pm, tm):
        sens, spec = sensitivity_specificity(p, t)
        report.metrics[region] = {
            "dice": dice_score(p, t),
            "hd95": hausdorff95(p, t, spacing),
            "sensitivity": sens,
            "specificity": spec,
        }
        tp, fp, fn, tn = confusion(p, t)
        report.counts[region] = {"tp": tp, "fp": fp, "fn": fn, "tn": tn}
    return report


def aggregate(reports: Sequence[RegionReport]):
    """Per-region mean and population SD of every metric: ``{region: {metric: (mean, sd)}}``."""
    if not reports:
        raise ValueError("aggregate: no reports")
    out = {}
    for region in REGIONS:
        out[region] = {}
        for m in METRICS:
            vals = np.array([r.metrics[region][m] for r in reports], dtype=np.float64)
            out[region][m] = (float(vals.mean()), float(vals.std()))
    return out


# Table layout: Dice ET/WT/TC then Hausdorff ET/WT/TC
_TABLE_COLS = [("dice", "ET"), ("dice", "WT"), ("dice", "TC"), ("hd95", "ET"), ("hd95", "WT"), ("hd95", "TC")]
_TABLE_HEAD = ["Dice ET", "Dice WT", "Dice TC", "Hausdorff ET", "Hausdorff WT", "Hausdorff TC"]


def table_rows(reports: Sequence[RegionReport]):
    rows = [[r.case_id] + [r.metrics[reg][m] for m, reg in _TABLE_COLS] for r in reports]
    agg = aggregate(reports)
    rows.append(["mean"] + [agg[reg][m][0] for m, reg in _TABLE_COLS])
    rows.append(["sd"] + [agg[reg][m][1] for m, reg in _TABLE_COLS])
    return rows


def to_csv(reports: Sequence[RegionReport]):
    buf = io.StringIO()
    buf.write(",".join(["case"] + [h.replace(" ", "_") for h in _TABLE_HEAD]) + "\n")
    for row in table_rows(reports):
        buf.write(",".join([row[0]] + [f"{v:.6f}" for v in row[1:]]) + "\n")
    return buf.getvalue()


def to_pretty(reports: Sequence[RegionReport]):
    rows = table_rows(reports)
    width = max(8, max(len(r[0]) for r in rows))
    lines = [f"{'case':<{width}} " + " ".join(f"{h:>13}" for h in _TABLE_HEAD)]
    lines.append("-" * len(lines[0]))
    for row in rows:
        lines.append(f"{row[0]:<{width}} " + " ".join(f"{v:>13.4f}" for v in row[1:]))
    return "\n".join(lines) + "\n"
