"""Evaluation metrics on binary masks, the paired t-test, and the metrics CSV."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import kernels
from .errors import ContractError, DimensionError


def _pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def metric_dice(a, b):
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def metric_jaccard(a, b):
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def boundary(mask):
    """Mask pixels with at least one 4-neighbour outside the mask (image edge counts as outside)."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _directed(a, b):
    """Boundary-to-boundary nearest distances from a to b, in raster order of a."""
    return kernels.nearest_distances(np.argwhere(boundary(a)), np.argwhere(boundary(b)))


def _empty_case(a, b):
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return float(np.hypot(*a.shape))
    return None


def metric_hd(a, b):
    """Symmetric Hausdorff distance between mask boundaries, in pixels.

    One empty mask gives the image diagonal; two empty masks give 0.
    """
    a, b = _pair(a, b)
    sentinel = _empty_case(a, b)
    if sentinel is not None:
        return sentinel
    return float(max(_directed(a, b).max(), _directed(b, a).max()))


def metric_asd(a, b):
    """Mean of the two directed average boundary distances, in pixels."""
    a, b = _pair(a, b)
    sentinel = _empty_case(a, b)
    if sentinel is not None:
        return sentinel
    # correctly rounded sums keep the value independent of point order
    dab, dba = _directed(a, b), _directed(b, a)
    return (math.fsum(dab) / len(dab) + math.fsum(dba) / len(dba)) / 2.0


def paired_t_test(x, y):
    """Two-sided paired t-test; returns ``(t, p)``.

    Zero-variance differences give ``(0, 1)`` when the mean difference is 0
    and ``(+-inf, 0)`` otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise ContractError("paired t-test needs at least two pairs")
    d = x - y
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return float(np.copysign(np.inf, mean)), 0.0
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * special.stdtr(n - 1, -abs(t))
    return float(t), float(min(1.0, p))


@dataclass
class MetricRow:
    case_id: str
    cls: str
    dice: float
    jaccard: float
    hd_px: float
    asd_px: float


CSV_HEADER = ["case_id", "class", "dice", "jaccard", "hd_px", "asd_px"]


def evaluate_case(case_id, pred, gt, classes):
    """One MetricRow per ``(code, name)`` in ``classes``."""
    rows = []
    for code, name in classes:
        a, b = pred == code, gt == code
        rows.append(MetricRow(case_id, name, metric_dice(a, b), metric_jaccard(a, b),
                              metric_hd(a, b), metric_asd(a, b)))
    return rows


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.case_id, r.cls, repr(r.dice), repr(r.jaccard), repr(r.hd_px), repr(r.asd_px)])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricRow(r["case_id"], r["class"], float(r["dice"]), float(r["jaccard"]),
                          float(r["hd_px"]), float(r["asd_px"])) for r in reader]
