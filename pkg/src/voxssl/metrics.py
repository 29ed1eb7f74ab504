"""Classification and segmentation metrics.

AUROC uses the rank (Mann-Whitney) formulation with ties counted half;
threshold metrics support a fixed operating point or Youden's J scanned
over midpoints between sorted unique scores. Segmentation quality is
overlap (Dice) plus the 95th percentile of pooled symmetric
boundary-to-boundary distances in millimetres (HD95, 6-connectivity
boundaries). All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata


def _check_binary(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    return n_pos, n_neg


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class ThresholdMetrics:
    sensitivity: float
    specificity: float
    threshold: float

    @property
    def youden_j(self) -> float:
        return self.sensitivity + self.specificity - 1.0


def _sens_spec(scores: np.ndarray, labels: np.ndarray, thr: float) -> tuple[float, float]:
    pred = scores >= thr
    tp = int((pred & (labels == 1)).sum())
    fn = int((~pred & (labels == 1)).sum())
    tn = int((~pred & (labels == 0)).sum())
    fp = int((pred & (labels == 0)).sum())
    return tp / (tp + fn), tn / (tn + fp)


def threshold_metrics(scores, labels, threshold: float = 0.5,
                      youden: bool = False) -> ThresholdMetrics:
    """Sensitivity/specificity at a fixed threshold or the Youden-optimal one.

    Youden mode scans midpoints between sorted unique scores and keeps the
    lowest threshold among ties (prediction is positive at score >= thr).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    _check_binary(labels)
    if youden:
        uniq = np.unique(scores)
        if len(uniq) == 1:
            threshold = float(uniq[0])
        else:
            mids = (uniq[:-1] + uniq[1:]) / 2.0
            js = np.array([sum(_sens_spec(scores, labels, m)) - 1.0 for m in mids])
            threshold = float(mids[int(np.argmax(js))])
    sens, spec = _sens_spec(scores, labels, threshold)
    return ThresholdMetrics(sensitivity=sens, specificity=spec, threshold=float(threshold))


def dice(pred_labels, true_labels, cls: int) -> float:
    """2|P&T| / (|P|+|T|); defined as 1.0 when both masks are empty."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {true_labels.shape}")
    p = pred_labels == cls
    t = true_labels == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (n,3) of mask voxels with a 6-neighbour outside the mask.

    Out-of-bounds neighbours count as outside, so voxels on the array edge
    are boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = mask.copy()
    for axis in range(mask.ndim):
        lo = np.zeros_like(mask)
        hi = np.zeros_like(mask)
        sl_to = [slice(None)] * mask.ndim
        sl_from = [slice(None)] * mask.ndim
        sl_to[axis] = slice(1, None)
        sl_from[axis] = slice(None, -1)
        lo[tuple(sl_to)] = mask[tuple(sl_from)]
        hi[tuple(sl_from)] = mask[tuple(sl_to)]
        interior &= lo & hi
    return np.argwhere(mask & ~interior)


def hd95(pred_labels, true_labels, cls: int,
         spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of pooled symmetric boundary distances."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    p = pred_labels == cls
    t = true_labels == cls
    if not p.any() or not t.any():
        raise ValueError(f"empty mask for class {cls}")
    sp = np.asarray(spacing, dtype=float)
    pb = boundary_voxels(p) * sp
    tb = boundary_voxels(t) * sp
    d_pt, _ = cKDTree(tb).query(pb)
    d_tp, _ = cKDTree(pb).query(tb)
    pooled = np.concatenate([d_pt, d_tp])
    return float(np.percentile(pooled, 95))
