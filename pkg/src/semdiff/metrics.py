"""Segmentation metrics, optimal assignment and the signed-rank test."""

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from ._validation import check_instance_map, check_same_hw
from .exceptions import ContractError


class DegenerateInputError(ContractError):
    pass


def hungarian(cost):
    """Minimum-cost assignment of ``min(n, m)`` row/column pairs.

    Shortest augmenting path with row/column potentials, O(n^2 m).

    Returns:
        ``(rows, cols, total)`` with ``rows`` increasing.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {C.shape}")
    if np.isnan(C).any():
        raise ContractError("cost matrix contains NaN")
    if not np.isfinite(C).all():
        raise ContractError("cost matrix contains infinite entries")
    n, m = C.shape
    if n == 0 or m == 0:
        return np.zeros(0, int), np.zeros(0, int), 0.0
    transposed = n > m
    if transposed:
        C, n, m = C.T, m, n

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # match[j] = row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            reduced = C[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    cols = np.nonzero(match[1:])[0]
    rows = match[1:][cols] - 1
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows)
    rows, cols = rows[order], cols[order]
    total = float(np.asarray(cost, dtype=np.float64)[rows, cols].sum())
    return rows, cols, total


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred index, gt index)
    costs: list = field(default_factory=list)
    unmatched_pred: int = 0
    unmatched_gt: int = 0

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def precision(self):
        denom = self.tp + self.unmatched_pred
        return self.tp / denom if denom else 1.0

    @property
    def recall(self):
        denom = self.tp + self.unmatched_gt
        return self.tp / denom if denom else 1.0

    @property
    def f1(self):
        denom = 2 * self.tp + self.unmatched_pred + self.unmatched_gt
        return 2 * self.tp / denom if denom else 1.0


def match_points(pred, gt, radius):
    """Optimal one-to-one matching of points closer than ``radius``.

    Pairs beyond the radius cost more than any feasible matching, so the
    number of valid pairs is maximized first and their distance second.
    """
    if radius <= 0:
        raise ContractError(f"radius must be positive, got {radius}")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    res = MatchResult(unmatched_pred=len(pred), unmatched_gt=len(gt))
    if len(pred) == 0 or len(gt) == 0:
        return res
    d = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    valid = d <= radius
    penalty = 2.0 * radius * (min(d.shape) + 1) + 1.0
    rows, cols, _ = hungarian(np.where(valid, d, penalty))
    for r, c in zip(rows, cols):
        if valid[r, c]:
            res.pairs.append((int(r), int(c)))
            res.costs.append(float(d[r, c]))
    res.unmatched_pred = len(pred) - res.tp
    res.unmatched_gt = len(gt) - res.tp
    return res


def match_centers(pred, gt, radius=6.0):
    """Center-detection ``(f1, precision, recall)`` after optimal matching."""
    r = match_points(pred, gt, radius)
    return r.f1, r.precision, r.recall


def _as_mask(a, shape=None):
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if shape is None:
        raise ContractError("coordinate sets need an explicit shape")
    m = np.zeros(shape, dtype=bool)
    if a.size:
        m[a[:, 0], a[:, 1]] = True
    return m


def dice(a, b):
    """``2|a & b| / (|a| + |b|)`` for boolean masks; 1 when both are empty."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"dice masks differ in shape: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def contour(mask):
    """Foreground pixels with a 4-neighbor outside the mask (image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def _points(x):
    x = np.asarray(x)
    return np.argwhere(x) if x.dtype == bool else x.reshape(-1, 2)


def assd(a, b):
    """Average symmetric surface distance between two contour pixel sets.

    Inputs are boolean contour masks or ``(n, 2)`` coordinate arrays.
    """
    pa = _points(a).astype(np.float64)
    pb = _points(b).astype(np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise ContractError("assd needs two non-empty contours")
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return float((da.sum() + db.sum()) / (len(pa) + len(pb)))


@dataclass
class WilcoxonResult:
    statistic: float  # sum of signed ranks
    p_value: float
    n: int
    method: str


def wilcoxon_signed_rank(diffs, method="auto"):
    """Two-sided signed-rank test on paired differences.

    Zero differences are dropped. Ranks of ``|d|`` use midranks for ties.
    The exact null distribution (all 2^n sign patterns) is used for n <= 12
    unless ``method="approx"``; otherwise a normal approximation with tie and
    continuity corrections.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if np.isnan(d).any():
        raise ContractError("differences contain NaN")
    d = d[d != 0]
    if len(d) == 0:
        raise DegenerateInputError("all paired differences are zero")
    n = len(d)
    if n < 5:
        raise ContractError(f"signed-rank test needs at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    stat = float(np.sum(np.sign(d) * ranks))
    if method == "auto":
        method = "exact" if n <= 12 else "approx"
    if method == "exact":
        if n > 20:
            raise ContractError("exact enumeration limited to n <= 20")
        signs = np.array(list(product((-1.0, 1.0), repeat=n)))
        null = signs @ ranks
        p = float(np.mean(np.abs(null) >= abs(stat) - 1e-9))
    elif method == "approx":
        w_plus = float(ranks[d > 0].sum())
        mu = n * (n + 1) / 4.0
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((counts ** 3 - counts) / 48.0).sum())
        z = max(abs(w_plus - mu) - 0.5, 0.0) / math.sqrt(var)
        p = math.erfc(z / math.sqrt(2.0))
    else:
        raise ContractError(f"unknown method {method!r}")
    return WilcoxonResult(stat, min(1.0, p), n, method)


# ---------------------------------------------------------------- instance-level evaluation


def instance_centers(labels):
    labels = check_instance_map(labels)
    ids = np.unique(labels)
    ids = ids[ids > 0]
    if len(ids) == 0:
        return ids, np.zeros((0, 2))
    return ids, np.asarray(ndimage.center_of_mass(np.ones_like(labels), labels, ids)).reshape(-1, 2)


def _nucleus_of(cell_region, nuclei):
    return cell_region & (nuclei > 0)


def evaluate_fov(pred_cells, pred_nuclei, gt_cells, gt_nuclei, radius=6.0):
    """Center F1, then per matched cell: cytoplasm/nucleus Dice and membrane ASSD."""
    pred_cells, gt_cells = check_instance_map(pred_cells), check_instance_map(gt_cells)
    pred_nuclei, gt_nuclei = check_instance_map(pred_nuclei), check_instance_map(gt_nuclei)
    check_same_hw(pred_cells, pred_nuclei, gt_cells, gt_nuclei)
    pid, pc = instance_centers(pred_cells)
    gid, gc = instance_centers(gt_cells)
    match = match_points(pc, gc, radius)
    cyto, nuc, surf = [], [], []
    for pi, gi in match.pairs:
        pcell, gcell = pred_cells == pid[pi], gt_cells == gid[gi]
        pn, gn = _nucleus_of(pcell, pred_nuclei), _nucleus_of(gcell, gt_nuclei)
        cyto.append(dice(pcell & ~pn, gcell & ~gn))
        nuc.append(dice(pn, gn))
        surf.append(assd(contour(pcell), contour(gcell)))
    nan = float("nan")
    return {
        "f1": match.f1, "precision": match.precision, "recall": match.recall,
        "tp": match.tp, "fp": match.unmatched_pred, "fn": match.unmatched_gt,
        "dice_cytoplasm": float(np.mean(cyto)) if cyto else nan,
        "dice_nuclei": float(np.mean(nuc)) if nuc else nan,
        "assd_membrane": float(np.mean(surf)) if surf else nan,
    }
