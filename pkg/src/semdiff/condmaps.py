"""Guidance maps, eccentricity statistics and augmentation planning.

The guidance stack has 16 channels in a fixed order: for cells then nuclei,
the horizontal and vertical position ramps followed by the foreground RGB
mean and RGB standard deviation broadcast over the image.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_instance_map, check_random_state, check_rgb, check_same_hw
from .exceptions import ContractError, EmptyForegroundError

GUIDANCE_CHANNELS = (
    "cellH", "cellV", "cellMeanR", "cellMeanG", "cellMeanB", "cellStdR", "cellStdG", "cellStdB",
    "nucH", "nucV", "nucMeanR", "nucMeanG", "nucMeanB", "nucStdR", "nucStdG", "nucStdB",
)
N_GUIDANCE = len(GUIDANCE_CHANNELS)
CELL_MEAN = slice(2, 5)
CELL_STD = slice(5, 8)
NUC_MEAN = slice(10, 13)
NUC_STD = slice(13, 16)


def compute_hv_map(mask):
    """Per-instance horizontal/vertical ramps in [-1, 1].

    Within each instance's bounding box the horizontal channel runs linearly
    from -1 at the leftmost column to +1 at the rightmost one, centered on
    the box center; the vertical channel does the same over rows. Instances
    one column (row) wide get 0 in that channel. Background is 0.

    Returns:
        ``(2, H, W)`` float array.
    """
    mask = check_instance_map(mask)
    h, w = mask.shape
    hv = np.zeros((2, h, w))
    if not mask.any():
        return hv
    ids = np.unique(mask)
    ids = ids[ids > 0]
    rows, cols = np.indices(mask.shape)
    fg = mask > 0
    lab = mask[fg]
    # dense lookup from label id to bbox extents
    lo_c = np.zeros(ids.max() + 1)
    hi_c = np.zeros(ids.max() + 1)
    lo_r = np.zeros(ids.max() + 1)
    hi_r = np.zeros(ids.max() + 1)
    lo_c[ids] = ndimage.minimum(cols, mask, ids)
    hi_c[ids] = ndimage.maximum(cols, mask, ids)
    lo_r[ids] = ndimage.minimum(rows, mask, ids)
    hi_r[ids] = ndimage.maximum(rows, mask, ids)
    for ch, coord, lo, hi in ((0, cols[fg], lo_c[lab], hi_c[lab]), (1, rows[fg], lo_r[lab], hi_r[lab])):
        half = (hi - lo) / 2.0
        center = (hi + lo) / 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            ramp = np.where(half > 0, (coord - center) / np.where(half > 0, half, 1.0), 0.0)
        hv[ch][fg] = ramp
    return hv


def compute_color_stats(image, mask):
    """Per-channel mean and population std over pixels with label > 0."""
    image = check_rgb(image)
    mask = check_instance_map(mask)
    check_same_hw(image, mask)
    fg = mask > 0
    if not fg.any():
        raise EmptyForegroundError("mask has no foreground pixels; color statistics undefined")
    px = image[:, fg]
    # shifting by one sample makes constant regions exactly zero-variance
    ref = px[:, :1]
    d = px - ref
    return ref[:, 0] + d.mean(axis=1), d.std(axis=1)


def assemble_guidance(cell_mask, nucleus_mask, image, color_image=None,
                      color_cells=None, color_nuclei=None):
    """Build the ``(16, H, W)`` guidance stack.

    Geometry comes from ``cell_mask``/``nucleus_mask``. Color statistics come
    from ``image`` under the same masks unless a separate color source
    (``color_image`` with its own ``color_cells``/``color_nuclei``) is given,
    which is how re-paired augmentation conditions are formed.
    """
    cell_mask = check_instance_map(cell_mask, "cell_mask")
    nucleus_mask = check_instance_map(nucleus_mask, "nucleus_mask")
    image = check_rgb(image)
    check_same_hw(cell_mask, nucleus_mask, image)
    if color_image is None:
        color_image, color_cells, color_nuclei = image, cell_mask, nucleus_mask
    cm, cs = compute_color_stats(color_image, color_cells)
    nm, ns = compute_color_stats(color_image, color_nuclei)
    return guidance_from_stats(cell_mask, nucleus_mask, cm, cs, nm, ns)


def guidance_from_stats(cell_mask, nucleus_mask, cell_mean, cell_std, nuc_mean, nuc_std):
    cell_mask = check_instance_map(cell_mask, "cell_mask")
    nucleus_mask = check_instance_map(nucleus_mask, "nucleus_mask")
    check_same_hw(cell_mask, nucleus_mask)
    h, w = cell_mask.shape
    g = np.empty((N_GUIDANCE, h, w))
    g[0:2] = compute_hv_map(cell_mask)
    g[CELL_MEAN] = np.asarray(cell_mean, dtype=np.float64)[:, None, None]
    g[CELL_STD] = np.asarray(cell_std, dtype=np.float64)[:, None, None]
    g[8:10] = compute_hv_map(nucleus_mask)
    g[NUC_MEAN] = np.asarray(nuc_mean, dtype=np.float64)[:, None, None]
    g[NUC_STD] = np.asarray(nuc_std, dtype=np.float64)[:, None, None]
    return g


class GuidanceMapTransformer(BaseEstimator, TransformerMixin):
    """Stateless transformer from FOV records to stacked guidance maps."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([assemble_guidance(f.cells, f.nuclei, f.image) for f in X])


# ---------------------------------------------------------------- eccentricity


def eccentricity(pixels):
    """Eccentricity of the moment-equivalent ellipse of a pixel set.

    ``pixels`` is an ``(n, 2)`` array of integer (row, col) coordinates or a
    boolean mask. Axis lengths scale with the square roots of the coordinate
    covariance eigenvalues, so ``e = sqrt(1 - lam_min / lam_max)``. Collinear
    sets return the largest float below 1; a single pixel returns 0.
    """
    pts = np.asarray(pixels)
    if pts.dtype == bool:
        pts = np.argwhere(pts)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ContractError("eccentricity needs a non-empty (n, 2) pixel set")
    pts = pts.astype(np.int64)
    n = len(pts)
    r, c = pts[:, 0], pts[:, 1]
    # integer central moments (scaled by n^2) keep translation invariance exact
    srr = int(n * int((r * r).sum()) - int(r.sum()) ** 2)
    scc = int(n * int((c * c).sum()) - int(c.sum()) ** 2)
    src = int(n * int((r * c).sum()) - int(r.sum()) * int(c.sum()))
    mid = (srr + scc) / 2.0
    rad = np.hypot((srr - scc) / 2.0, float(src))
    lam_max = mid + rad
    lam_min = max(mid - rad, 0.0)
    if lam_max <= 0:
        return 0.0
    e = float(np.sqrt(max(0.0, 1.0 - lam_min / lam_max)))
    return min(e, float(np.nextafter(1.0, 0.0)))


def instance_eccentricities(mask):
    mask = check_instance_map(mask)
    out = {}
    idx = np.argwhere(mask > 0)
    if len(idx) == 0:
        return out
    labels = mask[idx[:, 0], idx[:, 1]]
    order = np.argsort(labels, kind="stable")
    idx, labels = idx[order], labels[order]
    ids, starts = np.unique(labels, return_index=True)
    for k, lab in enumerate(ids):
        stop = starts[k + 1] if k + 1 < len(starts) else len(labels)
        out[int(lab)] = eccentricity(idx[starts[k]:stop])
    return out


def mean_eccentricity(mask):
    ecc = instance_eccentricities(mask)
    return float(np.mean(list(ecc.values()))) if ecc else float("nan")


def select_fovs(dataset, threshold=0.85):
    """Indices of FOVs whose unweighted mean cell eccentricity exceeds ``threshold``.

    ``dataset`` is a sequence of FOV records (with ``.cells``) or of cell
    instance maps. FOVs without instances are never selected.
    """
    selected = []
    for i, item in enumerate(dataset):
        cells = getattr(item, "cells", item)
        m = mean_eccentricity(cells)
        if not np.isnan(m) and m > threshold:
            selected.append(i)
    return selected


# ---------------------------------------------------------------- augmentation plan


@dataclass(frozen=True)
class PlanEntry:
    mask_src: int
    color_src: int
    meta_src: int
    rep: int
    seed: int

    def to_record(self):
        return {"mask_src": self.mask_src, "color_src": self.color_src,
                "meta_src": self.meta_src, "rep": self.rep, "seed": self.seed}


def plan_augmentation(selected, replicates=8, seed=0):
    """Pair every selected mask with freshly drawn color and metadata sources.

    Each selected FOV contributes ``replicates`` entries. Color and metadata
    sources are drawn independently and uniformly from ``selected`` for every
    entry. The plan depends only on ``(selected, replicates, seed)``.
    """
    selected = [int(s) for s in selected]
    if not selected:
        raise ContractError("cannot plan augmentation from an empty selection")
    if replicates < 1:
        raise ContractError(f"replicates must be >= 1, got {replicates}")
    rng = check_random_state(seed)
    pool = np.asarray(selected)
    plan = []
    for src in selected:
        for rep in range(replicates):
            color, meta = rng.choice(pool, size=2)
            plan.append(PlanEntry(src, int(color), int(meta), rep, int(rng.integers(2**31 - 1))))
    return plan


def plan_from_records(records):
    return [PlanEntry(int(r["mask_src"]), int(r["color_src"]), int(r["meta_src"]),
                      int(r["rep"]), int(r["seed"])) for r in records]
