"""Embedding real and synthetic images and comparing their distributions."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_rgb
from .exceptions import ContractError
from .metrics import hungarian

GRADIENT_EDGES = (0.0, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8, np.inf)


def toy_embed(image, grid=4, edges=GRADIENT_EDGES):
    """Fixed hand-crafted feature vector of an RGB image.

    Concatenates per-cell channel means and stds over a ``grid x grid``
    partition with the fraction of pixels whose luminance gradient magnitude
    falls in each ``(edges[i], edges[i+1]]`` bin. Zero gradients fall in no
    bin, so a constant image has an all-zero histogram.
    """
    image = check_rgb(image)
    _, h, w = image.shape
    means, stds = [], []
    for rows in np.array_split(np.arange(h), grid):
        for cols in np.array_split(np.arange(w), grid):
            block = image[:, rows[:, None], cols[None, :]].reshape(3, -1)
            # shift by one sample so flat blocks give exactly zero std
            d = block - block[:, :1]
            means.append(block[:, 0] + d.mean(axis=1))
            stds.append(d.std(axis=1))
    lum = image.mean(axis=0)
    gy = np.zeros_like(lum)
    gx = np.zeros_like(lum)
    gy[:-1] = lum[1:] - lum[:-1]
    gx[:, :-1] = lum[:, 1:] - lum[:, :-1]
    mag = np.hypot(gx, gy)
    edges = np.asarray(edges)
    hist = np.array([np.count_nonzero((mag > lo) & (mag <= hi)) for lo, hi in zip(edges[:-1], edges[1:])])
    return np.concatenate([np.ravel(means), np.ravel(stds), hist / mag.size])


class ToyEmbedder(BaseEstimator, TransformerMixin):
    def __init__(self, grid=4):
        self.grid = grid

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([toy_embed(x, self.grid) for x in X])


def wasserstein_empirical(A, B, seed=0):
    """Exact empirical 1-Wasserstein distance between two point clouds.

    The larger sample is subsampled (without replacement, seeded) to the
    smaller size; the optimal matching under Euclidean cost gives the
    average transport cost.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if len(A) == 0 or len(B) == 0:
        raise ContractError("wasserstein distance needs non-empty samples")
    if A.shape[1] != B.shape[1]:
        raise ContractError(f"sample dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    if len(A) != len(B):
        rng = np.random.default_rng(seed)
        n = min(len(A), len(B))
        if len(A) > n:
            A = A[np.sort(rng.choice(len(A), n, replace=False))]
        else:
            B = B[np.sort(rng.choice(len(B), n, replace=False))]
    _, _, total = hungarian(cdist(A, B))
    return total / len(A)


@dataclass
class DistanceMatrix:
    labels: list
    values: np.ndarray  # rows: real groups, cols: synthetic groups

    @property
    def diagonal(self):
        return np.diag(self.values)

    @property
    def off_diagonal(self):
        return self.values[~np.eye(len(self.labels), dtype=bool)]

    def summary(self):
        diag, off = self.diagonal, self.off_diagonal
        return {
            "matching_mean": float(diag.mean()),
            "matching_std": float(diag.std()),
            "non_matching_mean": float(off.mean()) if off.size else float("nan"),
            "non_matching_std": float(off.std()) if off.size else float("nan"),
        }

    def to_csv(self, path):
        lines = ["," + ",".join(self.labels)]
        for lab, row in zip(self.labels, self.values):
            lines.append(lab + "," + ",".join(repr(float(v)) for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def condition_distance_matrix(real, synth, labels=None, seed=0):
    """W1 between every real group (rows) and synthetic group (columns).

    Args:
        real, synth: mapping group label -> ``(n, d)`` embeddings.
        labels: order of groups; defaults to sorted real labels.
    """
    labels = list(labels) if labels is not None else sorted(real)
    if set(labels) - set(real) or set(labels) - set(synth):
        raise ContractError(f"group labels differ between real {sorted(real)} and synthetic {sorted(synth)}")
    for lab in labels:
        if len(real[lab]) < 2 or len(synth[lab]) < 2:
            raise ContractError(f"group {lab!r} has fewer than 2 samples")
    k = len(labels)
    values = np.zeros((k, k))
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            values[i, j] = wasserstein_empirical(real[a], synth[b], seed=seed)
    return DistanceMatrix(labels, values)
