"""Procedural toy FOVs with exact instance masks.

Cells are non-overlapping rasterized ellipses with a concentric nucleus at
half the cell's axes, so every nucleus lies inside its cell and shares its
instance id. Colors are a per-image base color plus per-pixel Gaussian
noise, which keeps the conditioning statistics recoverable from the image.
"""

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .condmaps import eccentricity
from .dataio import Fov, quantize, save_corpus
from .exceptions import ConfigError, PackingError

# (assay, indication) -> (background, cell, nucleus) RGB in [0, 1]
CONDITION_PALETTES = {
    ("HER2", "Breast"): ((0.93, 0.90, 0.86), (0.70, 0.42, 0.20), (0.30, 0.34, 0.62)),
    ("PDL1", "Lung"): ((0.86, 0.90, 0.94), (0.50, 0.28, 0.42), (0.44, 0.52, 0.78)),
    ("Ki67", "Colon"): ((0.90, 0.93, 0.86), (0.80, 0.66, 0.38), (0.22, 0.22, 0.40)),
    ("CK", "Gastric"): ((0.95, 0.86, 0.90), (0.58, 0.50, 0.22), (0.55, 0.30, 0.50)),
    ("HER2", "Gastric"): ((0.88, 0.86, 0.93), (0.42, 0.30, 0.16), (0.62, 0.62, 0.85)),
}

# the full metadata vocabulary known to the text embedder
ASSAYS = ("HER2", "PDL1", "Ki67", "CK")
INDICATIONS = ("Breast", "Lung", "Colon", "Gastric", "Bladder")


@dataclass(frozen=True)
class ToyFovSpec:
    size: int = 64
    cell_count: tuple = (4, 7)
    major_axis: tuple = (6.0, 10.0)
    ecc_mean: float = 0.55
    ecc_spread: float = 0.1
    assay: str = "HER2"
    indication: str = "Breast"
    background_color: tuple = (0.93, 0.90, 0.86)
    cell_color: tuple = (0.70, 0.42, 0.20)
    nucleus_color: tuple = (0.30, 0.34, 0.62)
    color_jitter: float = 0.05
    cell_std: float = 0.03
    nucleus_std: float = 0.03
    background_std: float = 0.02
    gap: int = 1
    max_attempts: int = 300
    seed: int = 0

    def for_condition(self, assay, indication):
        bg, cell, nuc = CONDITION_PALETTES[(assay, indication)]
        return replace(self, assay=assay, indication=indication,
                       background_color=bg, cell_color=cell, nucleus_color=nuc)


def _ellipse_mask(shape, cy, cx, a, b, theta):
    rows, cols = np.indices(shape, dtype=np.float64)
    dy, dx = rows - cy, cols - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def rasterize_ellipse(shape, center, semi_axes, theta=0.0):
    """Boolean mask of pixel centers inside an ellipse (``semi_axes`` = (major, minor))."""
    return _ellipse_mask(shape, center[0], center[1], semi_axes[0], semi_axes[1], theta)


def generate_fov(spec, fov_id="fov_0000"):
    """Rasterize one FOV.

    Returns:
        A :class:`~semdiff.dataio.Fov` whose image is already on the 8-bit grid.

    Raises:
        PackingError: the requested cells could not be placed without overlap.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    n_cells = int(rng.integers(spec.cell_count[0], spec.cell_count[1] + 1))
    cells = np.zeros((size, size), dtype=np.int64)
    nuclei = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    placed, attempts = 0, 0
    while placed < n_cells:
        attempts += 1
        if attempts > spec.max_attempts * n_cells:
            raise PackingError(f"placed {placed}/{n_cells} cells after {attempts - 1} attempts for {spec}")
        e = float(np.clip(rng.uniform(spec.ecc_mean - spec.ecc_spread, spec.ecc_mean + spec.ecc_spread), 0.0, 0.99))
        a = rng.uniform(*spec.major_axis)
        b = a * np.sqrt(1.0 - e * e)
        theta = rng.uniform(0.0, np.pi)
        hx = np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2)
        hy = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
        if 2 * hx + 1 >= size or 2 * hy + 1 >= size:
            continue
        cx = rng.uniform(hx, size - 1 - hx)
        cy = rng.uniform(hy, size - 1 - hy)
        cell = _ellipse_mask(cells.shape, cy, cx, a, b, theta)
        nuc = _ellipse_mask(cells.shape, cy, cx, a / 2, b / 2, theta)
        if not nuc.any() or (cell & occupied).any():
            continue
        placed += 1
        cells[cell] = placed
        nuclei[nuc] = placed
        grown = cell
        for _ in range(spec.gap):
            grown = grown | np.roll(grown, 1, 0) | np.roll(grown, -1, 0) | np.roll(grown, 1, 1) | np.roll(grown, -1, 1)
        occupied |= grown

    jitter = lambda base: np.clip(np.asarray(base) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0.0, 1.0)
    bg, cc, nc = jitter(spec.background_color), jitter(spec.cell_color), jitter(spec.nucleus_color)
    image = bg[:, None, None] + rng.normal(0.0, spec.background_std, (3, size, size))
    cyto = (cells > 0) & (nuclei == 0)
    image[:, cyto] = cc[:, None] + rng.normal(0.0, spec.cell_std, (3, int(cyto.sum())))
    nfg = nuclei > 0
    image[:, nfg] = nc[:, None] + rng.normal(0.0, spec.nucleus_std, (3, int(nfg.sum())))
    meta = {"seed": int(spec.seed), "n_cells": n_cells,
            "base_colors": {"background": bg.round(6).tolist(), "cell": cc.round(6).tolist(),
                            "nucleus": nc.round(6).tolist()}}
    return Fov(fov_id, quantize(image), cells, nuclei, spec.assay, spec.indication, meta)


def _exact_counts(n, proportions):
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


@dataclass
class Mixture:
    """Named FOV templates with proportions; conditions are assigned round-robin."""

    components: dict = field(default_factory=dict)
    conditions: tuple = tuple(CONDITION_PALETTES)


def default_mixture(size=64, high_fraction=120 / 612):
    """Columnar (high eccentricity) minority plus rounder majority, 5 condition groups."""
    if size >= 48:
        base = ToyFovSpec(size=size, cell_count=(3, 6), major_axis=(6.0 * size / 64, 10.0 * size / 64))
    else:
        base = ToyFovSpec(size=size, cell_count=(2, 4), major_axis=(4.5, 6.5))
    return Mixture(components={
        "high_ecc": (high_fraction, replace(base, ecc_mean=0.95, ecc_spread=0.03)),
        "low_ecc": (1 - high_fraction, replace(base, ecc_mean=0.5, ecc_spread=0.15)),
    })


def generate_corpus(n_fovs, mixture=None, seed=0, size=64):
    """Generate ``n_fovs`` FOVs.

    Component counts follow the mixture proportions exactly (largest
    remainder); component order over the corpus is a seeded permutation and
    condition groups cycle over FOV indices.
    """
    if n_fovs < 1:
        raise ConfigError("n_fovs must be >= 1")
    mixture = mixture or default_mixture(size)
    names = list(mixture.components)
    counts = _exact_counts(n_fovs, [mixture.components[k][0] for k in names])
    labels = np.repeat(np.arange(len(names)), counts)
    ss = np.random.SeedSequence(seed)
    labels = np.random.default_rng(ss.spawn(1)[0]).permutation(labels)
    fov_seeds = ss.generate_state(n_fovs)
    fovs = []
    for i in range(n_fovs):
        name = names[labels[i]]
        assay, indication = mixture.conditions[i % len(mixture.conditions)]
        spec = replace(mixture.components[name][1].for_condition(assay, indication), seed=int(fov_seeds[i]))
        fov = generate_fov(spec, fov_id=f"fov_{i:04d}")
        fov.meta.update(component=name, index=i)
        fovs.append(fov)
    return fovs


def forge(out_dir, n_fovs=612, size=64, seed=0, mixture=None):
    fovs = generate_corpus(n_fovs, mixture=mixture, seed=seed, size=size)
    save_corpus(out_dir, fovs)
    return fovs


def spec_record(spec):
    return asdict(spec)


def measured_eccentricities(fov):
    return [eccentricity(fov.cells == k) for k in range(1, int(fov.cells.max()) + 1)]
