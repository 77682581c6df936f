"""Simplified colour-codebook features over grid cells.

Grid cells stand in for super-pixel segmentation: each cell becomes one
patch whose feature is the concatenation of L1-normalised visual-word
histograms, one histogram per colour codebook. The file format accepts
arbitrary precomputed features, so a richer external pipeline can be
plugged in without touching the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FeatureBag, Patch, rng_stream


@dataclass
class Codebook:
    space: str  # "rgb" or "lab"
    centroids: np.ndarray  # (k, 3)
    objective: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


def to_colorspace(image: np.ndarray, space: str) -> np.ndarray:
    """(H, W, 3) uint8/float RGB into the requested working space."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    if space == "rgb":
        return img.astype(np.float64)
    if space == "lab":
        from skimage.color import rgb2lab

        scaled = img.astype(np.float64) / 255.0 if img.dtype != np.float64 or img.max() > 1.0 else img
        return rgb2lab(scaled)
    raise ValueError(f"unknown colour space {space!r}")


def build_codebook(pixels: np.ndarray, k: int, seed: int, space: str = "rgb") -> Codebook:
    """Lloyd k-means with a 100-iteration cap and seeded initialisation.

    Initial centroids are k distinct sample points; the recorded
    objective (sum of squared distances to the nearest centroid) never
    increases across iterations.
    """
    pts = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < k:
        raise ValueError(f"need at least k={k} sample pixels, got {pts.shape[0]}")
    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] < k:
        raise ValueError(f"need at least k={k} distinct sample pixels, got {distinct.shape[0]}")
    rng = rng_stream(seed, "codebook", space, k)
    centroids = distinct[rng.choice(distinct.shape[0], size=k, replace=False)].copy()

    objective: list[float] = []
    assign = None
    for _ in range(100):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        objective.append(float(d2[np.arange(pts.shape[0]), new_assign].sum()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        for c in range(k):
            members = pts[assign == c]
            if members.shape[0]:
                centroids[c] = members.mean(axis=0)
    return Codebook(space=space, centroids=centroids, objective=objective)


def quantize(image_space: np.ndarray, codebook: Codebook) -> np.ndarray:
    """(H, W) nearest-centroid word index per pixel."""
    h, w, _ = image_space.shape
    flat = image_space.reshape(-1, 3)
    d2 = ((flat[:, None, :] - codebook.centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1).reshape(h, w)


def extract_color_features(
    image: np.ndarray,
    codebooks: list[Codebook],
    cell_grid: tuple[int, int],
    image_id: str = "image",
) -> FeatureBag:
    """One patch per grid cell; feature = concatenated per-codebook
    histograms, each L1-normalised; adjacency = 4-connectivity."""
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("empty image")
    h, w = img.shape[0], img.shape[1]
    rows, cols = cell_grid
    if h < rows or w < cols:
        raise ValueError(f"image {w}x{h} smaller than the {rows}x{cols} cell grid")
    words = [quantize(to_colorspace(img, cb.space), cb) for cb in codebooks]

    row_edges = [(h * r) // rows for r in range(rows + 1)]
    col_edges = [(w * c) // cols for c in range(cols + 1)]
    patches = []
    for r in range(rows):
        for c in range(cols):
            j = r * cols + c
            rr = np.arange(row_edges[r], row_edges[r + 1])
            cc = np.arange(col_edges[c], col_edges[c + 1])
            mask = (rr[:, None] * w + cc[None, :]).ravel().astype(np.int64)
            hists = []
            for word_map, cb in zip(words, codebooks):
                cell_words = word_map[row_edges[r]: row_edges[r + 1], col_edges[c]: col_edges[c + 1]]
                hist = np.bincount(cell_words.ravel(), minlength=cb.k).astype(np.float64)
                hists.append(hist / hist.sum())
            patches.append(Patch(patch_id=j, pixel_mask=mask, feature=np.concatenate(hists)))
    adjacency = []
    for r in range(rows):
        for c in range(cols):
            j = r * cols + c
            if c + 1 < cols:
                adjacency += [(j, j + 1), (j + 1, j)]
            if r + 1 < rows:
                adjacency += [(j, j + cols), (j + cols, j)]
    return FeatureBag(image_id=image_id, width=w, height=h, patches=patches, adjacency=adjacency)
