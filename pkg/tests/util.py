"""Shared builders and oracles for the test suite."""

from __future__ import annotations

import numpy as np

from semfactor import FactorState, FeatureBag, Patch


def make_bag(features, edges=(), image_id="img", width=None, height=None):
    """Bag with one pixel per patch on a 1-row image; edges are unordered
    pairs and get symmetrised."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    width = n if width is None else width
    height = 1 if height is None else height
    patches = [
        Patch(patch_id=j, pixel_mask=np.array([j], dtype=np.int64), feature=features[j])
        for j in range(n)
    ]
    adjacency = []
    for a, b in edges:
        adjacency += [(a, b), (b, a)]
    return FeatureBag(image_id=image_id, width=width, height=height, patches=patches, adjacency=adjacency)


def chain_bag(features, image_id="chain"):
    n = np.asarray(features).shape[0]
    return make_bag(features, edges=[(j, j + 1) for j in range(n - 1)], image_id=image_id)


def state_of(z) -> FactorState:
    return FactorState.from_z(np.asarray(z, dtype=np.int8))


def align_factors(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Permutation of estimate rows best matching truth rows (Hungarian)."""
    from scipy.optimize import linear_sum_assignment

    cost = np.linalg.norm(estimate[:, None, :] - truth[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(cols), dtype=np.int64)
    perm[cols] = rows
    return perm


def rank1_accuracy(distances: np.ndarray, truth: np.ndarray) -> float:
    from semfactor import cmc_curve

    return float(cmc_curve(distances, truth)[0])
