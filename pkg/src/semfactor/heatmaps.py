"""Per-pixel factor activation maps and the fixed-size grid descriptor.

Heat maps are posterior-marginal estimates: the mean of the retained
trailing samples of z, painted over each patch's pixel support. An image
of any size then reduces to 14 overlapping 32x32 windows on a 2x7 grid,
each summarised by a K-vector of heat-map mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DimensionError, FactorState, FeatureBag

WINDOW = 32
GRID_ROWS = 7
GRID_COLS = 2


@dataclass(eq=False)
class HeatMapStack:
    """K per-pixel activation maps for one image, values in [0, 1]."""

    image_id: str
    width: int
    height: int
    factor_names: list[str]
    maps: np.ndarray  # (K, H, W) float64

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3:
            raise DimensionError("maps must be (K, height, width)")
        if self.maps.shape[1:] != (self.height, self.width):
            raise DimensionError("map dimensions do not match the declared size")
        if len(self.factor_names) != self.maps.shape[0]:
            raise DimensionError("factor_names length must equal the number of maps")

    @property
    def k(self) -> int:
        return int(self.maps.shape[0])


@dataclass(eq=False)
class GridWindow:
    row: int
    col: int
    x: int
    y: int
    vector: np.ndarray  # (K,) L1-normalised window mass
    raw: np.ndarray  # (K,) un-normalised pixel sums


@dataclass(eq=False)
class GridDescriptor:
    image_id: str
    windows: list[GridWindow]

    @property
    def matrix(self) -> np.ndarray:
        """(14, K) normalised window vectors in (row, col) order."""
        return np.stack([w.vector for w in self.windows])


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def grid_windows(width: int, height: int) -> list[tuple[int, int, int, int]]:
    """Origins of the 14 windows as (row, col, x, y).

    Column origins split the horizontal slack in two; row origins split
    the vertical slack in six equal strides, rounded to the nearest
    pixel. A 32x32 image degenerates to all origins at (0, 0).
    """
    if width < WINDOW or height < WINDOW:
        raise ValueError(f"image must be at least {WINDOW}x{WINDOW}, got {width}x{height}")
    xs = [_round_half_up(c * (width - WINDOW)) for c in range(GRID_COLS)]
    ys = [_round_half_up(r * (height - WINDOW) / (GRID_ROWS - 1)) for r in range(GRID_ROWS)]
    return [(r, c, xs[c], ys[r]) for r in range(GRID_ROWS) for c in range(GRID_COLS)]


def accumulate_heatmaps(
    bag: FeatureBag,
    trailing_states: list[FactorState],
    factor_names: list[str] | None = None,
) -> HeatMapStack:
    """Average the retained z samples into per-pixel activation maps."""
    if not trailing_states:
        raise ValueError("at least one retained state is required")
    idx = bag.patch_index
    if np.any(idx < 0):
        raise ValueError(f"bag {bag.image_id} leaves pixels uncovered")
    k = max(s.z.shape[1] for s in trailing_states)
    acc = np.zeros((bag.n_patches, k))
    for s in trailing_states:
        z = s.z.astype(np.float64)
        if z.shape[0] != bag.n_patches:
            raise DimensionError("state rows do not match the bag patches")
        acc[:, : z.shape[1]] += z
    acc /= len(trailing_states)
    if factor_names is None:
        factor_names = [f"factor-{i:03d}" for i in range(k)]
    maps = acc[idx, :].T.reshape(k, bag.height, bag.width)
    return HeatMapStack(bag.image_id, bag.width, bag.height, list(factor_names), np.ascontiguousarray(maps))


def grid_descriptor(stack: HeatMapStack) -> GridDescriptor:
    """Sum each heat map over the 14 windows and L1-normalise per window.

    Raw sums are kept alongside: they stay bounded by the window pixel
    count and are what search-side tooling inspects.
    """
    placements = grid_windows(stack.width, stack.height)
    integral = np.zeros((stack.k, stack.height + 1, stack.width + 1))
    integral[:, 1:, 1:] = stack.maps.cumsum(axis=1).cumsum(axis=2)
    windows = []
    for r, c, x, y in placements:
        raw = (
            integral[:, y + WINDOW, x + WINDOW]
            - integral[:, y, x + WINDOW]
            - integral[:, y + WINDOW, x]
            + integral[:, y, x]
        )
        raw = np.maximum(raw, 0.0)
        total = raw.sum()
        vec = raw / total if total > 0 else raw.copy()
        windows.append(GridWindow(row=r, col=c, x=x, y=y, vector=vec, raw=raw))
    return GridDescriptor(image_id=stack.image_id, windows=windows)
