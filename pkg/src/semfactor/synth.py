"""Planted-factor synthetic data: the oracle for end-to-end testing.

Source images carry strong labels equal to the planted states. Target
images come in identity pairs (two views with independent noise and a
small state perturbation) generated from appearance rows shifted by a
domain offset, which gives a ground-truthed source-to-target transfer
benchmark with re-identification pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FeatureBag, Patch, SupervisionLabels, rng_stream, validate_bag


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 50
    grid: int = 8
    k_true: int = 8
    d: int = 12
    noise_std: float = 0.05
    coherence: float = 0.8
    domain_shift: tuple[float, ...] | None = None
    seed: int = 0
    # sizing knobs beyond the core contract
    density: float = 0.35
    n_target: int | None = None
    view_flip: float = 0.05
    patch_px: int = 8
    appearance_scale: float = 1.0

    def __post_init__(self):
        if min(self.n_images, self.grid, self.k_true, self.d, self.patch_px) < 1:
            raise ValueError("all counts must be positive")
        if not (0.0 <= self.coherence <= 1.0):
            raise ValueError("coherence must lie in [0, 1]")
        if self.domain_shift is not None and len(self.domain_shift) != self.d:
            raise ValueError("domain_shift must have length d")

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "grid": self.grid,
            "k_true": self.k_true,
            "d": self.d,
            "noise_std": self.noise_std,
            "coherence": self.coherence,
            "domain_shift": None if self.domain_shift is None else list(self.domain_shift),
            "seed": self.seed,
            "density": self.density,
            "n_target": self.n_target,
            "view_flip": self.view_flip,
            "patch_px": self.patch_px,
            "appearance_scale": self.appearance_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if d.get("domain_shift") is not None:
            d["domain_shift"] = tuple(d["domain_shift"])
        return cls(**d)


@dataclass
class SynthResult:
    source: list[tuple[FeatureBag, SupervisionLabels]]
    target: list[FeatureBag]
    target_pairs: list[tuple[str, str]]  # (probe id, gallery id) per identity
    truth: dict[str, np.ndarray]  # image id -> planted (N, k_true) states
    appearance: np.ndarray  # (k_true, d) source factor rows
    target_appearance: np.ndarray  # source rows plus the domain shift
    factor_names: list[str]
    spec: SyntheticSpec


def _coherent_states(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """Row-major scan; each patch copies a visited neighbour's factor row
    with probability ``coherence``, else draws a fresh Bernoulli row."""
    g = spec.grid
    z = np.zeros((g * g, spec.k_true), dtype=np.int8)
    for r in range(g):
        for c in range(g):
            j = r * g + c
            prev = []
            if c > 0:
                prev.append(j - 1)
            if r > 0:
                prev.append(j - g)
            if prev and rng.random() < spec.coherence:
                src = prev[int(rng.integers(len(prev)))]
                z[j] = z[src]
            else:
                z[j] = (rng.random(spec.k_true) < spec.density).astype(np.int8)
    return z


def _grid_bag(image_id: str, z: np.ndarray, a: np.ndarray, noise: np.ndarray, spec: SyntheticSpec) -> FeatureBag:
    g = spec.grid
    px = spec.patch_px
    side = g * px
    x = z.astype(np.float64) @ a + noise
    patches = []
    for r in range(g):
        for c in range(g):
            j = r * g + c
            rows = np.arange(r * px, (r + 1) * px)
            cols = np.arange(c * px, (c + 1) * px)
            mask = (rows[:, None] * side + cols[None, :]).ravel()
            patches.append(Patch(patch_id=j, pixel_mask=mask.astype(np.int64), feature=x[j]))
    adjacency = []
    for r in range(g):
        for c in range(g):
            j = r * g + c
            if c + 1 < g:
                adjacency += [(j, j + 1), (j + 1, j)]
            if r + 1 < g:
                adjacency += [(j, j + g), (j + g, j)]
    return FeatureBag(image_id=image_id, width=side, height=side, patches=patches, adjacency=adjacency)


def synth_generate(spec: SyntheticSpec) -> SynthResult:
    """Deterministic generator: same spec (including seed), same bytes."""
    rng = rng_stream(spec.seed, "synth", spec.grid, spec.k_true, spec.d)
    a = rng.standard_normal((spec.k_true, spec.d)) * spec.appearance_scale
    shift = np.zeros(spec.d) if spec.domain_shift is None else np.asarray(spec.domain_shift, dtype=np.float64)
    a_target = a + shift[None, :]
    names = [f"attr-{i:03d}" for i in range(spec.k_true)]
    n_cells = spec.grid * spec.grid

    truth: dict[str, np.ndarray] = {}
    source = []
    for i in range(spec.n_images):
        img_rng = rng_stream(spec.seed, "synth-src", i)
        z = _coherent_states(img_rng, spec)
        noise = img_rng.standard_normal((n_cells, spec.d)) * spec.noise_std
        image_id = f"src-{i:04d}"
        bag = _grid_bag(image_id, z, a, noise, spec)
        labels = SupervisionLabels(mode="strong", strong_labels=z.copy(), attribute_names=list(names))
        truth[image_id] = z
        source.append((bag, labels))

    n_target = spec.n_images if spec.n_target is None else spec.n_target
    target: list[FeatureBag] = []
    pairs: list[tuple[str, str]] = []
    for i in range(n_target):
        id_rng = rng_stream(spec.seed, "synth-tgt", i)
        z_id = _coherent_states(id_rng, spec)
        view_ids = []
        for view in ("a", "b"):
            flips = (id_rng.random(z_id.shape) < spec.view_flip).astype(np.int8)
            z_view = (z_id ^ flips).astype(np.int8)
            noise = id_rng.standard_normal((n_cells, spec.d)) * spec.noise_std
            image_id = f"tgt-{i:04d}-{view}"
            bag = _grid_bag(image_id, z_view, a_target, noise, spec)
            truth[image_id] = z_view
            target.append(bag)
            view_ids.append(image_id)
        pairs.append((view_ids[0], view_ids[1]))

    for bag in [b for b, _ in source] + target:
        problems = validate_bag(bag)
        if problems:
            raise AssertionError(f"generator produced an invalid bag {bag.image_id}: {problems}")
    return SynthResult(
        source=source,
        target=target,
        target_pairs=pairs,
        truth=truth,
        appearance=a,
        target_appearance=a_target,
        factor_names=names,
        spec=spec,
    )
