"""Core model state and the unnormalised log-joint.

Notation used across the package:

    X   (N, D)  feature vectors of one image, one row per patch
    Z   (N, K)  binary factor activations, z[j, k] = 1 iff factor k is
                active at patch j
    A   (K, D)  factor appearance matrix, row k is the appearance of
                factor k
    m   (K,)    per-image usage counts, the column sums of Z

Patches of an image form an undirected adjacency graph. A Potts-style
coupling of strength ``beta`` rewards neighbouring patches that agree on
a factor state; the activation prior for a used column is the standard
buffet urn term (N - m_k)! (m_k - 1)! / N!.

A factor column with m_k = 0 is treated as inactive: it contributes
nothing to the activation prior, the coupling term, or the appearance
prior, so dropping an all-zero column never changes the joint.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

_MASK64 = (1 << 64) - 1


class DataFormatError(ValueError):
    """An input file or record does not match the expected schema."""


class DimensionError(ValueError):
    """Array shapes disagree across bags, states and the appearance model."""


class UnknownFactorError(ValueError):
    """A query names a factor that is not in the model vocabulary."""

    def __init__(self, name: str, suggestions: list[str]):
        self.name = name
        self.suggestions = suggestions
        hint = f" (did you mean: {', '.join(suggestions)})" if suggestions else ""
        super().__init__(f"unknown factor name {name!r}{hint}")


def rng_stream(seed: int, *tokens) -> np.random.Generator:
    """Deterministic RNG stream keyed by a base seed plus context tokens.

    Every stochastic operation draws from a stream derived from what it
    acts on (image id, sweep index, phase), so results never depend on
    the order in which independent pieces of work are scheduled.
    """
    h = hashlib.blake2b(digest_size=8)
    for tok in tokens:
        h.update(str(tok).encode("utf-8"))
        h.update(b"\x1f")
    return np.random.default_rng([seed & _MASK64, int.from_bytes(h.digest(), "little")])


def sigmoid(x):
    """Numerically stable logistic function for scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Hyperparams:
    """Model hyperparameters; configuration, never hard-coded at call sites.

    ``k_background`` marks the trailing block of the supervised factors as
    background factors: when an image carries a foreground mask, background
    factors are clamped off on foreground patches and attribute factors are
    clamped off on background patches.
    """

    alpha: float = 2.0
    beta: float = 1.0
    sigma_x: float = 0.5
    sigma_a: float = 1.0
    k_supervised: int = 0
    k_max: int = 100
    rng_seed: int = 0
    k_background: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.sigma_x <= 0 or self.sigma_a <= 0:
            raise ValueError("sigma_x and sigma_a must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be positive")
        if not (0 <= self.k_supervised <= self.k_max):
            raise ValueError("k_supervised must lie in [0, k_max]")
        if not (0 <= self.k_background <= self.k_supervised):
            raise ValueError("k_background must lie in [0, k_supervised]")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "sigma_x": self.sigma_x,
            "sigma_a": self.sigma_a,
            "k_supervised": self.k_supervised,
            "k_max": self.k_max,
            "rng_seed": self.rng_seed,
            "k_background": self.k_background,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


@dataclass(eq=False)
class Patch:
    """One super-pixel patch: pixel support plus a feature vector."""

    patch_id: int
    pixel_mask: np.ndarray  # sorted row-major flat pixel indices, int64
    feature: np.ndarray  # (D,) float64


@dataclass(eq=False)
class FeatureBag:
    """One image as a set of patches plus an undirected adjacency graph.

    ``adjacency`` stores directed pairs; a well-formed bag contains both
    directions of every edge (checked by :func:`validate_bag`).
    """

    image_id: str
    width: int
    height: int
    patches: list[Patch]
    adjacency: list[tuple[int, int]]

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def dim(self) -> int:
        return int(self.patches[0].feature.shape[0])

    @cached_property
    def features(self) -> np.ndarray:
        """(N, D) matrix of patch features, rows in patch order."""
        return np.stack([p.feature for p in self.patches]).astype(np.float64)

    @cached_property
    def _id_to_pos(self) -> dict[int, int]:
        return {p.patch_id: i for i, p in enumerate(self.patches)}

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        """Per patch (by position) the sorted positions of its neighbours."""
        pos = self._id_to_pos
        adj: list[set[int]] = [set() for _ in self.patches]
        for a, b in self.adjacency:
            adj[pos[a]].add(pos[b])
        return [np.array(sorted(s), dtype=np.int64) for s in adj]

    @cached_property
    def edges(self) -> list[tuple[int, int]]:
        """Unordered unique edges as (position, position) with a < b."""
        pos = self._id_to_pos
        seen = set()
        for a, b in self.adjacency:
            pa, pb = pos[a], pos[b]
            seen.add((min(pa, pb), max(pa, pb)))
        return sorted(seen)

    @cached_property
    def patch_index(self) -> np.ndarray:
        """(H*W,) flat map pixel -> patch position; -1 where uncovered."""
        out = np.full(self.width * self.height, -1, dtype=np.int64)
        for i, p in enumerate(self.patches):
            out[p.pixel_mask] = i
        return out


def validate_bag(bag: FeatureBag) -> list[str]:
    """Check every FeatureBag invariant; returns the list of violations.

    An empty list means the bag passes. This is report-only and never
    raises; loaders turn a non-empty report into an error.
    """
    problems: list[str] = []
    if not bag.patches:
        return ["bag has no patches"]
    if bag.width < 1 or bag.height < 1:
        problems.append("width and height must be positive")

    ids = [p.patch_id for p in bag.patches]
    if len(set(ids)) != len(ids):
        problems.append("duplicate patch ids")

    dims = {int(p.feature.shape[0]) for p in bag.patches}
    if len(dims) != 1:
        problems.append(f"patch features disagree on dimension: {sorted(dims)}")

    n_px = bag.width * bag.height
    covered = np.zeros(n_px, dtype=np.int64)
    for p in bag.patches:
        mask = np.asarray(p.pixel_mask)
        if mask.size and (mask.min() < 0 or mask.max() >= n_px):
            problems.append(f"patch {p.patch_id} has pixels outside the image")
            continue
        covered[mask] += 1
    overlap = np.flatnonzero(covered > 1)
    if overlap.size:
        problems.append(
            f"pixel masks overlap at {overlap.size} pixels (first flat index {int(overlap[0])})"
        )
    missing = np.flatnonzero(covered == 0)
    if missing.size:
        problems.append(
            f"pixel masks leave {missing.size} pixels uncovered (first flat index {int(missing[0])})"
        )

    id_set = set(ids)
    pairs = set()
    for a, b in bag.adjacency:
        if a not in id_set or b not in id_set:
            problems.append(f"adjacency endpoint ({a}, {b}) is not a patch id")
            continue
        if a == b:
            problems.append(f"self-loop at patch {a}")
            continue
        if (a, b) in pairs:
            problems.append(f"duplicate adjacency pair ({a}, {b})")
        pairs.add((a, b))
    for a, b in sorted(pairs):
        if (b, a) not in pairs:
            problems.append(f"asymmetric adjacency: ({a}, {b}) present but ({b}, {a}) missing")
    return problems


@dataclass(eq=False)
class SupervisionLabels:
    """Strong (per-patch) or weak (per-image) binary attribute annotation.

    ``attribute_names`` optionally names the annotated factors, position
    for position; training aligns datasets that annotate different factor
    subsets through these names. Without names, label positions align
    with the global supervised block directly.
    """

    mode: str = "none"  # one of none / weak / strong
    weak_labels: np.ndarray | None = None  # (Ka,) int8
    strong_labels: np.ndarray | None = None  # (N, Ka) int8
    foreground_mask: np.ndarray | None = None  # (N,) bool
    attribute_names: list[str] | None = None

    def __post_init__(self):
        if self.mode not in ("none", "weak", "strong"):
            raise ValueError(f"unknown supervision mode {self.mode!r}")
        if self.mode == "weak" and self.weak_labels is None:
            raise ValueError("weak supervision requires weak_labels")
        if self.mode == "strong" and self.strong_labels is None:
            raise ValueError("strong supervision requires strong_labels")
        if self.weak_labels is not None:
            self.weak_labels = np.asarray(self.weak_labels, dtype=np.int8)
        if self.strong_labels is not None:
            self.strong_labels = np.asarray(self.strong_labels, dtype=np.int8)
        if self.foreground_mask is not None:
            self.foreground_mask = np.asarray(self.foreground_mask, dtype=bool)

    @property
    def n_annotated(self) -> int:
        if self.mode == "weak":
            return int(self.weak_labels.shape[0])
        if self.mode == "strong":
            return int(self.strong_labels.shape[1])
        return 0


NO_LABELS = SupervisionLabels(mode="none")


@dataclass(eq=False)
class FactorState:
    """Per-image binary factor matrix with usage bookkeeping.

    Single-writer: a state belongs to exactly one image and one sweep
    loop at a time. ``active_count`` always equals the column sums of
    ``z`` over the first ``k_active`` columns.
    """

    z: np.ndarray  # (N, K) int8
    active_count: np.ndarray  # (K,) int64
    k_active: int

    @classmethod
    def from_z(cls, z: np.ndarray, k_active: int | None = None) -> "FactorState":
        z = np.ascontiguousarray(np.asarray(z, dtype=np.int8))
        if z.ndim != 2:
            raise DimensionError("factor matrix must be 2-d")
        k = z.shape[1] if k_active is None else int(k_active)
        return cls(z=z, active_count=z.sum(axis=0, dtype=np.int64), k_active=k)

    def copy(self) -> "FactorState":
        return FactorState(self.z.copy(), self.active_count.copy(), self.k_active)

    def widen(self, k: int) -> None:
        """Grow to k columns in place, new columns all-zero."""
        n, kc = self.z.shape
        if k < kc:
            raise DimensionError("cannot shrink a factor state")
        if k > kc:
            self.z = np.concatenate([self.z, np.zeros((n, k - kc), dtype=np.int8)], axis=1)
            self.active_count = np.concatenate(
                [self.active_count, np.zeros(k - kc, dtype=np.int64)]
            )
        self.k_active = k


@dataclass(eq=False)
class AppearanceModel:
    """Factor appearance posterior: K x D mean and K x K covariance.

    ``sample`` optionally holds the current Gibbs draw of the appearance
    matrix; consumers of the operative appearance use :attr:`weights`,
    which falls back to the posterior mean.
    """

    mean: np.ndarray  # (K, D)
    covariance: np.ndarray  # (K, K)
    factor_names: list[str]
    hyperparams: Hyperparams
    sample: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        k = self.mean.shape[0]
        if self.covariance.shape != (k, k):
            raise DimensionError("covariance must be K x K for a K x D mean")
        if len(self.factor_names) != k:
            raise DimensionError("factor_names length must equal the mean row count")
        if k and np.any(np.diag(self.covariance) <= 0):
            raise ValueError("covariance diagonal must be strictly positive")

    @property
    def k_active(self) -> int:
        return int(self.mean.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mean.shape[1])

    @property
    def weights(self) -> np.ndarray:
        """The appearance matrix in effect: the draw if present, else the mean."""
        return self.mean if self.sample is None else self.sample


def free_factor_names(start: int, count: int) -> list[str]:
    return [f"free-{i:03d}" for i in range(start, start + count)]


def _gauss_logpdf_sq(sq_norm: float, n: int, sigma: float) -> float:
    """log N(x; mu, sigma^2 I) for an n-dim x given |x - mu|^2."""
    return -0.5 * n * math.log(2.0 * math.pi * sigma * sigma) - sq_norm / (2.0 * sigma * sigma)


def log_joint(
    bags: list[FeatureBag],
    states: list[FactorState],
    appearance: AppearanceModel,
    hp: Hyperparams,
) -> float:
    """Unnormalised log-joint of appearances, factor states and features.

    Included terms, per factor column k that is used somewhere:

    * appearance prior  N(A_k; 0, sigma_a^2 I)
    * per image, if m_k >= 1: the urn term (N - m_k)! (m_k - 1)! / N!
      and the coupling term beta * sum over unordered adjacent pairs of
      I(z_ak == z_bk)
    * per patch the likelihood N(X_j; Z_j A, sigma_x^2 I)

    Terms constant in Z and A at fixed K are omitted, so only ratios at
    fixed K are meaningful. Counting each unordered edge once makes the
    two-point normalisation of exp(log_joint) agree exactly with
    :func:`semfactor.gibbs.factor_conditional`.
    """
    if len(bags) != len(states):
        raise DimensionError("bags and states must align one-to-one")
    A = appearance.weights
    k = appearance.k_active
    d = appearance.dim
    total = 0.0
    usage = np.zeros(k, dtype=np.int64)
    for bag, state in zip(bags, states):
        n = bag.n_patches
        if state.z.shape[0] != n:
            raise DimensionError(f"state rows do not match patches for {bag.image_id}")
        if state.k_active != k or state.z.shape[1] != k:
            raise DimensionError(f"state width does not match appearance for {bag.image_id}")
        if bag.dim != d:
            raise DimensionError(f"feature dimension mismatch for {bag.image_id}")
        m = state.active_count
        usage += m
        used = np.flatnonzero(m >= 1)
        for kk in used:
            mk = int(m[kk])
            total += math.lgamma(n - mk + 1) + math.lgamma(mk) - math.lgamma(n + 1)
        if hp.beta > 0 and used.size and bag.edges:
            z = state.z
            for a, b in bag.edges:
                agree = z[a, used] == z[b, used]
                total += hp.beta * int(agree.sum())
        resid = bag.features - state.z.astype(np.float64) @ A
        total += _gauss_logpdf_sq(float(np.sum(resid * resid)), n * d, hp.sigma_x)
    for kk in np.flatnonzero(usage >= 1):
        row = A[kk]
        total += _gauss_logpdf_sq(float(row @ row), d, hp.sigma_a)
    return total
