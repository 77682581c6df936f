"""Source-phase learning: per-patch Gibbs factor updates with supervision
clamping, Poisson birth of new factors, and the conjugate appearance
posterior.

The per-cell update for z[j, k] combines three factors, for s in {0, 1}:

    prior_1 = m_-jk / N          prior_0 = (N - m_-jk) / N
    coupling_s = exp(beta * #{neighbours of j with state s})
    likelihood_s = exp(-|x_j - Z_j(z_jk=s) A|^2 / (2 sigma_x^2))

where m_-jk counts the other patches using factor k. A factor unused by
every other patch (m_-jk = 0) dies deterministically; only the birth move
can re-introduce factors.

Scan order is fixed: patches in index order, factors in index order,
images in dataset order. Every random decision draws from a stream keyed
by (seed, phase, image id, sweep index), so a batched schedule that
updates the same cell across many images at once produces bitwise the
same states as the serial per-image schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AppearanceModel,
    DimensionError,
    FactorState,
    FeatureBag,
    Hyperparams,
    SupervisionLabels,
    free_factor_names,
    log_joint,
    rng_stream,
    sigmoid,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepConfig:
    """Schedule knobs for a Gibbs run (one phase)."""

    iterations: int
    appearance_resample_period: int = 1
    birth_enabled: bool = True
    birth_truncation: int = 3
    sample_appearance: bool = True
    burn_in: int = 0
    retain_samples: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("empty training schedule: iterations must be >= 1")
        if self.appearance_resample_period < 1:
            raise ValueError("appearance_resample_period must be >= 1")
        if self.birth_truncation < 1:
            raise ValueError("birth_truncation must be >= 1")
        if not (0 <= self.burn_in < self.iterations):
            raise ValueError("burn_in must lie in [0, iterations)")
        if not (1 <= self.retain_samples <= self.iterations - self.burn_in):
            raise ValueError("retain_samples must lie in [1, iterations - burn_in]")


def auxiliary_config(iterations: int = 2000, **overrides) -> SweepConfig:
    """Default schedule for annotated source training."""
    base = dict(
        iterations=iterations,
        appearance_resample_period=1,
        birth_enabled=True,
        birth_truncation=3,
        sample_appearance=True,
        burn_in=iterations // 2,
        retain_samples=1,
    )
    base.update(overrides)
    return SweepConfig(**base)


def target_config(iterations: int = 100, **overrides) -> SweepConfig:
    """Default schedule for unsupervised target adaptation."""
    base = dict(
        iterations=iterations,
        appearance_resample_period=1,
        birth_enabled=False,
        birth_truncation=3,
        sample_appearance=False,
        burn_in=0,
        retain_samples=min(20, iterations),
    )
    base.update(overrides)
    return SweepConfig(**base)


def factor_conditional(
    state: FactorState,
    bag: FeatureBag,
    appearance: AppearanceModel,
    j: int,
    k: int,
    hp: Hyperparams,
) -> float:
    """P(z[j, k] = 1 | everything else), before any supervision clamping.

    Returns exactly 0.0 when no other patch uses factor k.
    """
    n = bag.n_patches
    if not (0 <= j < n):
        raise IndexError(f"patch index {j} out of range for {n} patches")
    if not (0 <= k < state.k_active):
        raise IndexError(f"factor index {k} out of range for k_active={state.k_active}")
    if appearance.k_active != state.k_active:
        raise DimensionError("appearance and state disagree on the factor count")
    if appearance.dim != bag.dim:
        raise DimensionError("appearance and bag disagree on the feature dimension")

    z_cur = int(state.z[j, k])
    m_minus = int(state.active_count[k]) - z_cur
    if m_minus == 0:
        return 0.0

    A = appearance.weights
    r_wo = bag.features[j] - state.z[j].astype(np.float64) @ A + z_cur * A[k]
    d0 = float(r_wo @ r_wo)
    r1 = r_wo - A[k]
    d1 = float(r1 @ r1)
    nb = bag.neighbors[j]
    n_agree_1 = int(state.z[nb, k].sum()) if nb.size else 0
    llr = (
        math.log(m_minus)
        - math.log(n - m_minus)
        + hp.beta * (2 * n_agree_1 - nb.size)
        + (d0 - d1) / (2.0 * hp.sigma_x**2)
    )
    return float(sigmoid(llr))


def apply_supervision(raw: float, labels: SupervisionLabels | None, j: int, k: int) -> float:
    """Clamp or reweight a raw conditional according to the annotation.

    Strong labels decide the cell outright; a weak label of 0 vetoes the
    factor in every patch of the image; factors beyond the annotated
    block pass through untouched.
    """
    if labels is None or labels.mode == "none" or k >= labels.n_annotated:
        return raw
    if labels.mode == "strong":
        return float(labels.strong_labels[j, k])
    return raw * float(labels.weak_labels[k])


def build_clamp_plan(
    labels: SupervisionLabels | None,
    bag: FeatureBag,
    factor_names: list[str],
    hp: Hyperparams,
    k: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Precompute per-cell clamps and per-factor weak multipliers.

    Returns ``clamp`` (N, k) int8 with -1 for free cells and 0/1 for
    forced cells, and ``weak`` (k,) float64 in {0, 1}. Encodes, in order:
    foreground-mask rules for the background block, then explicit labels
    (explicit annotation wins over mask rules).
    """
    n = bag.n_patches
    clamp = np.full((n, k), -1, dtype=np.int8)
    weak = np.ones(k, dtype=np.float64)
    k_sup = min(hp.k_supervised, k)
    k_attr = k_sup - hp.k_background

    if labels is not None and labels.foreground_mask is not None and k_sup > 0:
        fg = labels.foreground_mask
        if fg.shape[0] != n:
            raise DimensionError(f"foreground mask length {fg.shape[0]} != {n} patches")
        if hp.k_background > 0:
            clamp[fg, k_attr:k_sup] = 0
            clamp[~fg, :k_attr] = 0

    if labels is None or labels.mode == "none":
        return clamp, weak

    if labels.attribute_names is not None:
        index = {nm: i for i, nm in enumerate(factor_names[:k_sup])}
        cols = []
        for nm in labels.attribute_names:
            if nm not in index:
                raise ValueError(f"annotated factor {nm!r} is not in the supervised vocabulary")
            cols.append(index[nm])
    else:
        ka = labels.n_annotated
        if ka != k_attr:
            raise ValueError(
                f"positional labels must cover the attribute block of {k_attr} factors, got {ka}"
            )
        cols = list(range(k_attr))

    if labels.mode == "strong":
        if labels.strong_labels.shape[0] != n:
            raise DimensionError(
                f"strong labels have {labels.strong_labels.shape[0]} rows for {n} patches"
            )
        clamp[:, cols] = labels.strong_labels
    else:
        weak[cols] = labels.weak_labels.astype(np.float64)
    return clamp, weak


def _sweep_patch(X, Z, m, j, nbrs_j, A, clamp_j, weak, u_j, beta, sigma_x):
    """In-order factor updates at patch j for a stack of images.

    X (M, N, D) float64, Z (M, N, K) int8 and m (M, K) int64 are updated
    in place; clamp_j/weak/u_j are (M, K). All per-cell arithmetic uses
    einsum reductions along fixed axes so the result for each row does
    not depend on how many images are stacked together.
    """
    M, n_patches, _ = X.shape
    K = A.shape[0]
    zj = Z[:, j, :].astype(np.float64)
    r = X[:, j, :] - np.einsum("mk,kd->md", zj, A, optimize=False)
    deg = int(nbrs_j.size)
    inv2s2 = 1.0 / (2.0 * sigma_x * sigma_x)
    for k in range(K):
        zc = Z[:, j, k]
        ak = A[k]
        r_wo = r + zc[:, None].astype(np.float64) * ak
        d0 = np.einsum("md,md->m", r_wo, r_wo, optimize=False)
        r1 = r_wo - ak
        d1 = np.einsum("md,md->m", r1, r1, optimize=False)
        m_minus = m[:, k] - zc
        if deg:
            n1 = Z[:, nbrs_j, k].sum(axis=1, dtype=np.int64)
        else:
            n1 = np.zeros(M, dtype=np.int64)
        llr = (
            np.log(np.maximum(m_minus, 1))
            - np.log(n_patches - m_minus)
            + beta * (2 * n1 - deg)
            + (d0 - d1) * inv2s2
        )
        p = sigmoid(llr)
        p = np.where(m_minus == 0, 0.0, p)
        p = p * weak[:, k]
        c = clamp_j[:, k]
        p = np.where(c >= 0, c.astype(np.float64), p)
        znew = (u_j[:, k] < p).astype(np.int8)
        delta = (znew - zc).astype(np.int64)
        if np.any(delta):
            r = r - delta[:, None].astype(np.float64) * ak
            m[:, k] += delta
            Z[:, j, k] = znew


def _poisson_logpmf(n: int, lam: float) -> float:
    if lam == 0.0:
        return 0.0 if n == 0 else -math.inf
    return n * math.log(lam) - lam - math.lgamma(n + 1)


def birth_new_factors(
    state: FactorState,
    bag: FeatureBag,
    appearance: AppearanceModel,
    j: int,
    hp: Hyperparams,
    cfg: SweepConfig,
    rng: np.random.Generator | None = None,
) -> tuple[FactorState, AppearanceModel]:
    """Propose n in [0, birth_truncation] brand-new factors at patch j.

    Candidate appearances are drawn from the prior N(0, sigma_a^2 I);
    candidate counts are weighted by Poisson(alpha / N) times the patch
    likelihood given the drawn rows. Accepted factors are appended with
    activation only at patch j, capped so k_active never exceeds k_max.
    """
    if not cfg.birth_enabled or state.k_active >= hp.k_max:
        if state.k_active >= hp.k_max and cfg.birth_enabled:
            log.debug("birth capped at k_max=%d for %s", hp.k_max, bag.image_id)
        return state, appearance
    n_patches = bag.n_patches
    lam = hp.alpha / n_patches
    if lam == 0.0:
        return state, appearance
    if rng is None:
        rng = rng_stream(hp.rng_seed, "birth", bag.image_id)

    A = appearance.weights
    d = appearance.dim
    base = bag.features[j] - state.z[j].astype(np.float64) @ A
    inv2s2 = 1.0 / (2.0 * hp.sigma_x**2)
    logw = [_poisson_logpmf(0, lam) - float(base @ base) * inv2s2]
    draws = []
    for n_new in range(1, cfg.birth_truncation + 1):
        eps = rng.standard_normal((n_new, d)) * hp.sigma_a
        resid = base - eps.sum(axis=0)
        logw.append(_poisson_logpmf(n_new, lam) - float(resid @ resid) * inv2s2)
        draws.append(eps)
    logw = np.array(logw)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    n_star = int(np.searchsorted(np.cumsum(w), rng.random(), side="right"))
    n_star = min(n_star, cfg.birth_truncation)
    if n_star == 0:
        return state, appearance

    room = hp.k_max - state.k_active
    n_add = min(n_star, room)
    if n_add < n_star:
        log.debug("birth of %d factors capped to %d by k_max", n_star, n_add)
    rows = draws[n_star - 1][:n_add]

    k_old = state.k_active
    state.widen(k_old + n_add)
    state.z[j, k_old:] = 1
    state.active_count[k_old:] = 1

    n_free = sum(1 for nm in appearance.factor_names if nm.startswith("free-"))
    names = list(appearance.factor_names) + free_factor_names(n_free, n_add)
    k_new = k_old + n_add
    cov = np.zeros((k_new, k_new))
    cov[:k_old, :k_old] = appearance.covariance
    cov[k_old:, k_old:] = np.eye(n_add) * hp.sigma_a**2
    if appearance.sample is None:
        mean = np.concatenate([appearance.mean, rows])
        sample = None
    else:
        mean = np.concatenate([appearance.mean, np.zeros((n_add, d))])
        sample = np.concatenate([appearance.sample, rows])
    grown = AppearanceModel(mean, cov, names, appearance.hyperparams, sample=sample)
    return state, grown


def sweep_image(
    state: FactorState,
    bag: FeatureBag,
    appearance: AppearanceModel,
    labels: SupervisionLabels | None,
    hp: Hyperparams,
    cfg: SweepConfig,
    sweep_index: int = 0,
    phase: str = "aux",
) -> tuple[FactorState, AppearanceModel]:
    """One full in-order pass over every (patch, factor) cell of an image.

    Deterministic given (hp.rng_seed, phase, bag.image_id, sweep_index).
    Returns the state (mutated in place) and the appearance, which grows
    when the birth move fires.
    """
    rng = rng_stream(hp.rng_seed, "sweep", phase, bag.image_id, sweep_index)
    k0 = appearance.k_active
    if state.k_active > k0:
        raise DimensionError("state has more factors than the appearance model")
    state.widen(k0)
    if bag.dim != appearance.dim:
        raise DimensionError("appearance and bag disagree on the feature dimension")
    clamp, weak = build_clamp_plan(labels, bag, appearance.factor_names, hp, k0)
    u_base = rng.random((bag.n_patches, k0))
    nbrs = bag.neighbors

    for j in range(bag.n_patches):
        k_now = appearance.k_active
        u_row = u_base[j]
        clamp_row = clamp[j]
        weak_row = weak
        if k_now > k0:
            u_row = np.concatenate([u_row, rng.random(k_now - k0)])
            clamp_row = np.concatenate([clamp_row, np.full(k_now - k0, -1, dtype=np.int8)])
            weak_row = np.concatenate([weak, np.ones(k_now - k0)])
        _sweep_patch(
            bag.features[None, ...],
            state.z[None, ...],
            state.active_count[None, ...],
            j,
            nbrs[j],
            appearance.weights,
            clamp_row[None, ...],
            weak_row[None, ...],
            u_row[None, ...],
            hp.beta,
            hp.sigma_x,
        )
        if cfg.birth_enabled:
            state, appearance = birth_new_factors(state, bag, appearance, j, hp, cfg, rng)
    return state, appearance


def _layout_key(bag: FeatureBag):
    return (bag.n_patches, bag.dim, tuple(bag.edges))


def sweep_images_batched(
    states: list[FactorState],
    bags: list[FeatureBag],
    appearance: AppearanceModel,
    labels_list: list[SupervisionLabels | None],
    hp: Hyperparams,
    cfg: SweepConfig,
    sweep_index: int = 0,
    phase: str = "aux",
) -> AppearanceModel:
    """Image-parallel schedule: the same cell scan, vectorised across
    images that share a patch layout. Requires births disabled; produces
    states identical to the serial schedule.
    """
    if cfg.birth_enabled:
        raise ValueError("the batched schedule requires birth_enabled=False")
    k = appearance.k_active
    A = appearance.weights
    groups: dict = {}
    for i, bag in enumerate(bags):
        groups.setdefault(_layout_key(bag), []).append(i)
    for idx in groups.values():
        n = bags[idx[0]].n_patches
        nbrs = bags[idx[0]].neighbors
        for i in idx:
            states[i].widen(k)
        X = np.stack([bags[i].features for i in idx])
        Z = np.stack([states[i].z for i in idx])
        m = np.stack([states[i].active_count for i in idx])
        U = np.stack(
            [
                rng_stream(hp.rng_seed, "sweep", phase, bags[i].image_id, sweep_index).random((n, k))
                for i in idx
            ]
        )
        plans = [build_clamp_plan(labels_list[i], bags[i], appearance.factor_names, hp, k) for i in idx]
        clamp = np.stack([c for c, _ in plans])
        weak = np.stack([w for _, w in plans])
        for j in range(n):
            _sweep_patch(X, Z, m, j, nbrs[j], A, clamp[:, j, :], weak, U[:, j, :], hp.beta, hp.sigma_x)
        for g, i in enumerate(idx):
            states[i].z[...] = Z[g]
            states[i].active_count[...] = m[g]
    return appearance


def run_sweep(
    states,
    bags,
    appearance,
    labels_list,
    hp,
    cfg,
    sweep_index,
    phase="aux",
    schedule="auto",
) -> AppearanceModel:
    """Dispatch one sweep over all images under the requested schedule."""
    if schedule == "auto":
        schedule = "serial" if cfg.birth_enabled else "batched"
    if schedule == "batched":
        return sweep_images_batched(states, bags, appearance, labels_list, hp, cfg, sweep_index, phase)
    if schedule != "serial":
        raise ValueError(f"unknown schedule {schedule!r}")
    for i, (bag, labels) in enumerate(zip(bags, labels_list)):
        states[i], appearance = sweep_image(
            states[i], bag, appearance, labels, hp, cfg, sweep_index, phase
        )
    return appearance


def sample_appearance(
    states: list[FactorState],
    bags: list[FeatureBag],
    hp: Hyperparams,
    cfg: SweepConfig,
    factor_names: list[str] | None = None,
    rng: np.random.Generator | None = None,
    sample: bool | None = None,
) -> AppearanceModel:
    """Conjugate posterior of the appearance matrix given all states.

        mean = (Zt'Zt + (sigma_x^2/sigma_a^2) I)^-1 Zt'Xt
        cov  = sigma_x^2 (Zt'Zt + (sigma_x^2/sigma_a^2) I)^-1

    with Zt, Xt the row-concatenation over images (states padded with
    zero columns up to the widest). When sampling is requested the model
    additionally carries a draw mean + chol(cov) @ E with E standard
    normal; the stored mean and covariance are the posterior regardless.
    """
    if not bags:
        raise ValueError("at least one image is required")
    if len(states) != len(bags):
        raise DimensionError("states and bags must align one-to-one")
    k = max(s.k_active for s in states)
    d = bags[0].dim
    zt_rows = []
    xt_rows = []
    for state, bag in zip(states, bags):
        if bag.dim != d:
            raise DimensionError("bags disagree on the feature dimension")
        z = state.z.astype(np.float64)
        if z.shape[1] < k:
            z = np.concatenate([z, np.zeros((z.shape[0], k - z.shape[1]))], axis=1)
        zt_rows.append(z)
        xt_rows.append(bag.features)
    zt = np.concatenate(zt_rows, axis=0)
    xt = np.concatenate(xt_rows, axis=0)

    ratio = hp.sigma_x**2 / hp.sigma_a**2
    gram = zt.T @ zt + ratio * np.eye(k)
    mean = np.linalg.solve(gram, zt.T @ xt)
    cov = hp.sigma_x**2 * np.linalg.inv(gram)
    cov = 0.5 * (cov + cov.T)

    if factor_names is None:
        factor_names = [f"factor-{i:03d}" for i in range(k)]
    if len(factor_names) != k:
        raise DimensionError("factor_names length must equal the factor count")

    do_sample = cfg.sample_appearance if sample is None else sample
    draw = None
    if do_sample:
        if rng is None:
            rng = rng_stream(hp.rng_seed, "appearance")
        chol = np.linalg.cholesky(cov)
        draw = mean + chol @ rng.standard_normal((k, d))
    return AppearanceModel(mean, cov, list(factor_names), hp, sample=draw)


@dataclass
class TrainingSet:
    """One auxiliary dataset: (bag, labels) pairs sharing a vocabulary."""

    items: list[tuple[FeatureBag, SupervisionLabels]]
    name: str = ""


@dataclass
class TrainResult:
    model: AppearanceModel
    states: list[FactorState]
    bags: list[FeatureBag]
    labels: list[SupervisionLabels]
    factor_names: list[str]
    log_joint_history: list[float] = field(default_factory=list)


def dataset_vocabulary(datasets: list[TrainingSet]) -> list[str]:
    """Ordered union of the attribute names annotated across datasets.

    Unnamed label vectors align positionally and get generated names;
    mixing named and unnamed vectors is ambiguous and rejected.
    """
    names: list[str] = []
    seen = set()
    positional_len: int | None = None
    any_named = False
    for ds in datasets:
        for _, labels in ds.items:
            if labels.mode == "none":
                continue
            if labels.attribute_names is not None:
                any_named = True
                for nm in labels.attribute_names:
                    if nm not in seen:
                        seen.add(nm)
                        names.append(nm)
            else:
                ka = labels.n_annotated
                if positional_len is not None and positional_len != ka:
                    raise ValueError(
                        "positional (unnamed) label vectors disagree on length; "
                        "name the annotated factors to mix vocabularies"
                    )
                positional_len = ka
    if positional_len is not None:
        if any_named:
            raise ValueError("cannot mix named and unnamed label vectors across datasets")
        names = [f"attr-{i:03d}" for i in range(positional_len)]
    return names


def _merge_vocabulary(datasets: list[TrainingSet], hp: Hyperparams) -> list[str]:
    names = dataset_vocabulary(datasets)
    k_attr = hp.k_supervised - hp.k_background
    if len(names) > k_attr:
        raise ValueError(
            f"factor vocabulary mismatch: datasets annotate {len(names)} attribute factors "
            f"but k_supervised - k_background = {k_attr}"
        )
    # supervised slots nobody annotates stay unconstrained everywhere
    names = names + [f"sup-{i:03d}" for i in range(len(names), k_attr)]
    return names + [f"bg-{i:03d}" for i in range(hp.k_background)]


def init_state(
    bag: FeatureBag,
    labels: SupervisionLabels | None,
    factor_names: list[str],
    hp: Hyperparams,
    k: int,
    phase: str = "aux",
) -> FactorState:
    """Bernoulli(0.5) start respecting every clamp the labels impose."""
    rng = rng_stream(hp.rng_seed, "init", phase, bag.image_id)
    z = (rng.random((bag.n_patches, k)) < 0.5).astype(np.int8)
    clamp, weak = build_clamp_plan(labels, bag, factor_names, hp, k)
    z[:, weak == 0.0] = 0
    forced = clamp >= 0
    z[forced] = clamp[forced]
    return FactorState.from_z(z)


def train_auxiliary(
    datasets: list[TrainingSet],
    hp: Hyperparams,
    cfg: SweepConfig,
    schedule: str = "auto",
    on_epoch=None,
) -> TrainResult:
    """Alternate factor sweeps and appearance updates over annotated data.

    Datasets may annotate different subsets of the supervised vocabulary
    (aligned by attribute name); unannotated supervised factors are left
    unconstrained for those images. Returns the model from the final
    appearance update together with the final per-image states.
    """
    datasets = [ds if isinstance(ds, TrainingSet) else TrainingSet(list(ds)) for ds in datasets]
    items = [pair for ds in datasets for pair in ds.items]
    if not items:
        raise ValueError("no training images supplied")
    if hp.k_supervised < 1:
        raise ValueError("auxiliary training requires at least one supervised factor")
    bags = [bag for bag, _ in items]
    labels_list = [labels for _, labels in items]
    ids = [bag.image_id for bag in bags]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique across the training collections")
    d = bags[0].dim
    for bag in bags:
        if bag.dim != d:
            raise DimensionError(f"feature dimension mismatch at {bag.image_id}")

    names = _merge_vocabulary(datasets, hp)
    states = [
        init_state(bag, labels, names, hp, hp.k_supervised, phase="aux")
        for bag, labels in zip(bags, labels_list)
    ]

    def posterior(epoch: int, t: int) -> AppearanceModel:
        flag = cfg.sample_appearance and t < cfg.burn_in
        return sample_appearance(
            states,
            bags,
            hp,
            cfg,
            factor_names=current_names,
            rng=rng_stream(hp.rng_seed, "appearance", "aux", epoch),
            sample=flag,
        )

    current_names = list(names)
    appearance = posterior(0, 0)
    history: list[float] = []
    for t in range(cfg.iterations):
        appearance = run_sweep(
            states, bags, appearance, labels_list, hp, cfg, t, phase="aux", schedule=schedule
        )
        current_names = appearance.factor_names
        if (t + 1) % cfg.appearance_resample_period == 0 or t == cfg.iterations - 1:
            appearance = posterior(t + 1, t)
            for s in states:
                s.widen(appearance.k_active)
            lj = log_joint(bags, states, appearance, hp)
            history.append(lj)
            if on_epoch is not None:
                on_epoch(t + 1, lj, appearance)
    return TrainResult(
        model=appearance,
        states=states,
        bags=bags,
        labels=labels_list,
        factor_names=appearance.factor_names,
        log_joint_history=history,
    )
