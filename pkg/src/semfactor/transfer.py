"""Cross-domain adaptation: reuse a trained appearance posterior as the
prior for an unlabelled image set.

The target posterior couples all factors through the full K x K prior
covariance:

    cov_t  = sigma_x^2 (Zt'Zt + sigma_x^2 inv(cov_s))^-1
    mean_t = cov_t (Zt'Xt / sigma_x^2 + inv(cov_s) mean_s)

An uninformative prior (zero mean, sigma_a^2 I) reduces this to the
source-phase posterior, and an empty target returns the prior untouched,
so direct transfer and training-from-scratch are both special cases of
the same update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    AppearanceModel,
    DimensionError,
    FactorState,
    FeatureBag,
    Hyperparams,
    free_factor_names,
    log_joint,
    rng_stream,
)
from .gibbs import SweepConfig, init_state, run_sweep


def extend_prior(source: AppearanceModel, k_target: int, hp: Hyperparams) -> AppearanceModel:
    """Grow a source model to k_target factors with fresh free factors.

    Transferred rows keep the source mean; the new block gets zero mean
    and sigma_a^2 I covariance, block-diagonal with the source covariance.
    """
    k_src = source.k_active
    if k_target < k_src:
        raise ValueError(f"k_target={k_target} is smaller than the source model ({k_src})")
    if k_target > hp.k_max:
        raise ValueError(f"k_target={k_target} exceeds k_max={hp.k_max}")
    if k_target == k_src:
        return source
    d = source.dim
    n_new = k_target - k_src
    mean = np.concatenate([source.mean, np.zeros((n_new, d))], axis=0)
    cov = np.zeros((k_target, k_target))
    cov[:k_src, :k_src] = source.covariance
    cov[k_src:, k_src:] = np.eye(n_new) * hp.sigma_a**2
    n_free = sum(1 for nm in source.factor_names if nm.startswith("free-"))
    names = list(source.factor_names) + free_factor_names(n_free, n_new)
    return AppearanceModel(mean, cov, names, hp)


def uninformative_prior(
    k: int, d: int, hp: Hyperparams, factor_names: list[str] | None = None
) -> AppearanceModel:
    """Zero-mean, sigma_a^2 I prior; the no-transfer starting point."""
    names = list(factor_names) if factor_names is not None else free_factor_names(0, k)
    return AppearanceModel(np.zeros((k, d)), np.eye(k) * hp.sigma_a**2, names, hp)


def adapt_appearance(
    states: list[FactorState],
    bags: list[FeatureBag],
    prior: AppearanceModel,
    hp: Hyperparams,
) -> AppearanceModel:
    """Posterior of the appearance on target data under the source prior.

    Exactly returns the prior when the target sufficient statistics are
    all zero (empty or all-off target).
    """
    k = prior.k_active
    d = prior.dim
    zt_rows = []
    xt_rows = []
    for state, bag in zip(states, bags):
        if bag.dim != d:
            raise DimensionError("target feature dimension does not match the prior")
        if state.k_active != k:
            raise DimensionError("target state width does not match the prior")
        zt_rows.append(state.z.astype(np.float64))
        xt_rows.append(bag.features)
    if zt_rows:
        zt = np.concatenate(zt_rows, axis=0)
        xt = np.concatenate(xt_rows, axis=0)
        gram = zt.T @ zt
        cross = zt.T @ xt
    else:
        gram = np.zeros((k, k))
        cross = np.zeros((k, d))
    if not gram.any() and not cross.any():
        return AppearanceModel(
            prior.mean.copy(), prior.covariance.copy(), list(prior.factor_names), hp
        )
    try:
        prior_prec = np.linalg.inv(prior.covariance)
    except np.linalg.LinAlgError as exc:
        raise ValueError("prior covariance is singular") from exc
    prior_prec = 0.5 * (prior_prec + prior_prec.T)
    sx2 = hp.sigma_x**2
    posterior_gram = gram + sx2 * prior_prec
    mean = np.linalg.solve(posterior_gram, cross + sx2 * prior_prec @ prior.mean)
    cov = sx2 * np.linalg.inv(posterior_gram)
    cov = 0.5 * (cov + cov.T)
    return AppearanceModel(mean, cov, list(prior.factor_names), hp)


@dataclass
class AdaptResult:
    model: AppearanceModel
    states: list[FactorState]
    bags: list[FeatureBag]
    trailing: list[list[FactorState]]
    factor_names: list[str]
    log_joint_history: list[float] = field(default_factory=list)

    def trailing_mean(self, i: int) -> np.ndarray:
        """(N, K) mean activation of image i over the retained sweeps."""
        stack = np.stack([s.z for s in self.trailing[i]]).astype(np.float64)
        return stack.mean(axis=0)


def adapt_target(
    target_bags: list[FeatureBag],
    source: AppearanceModel,
    hp: Hyperparams,
    cfg: SweepConfig,
    k_target: int | None = None,
    schedule: str = "auto",
    on_epoch=None,
) -> AdaptResult:
    """Unsupervised factor inference on target data with prior-anchored
    appearance updates.

    States start Bernoulli(0.5) on all k_target factors; each sweep is
    followed (per appearance_resample_period) by the prior-anchored
    posterior update. With the period larger than the iteration count the
    appearance never moves and the result is direct transfer of the
    extended source model. The last retain_samples sweeps are kept per
    image for heat-map accumulation.
    """
    if not target_bags:
        raise ValueError("no target images supplied")
    ids = [bag.image_id for bag in target_bags]
    if len(set(ids)) != len(ids):
        raise ValueError("target image ids must be unique")
    d = target_bags[0].dim
    if source.dim != d:
        raise DimensionError(
            f"target feature dimension {d} does not match the source model ({source.dim})"
        )
    k = source.k_active if k_target is None else int(k_target)
    prior = extend_prior(source, k, hp)

    labels_list = [None] * len(target_bags)
    states = [
        init_state(bag, None, prior.factor_names, hp, k, phase="target") for bag in target_bags
    ]
    appearance = prior
    trailing: list[list[FactorState]] = [[] for _ in target_bags]
    keep_from = cfg.iterations - cfg.retain_samples
    history: list[float] = []

    for t in range(cfg.iterations):
        appearance = run_sweep(
            states, target_bags, appearance, labels_list, hp, cfg, t,
            phase="target", schedule=schedule,
        )
        if (t + 1) % cfg.appearance_resample_period == 0:
            if appearance.k_active > prior.k_active:  # births grew the free block
                prior = extend_prior(prior, appearance.k_active, hp)
            for s in states:
                s.widen(prior.k_active)
            updated = adapt_appearance(states, target_bags, prior, hp)
            if cfg.sample_appearance and t < cfg.burn_in:
                rng = rng_stream(hp.rng_seed, "appearance", "target", t + 1)
                chol = np.linalg.cholesky(updated.covariance)
                draw = updated.mean + chol @ rng.standard_normal(updated.mean.shape)
                updated = AppearanceModel(
                    updated.mean, updated.covariance, updated.factor_names, hp, sample=draw
                )
            appearance = updated
            lj = log_joint(target_bags, states, appearance, hp)
            history.append(lj)
            if on_epoch is not None:
                on_epoch(t + 1, lj, appearance)
        if t >= keep_from:
            for i, s in enumerate(states):
                trailing[i].append(s.copy())
    return AdaptResult(
        model=appearance,
        states=states,
        bags=target_bags,
        trailing=trailing,
        factor_names=appearance.factor_names,
        log_joint_history=history,
    )
