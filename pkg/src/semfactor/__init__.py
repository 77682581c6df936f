"""Factorial patch-attribute inference with cross-domain transfer,
re-identification matching and description-based search."""

from .core import (
    AppearanceModel,
    DataFormatError,
    DimensionError,
    FactorState,
    FeatureBag,
    Hyperparams,
    Patch,
    SupervisionLabels,
    UnknownFactorError,
    log_joint,
    rng_stream,
    validate_bag,
)
from .gibbs import (
    SweepConfig,
    TrainingSet,
    TrainResult,
    apply_supervision,
    auxiliary_config,
    birth_new_factors,
    factor_conditional,
    sample_appearance,
    sweep_image,
    target_config,
    train_auxiliary,
)
from .heatmaps import GridDescriptor, HeatMapStack, accumulate_heatmaps, grid_descriptor, grid_windows
from .retrieval import (
    QueryGroup,
    QueryTerm,
    cmc_curve,
    image_distance,
    parse_query,
    patch_distance,
    pr_curve,
    rank_images,
    score_query,
)
from .synth import SyntheticSpec, SynthResult, synth_generate
from .transfer import AdaptResult, adapt_appearance, adapt_target, extend_prior, uninformative_prior

__version__ = "0.1.0"
