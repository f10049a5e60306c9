"""Multi-stain slide classification pipeline with fusion and bootstrap evaluation."""

__version__ = "0.1.0"

from .aggregate import BootstrapConfig, SlidePrediction, aggregate_slide, slide_score_ci
from .evaluation import (
    CohortEntry,
    CohortPredictions,
    DecisionThreshold,
    RocResult,
    auroc,
    auroc_ci,
    evaluate_cohort,
    roc_curve,
    select_threshold,
    significance_vs_random,
)
from .fusion import (
    FusedPrediction,
    FusionConfig,
    FusionMode,
    ModelProfile,
    calibrate_score,
    fuse,
    hierarchical_predict,
)
from .scoring import (
    FEATURE_DIM,
    JitterParams,
    ScorerModel,
    TileScore,
    TrainConfig,
    color_jitter,
    extract_features,
    import_external_scores,
    sample_tiles_per_slide,
    score_tile,
    train_baseline_scorer,
)
from .synth import CohortManifest, SiteProfile, SynthConfig, generate_cohorts, generate_slide
from .tess import (
    AnnotationMask,
    Magnification,
    SlideImage,
    Stain,
    TileRef,
    downscale,
    mag_resolution,
    tessellate,
    tile_physical_edge,
)

__all__ = [
    "AnnotationMask",
    "BootstrapConfig",
    "CohortEntry",
    "CohortManifest",
    "CohortPredictions",
    "DecisionThreshold",
    "FEATURE_DIM",
    "FusedPrediction",
    "FusionConfig",
    "FusionMode",
    "JitterParams",
    "Magnification",
    "ModelProfile",
    "RocResult",
    "ScorerModel",
    "SiteProfile",
    "SlideImage",
    "SlidePrediction",
    "SynthConfig",
    "Stain",
    "TileRef",
    "TileScore",
    "TrainConfig",
    "aggregate_slide",
    "auroc",
    "auroc_ci",
    "calibrate_score",
    "color_jitter",
    "downscale",
    "evaluate_cohort",
    "extract_features",
    "fuse",
    "generate_cohorts",
    "generate_slide",
    "hierarchical_predict",
    "import_external_scores",
    "mag_resolution",
    "roc_curve",
    "sample_tiles_per_slide",
    "score_tile",
    "select_threshold",
    "significance_vs_random",
    "slide_score_ci",
    "tessellate",
    "tile_physical_edge",
    "train_baseline_scorer",
]
