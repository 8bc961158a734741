"""Promptable object segmentation with foveated multi-resolution sampling."""

from .geometry import (
    AugmentationSpec,
    GaussianPrompt,
    decompose_covariance,
    from_relative,
    mask_moments,
    perturb_prompt,
    to_relative,
)
from .sampler import (
    Patch,
    PatchBudget,
    PatchSpec,
    SamplerConfig,
    SpatialHashGrid,
    allocate_budget,
    extract_patch,
    extract_patches,
    grid_probe,
    sample_patch_specs,
)
from .model import (
    ModelConfig,
    Segmenter,
    TokenSequence,
    build_model,
    param_count,
)
from .training import (
    GroupStats,
    Scene,
    SparsePixelBatch,
    TrainConfig,
    distance_group_map,
    select_sparse_pixels,
    sparse_bce,
    train_model,
    train_step,
    update_group_stats,
)
from .inference import (
    Box,
    InferenceConfig,
    MaskResult,
    five_sigma_box,
    hierarchical_refine,
    iou,
    predict_dense,
    segment,
)
from .datagen import SceneConfig, SceneRecord, gen_scene, read_manifest, write_manifest
from .evaluation import EvalConfig, EvalReport, evaluate_dataset

__version__ = "0.1.0"
