"""Diffusion-based generation, prediction, and synthesis of battery
state-of-health degradation curves."""

from .data import (
    CapacityMatrix,
    Dataset,
    DatasetItem,
    DegradationCurve,
    FeatureStats,
    GriddedCurve,
    build_capacity_matrix,
    generate_synthetic_cell,
    grid_cycles,
    load_dataset,
    make_synthetic_dataset,
    save_dataset_json,
    scale_first_cycle,
    split_dataset,
    to_grid,
)
from .denoiser import (
    DenoiserConfig,
    DenoiserModel,
    count_parameters,
    denoise,
    encode_condition,
    init_model,
    position_encoding,
    timestep_embedding,
)
from .diffusion import (
    GuidanceConfig,
    NoiseSchedule,
    forward_diffuse,
    guided_epsilon,
    make_schedule,
    posterior_mean,
    sample,
    sample_batch,
    sample_step,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .forest import ForestConfig, RandomForest, forest_predict, train_forest
from .prediction import (
    EolConfig,
    PredictionResult,
    eval_rul,
    eval_soh,
    predict,
    rul_from_soh,
    rul_uncertainty,
    soh_rmse,
)
from .reports import EvalReport, SynthReport
from .synthesis import (
    LatentMap,
    eval_augmentation,
    fid,
    fit_pca,
    frechet_distance,
    precision_recall,
    synthesize_dataset,
)
from .training import TrainConfig, TrainReport, loss_simple, run_training, train

__version__ = "0.1.0"
