"""Token-factorized latent world models at desk scale: a known synthetic
generator with numeric identifiability checks, a factorized world model
trained with reconstruction, factorized-KL, mutual-information, and gated
sparsity objectives, and evaluation of block identifiability, open-loop
imagination, intervention attribution, and dynamics-only adaptation."""

__version__ = "0.1.0"

from .datagen import (Dataset, GenerativeSpec, GroundTruthModel, Task,
                      Trajectory, build_dataset, build_ground_truth,
                      enumerate_tasks, load_dataset, sample_trajectory,
                      save_dataset, split_tasks)
from .estimator import WorldModelEstimator
from .evaluation import (EvalConfig, R2Matrix, assumption_report, fit_krr_r2,
                         imagination_r2, intervention_report, r2_matrix)
from .mi import MiSchedule, cosine_anneal
from .model import LatentState, WorldModel, WorldModelConfig
from .rng import RngState
from .sparsity import GatedMask, SparsityConfig, apply_gated_mask
from .tensor import Tensor, grad_check
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Dataset", "GenerativeSpec", "GroundTruthModel", "Task", "Trajectory",
    "build_dataset", "build_ground_truth", "enumerate_tasks", "load_dataset",
    "sample_trajectory", "save_dataset", "split_tasks",
    "WorldModelEstimator",
    "EvalConfig", "R2Matrix", "assumption_report", "fit_krr_r2",
    "imagination_r2", "intervention_report", "r2_matrix",
    "MiSchedule", "cosine_anneal",
    "LatentState", "WorldModel", "WorldModelConfig",
    "RngState",
    "GatedMask", "SparsityConfig", "apply_gated_mask",
    "Tensor", "grad_check",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
