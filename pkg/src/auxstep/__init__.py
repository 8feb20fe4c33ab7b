"""Depth estimation with alternating auxiliary-task training.

A small numpy-only research stack: reverse-mode autodiff, a frozen-encoder
depth model with per-task heads, AdamW with a warmup-cosine schedule, the
two-phase joint update that splits the decoder learning rate between the
depth and auxiliary objectives, synthetic scene generation, and the
evaluation / sweep tooling around it.
"""
from .autodiff import (Tensor, ShapeError, backward, finite_difference_grad,
                       no_grad, relative_error, zero_grad)
from .data_io import (Dataset, DatasetManifest, FormatError, IGNORE_ID,
                      MixedAuxSource, Sample, derive_seed, load_manifest,
                      mldc_export, read_bundle, read_tensor, subset_fraction,
                      valid_depth_mask, write_bundle, write_tensor)
from .evaluate import (EvalReport, absrel_image, error_diff_map, error_map,
                       evaluate_model, gain_percent, sequential_mean)
from .losses import (depth_loss, mldc_loss, mldc_prediction, mldc_target,
                     reconstruction_mse, segmentation_ce, slc_loss)
from .model import (AUX_TASKS, DEPTH_TASK, FrozenEncoder, HeadSpec, Model,
                    build_head_specs)
from .optim import AdamW, LRPlan, PlainGradient, Schedule, effective_lr, schedule_lr
from .synthgen import SceneSpec, benchmark_spec, generate_dataset, render_scene
from .trainer import (TrainConfig, baseline_step, joint_step, mean_stderr,
                      model_from_checkpoint, resume_run, run_seeds, train,
                      train_baseline, train_joint)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "backward", "finite_difference_grad", "no_grad",
    "relative_error", "zero_grad",
    "Dataset", "DatasetManifest", "FormatError", "IGNORE_ID", "MixedAuxSource",
    "Sample", "derive_seed", "load_manifest", "mldc_export", "read_bundle",
    "read_tensor", "subset_fraction", "valid_depth_mask", "write_bundle",
    "write_tensor",
    "EvalReport", "absrel_image", "error_diff_map", "error_map",
    "evaluate_model", "gain_percent", "sequential_mean",
    "depth_loss", "mldc_loss", "mldc_prediction", "mldc_target",
    "reconstruction_mse", "segmentation_ce", "slc_loss",
    "AUX_TASKS", "DEPTH_TASK", "FrozenEncoder", "HeadSpec", "Model",
    "build_head_specs",
    "AdamW", "LRPlan", "PlainGradient", "Schedule", "effective_lr", "schedule_lr",
    "SceneSpec", "benchmark_spec", "generate_dataset", "render_scene",
    "TrainConfig", "baseline_step", "joint_step", "mean_stderr",
    "model_from_checkpoint", "resume_run", "run_seeds", "train",
    "train_baseline", "train_joint",
    "__version__",
]
