"""Mix Transformer segmentation models, from tensors up."""

from .analysis import ErfMap, compute_erf, erf_radius, save_erf
from .configs import (MitConfig, StageConfig, builtin_config, config_from_text,
                      config_to_text, micro_config, resolution_plan)
from .decoder import decode, decoder_param_count
from .encoder import FeaturePyramid, encoder_forward
from .errors import (CheckpointError, CheckpointMismatch, ConfigError, DataError,
                     MitsegError, NumericError, ShapeError)
from .estimator import SegformerSegmenter
from .model import (CostReport, SegformerModel, build, count_macs, count_params,
                    load_checkpoint, save_checkpoint)
from .params import ParamStore
from .tensor import Tape, Tensor
from .train import (ConfusionMatrix, SegSample, TrainSpec, adamw_step, augment,
                    ce_loss, evaluate, load_dataset, make_toy_dataset, poly_lr,
                    predict, save_dataset, sliding_window_infer, train_toy)

__all__ = [
    "MitConfig", "StageConfig", "builtin_config", "micro_config",
    "resolution_plan", "config_to_text", "config_from_text",
    "Tape", "Tensor", "ParamStore",
    "FeaturePyramid", "encoder_forward", "decode", "decoder_param_count",
    "SegformerModel", "CostReport", "build", "count_params", "count_macs",
    "save_checkpoint", "load_checkpoint",
    "ErfMap", "compute_erf", "erf_radius", "save_erf",
    "SegSample", "TrainSpec", "ConfusionMatrix", "poly_lr", "adamw_step",
    "augment", "ce_loss", "evaluate", "predict", "sliding_window_infer",
    "train_toy", "make_toy_dataset", "save_dataset", "load_dataset",
    "SegformerSegmenter",
    "MitsegError", "ConfigError", "ShapeError", "DataError",
    "CheckpointError", "CheckpointMismatch", "NumericError",
]
