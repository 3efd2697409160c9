"""Preprocessing, augmentation, schedules and the synthesis / segmentation training loops."""

from oarseg.training.config import (
    ConfigError,
    PreprocessConfig,
    SegTrainConfig,
    SemanticConfig,
    SynthesisConfig,
    config_to_dict,
    desk_segmentation,
    desk_synthesis,
    dump_config,
    load_config,
    full_segmentation,
    full_synthesis,
    parse_override,
)
from oarseg.training.data import slices_from_volumes, unpaired_pools
from oarseg.training.preprocess import (
    SliceSample,
    augment,
    hflip,
    normalize,
    preprocess_annotated_slice,
    preprocess_slice,
    random_crop,
    rescale,
)
from oarseg.training.segmentation import (
    InstanceModel,
    SemanticModel,
    SynthesisInputs,
    instance_spec,
    load_instance_model,
    train_segmentation,
    train_semantic,
)
from oarseg.training.state import (
    TrainingDiverged,
    TrainState,
    deterministic_mode,
    lr_schedule,
    param_digest,
)
from oarseg.training.synthesis import (
    build_synthesis_state,
    class_weights_for,
    load_synthesis_generators,
    moving_average,
    train_synthesis,
)

__all__ = [
    "ConfigError",
    "InstanceModel",
    "PreprocessConfig",
    "SegTrainConfig",
    "SemanticConfig",
    "SemanticModel",
    "SliceSample",
    "SynthesisConfig",
    "SynthesisInputs",
    "TrainState",
    "TrainingDiverged",
    "augment",
    "build_synthesis_state",
    "class_weights_for",
    "config_to_dict",
    "desk_segmentation",
    "desk_synthesis",
    "deterministic_mode",
    "dump_config",
    "hflip",
    "instance_spec",
    "load_config",
    "load_instance_model",
    "load_synthesis_generators",
    "lr_schedule",
    "moving_average",
    "normalize",
    "full_segmentation",
    "full_synthesis",
    "param_digest",
    "parse_override",
    "preprocess_annotated_slice",
    "preprocess_slice",
    "random_crop",
    "rescale",
    "slices_from_volumes",
    "train_segmentation",
    "train_semantic",
    "train_synthesis",
    "unpaired_pools",
]
