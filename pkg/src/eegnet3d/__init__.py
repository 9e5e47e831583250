"""Efficient 3-D CNNs and XNOR-popcount binarized variants for EEG emotion recognition."""

__version__ = "0.1.0"

from .models import ModelConfig, build_bi_eegnet, build_eegnet, build_model, count_params, memory_bits, preset
from .ops import Conv3dSpec
from .pipeline import PipelineConfig, synth_dataset
from .tensor import Rng, read_ntf, seeded_rng, write_ntf
from .training import Metrics, TrainConfig, evaluate, train

__all__ = [
    "__version__",
    "ModelConfig",
    "Conv3dSpec",
    "PipelineConfig",
    "TrainConfig",
    "Metrics",
    "Rng",
    "build_eegnet",
    "build_bi_eegnet",
    "build_model",
    "count_params",
    "memory_bits",
    "preset",
    "synth_dataset",
    "seeded_rng",
    "read_ntf",
    "write_ntf",
    "evaluate",
    "train",
]
