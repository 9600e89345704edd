"""Geo-RepNet: depth-guided attention priors on a re-parameterizable RepVGG backbone."""

from .config import DGPGConfig, GEMAConfig, GeoRepNetConfig, RunConfig, TrainConfig, micro_config
from .data import ArrayDataset, generate_dataset, generate_sample, load_dataset
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    FormatError,
    GeoRepNetError,
    NonFiniteError,
    UsageError,
)
from .repvgg import GeoRepNet, RepVGGBlock, fuse_block, reparameterize_model
from .tensor import Tape, Tensor, backward
from .tensorfile import Checkpoint, read_tensor, write_tensor
from .train import evaluate, gradient_check, train

__version__ = "0.1.0"
