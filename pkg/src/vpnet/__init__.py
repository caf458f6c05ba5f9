"""Variable projection networks: adaptive Hermite VP layers, baseline networks and training."""

from .data_io import LabeledDataset, load_checkpoint, load_dataset, load_heartbeats, save_checkpoint, save_dataset
from .errors import ConfigError, ContractError, DataFormatError, DivergenceError, UnsupportedVersionError, VPNetError
from .hermite import (
    SampleGrid,
    SampledBasis,
    VpParams,
    adaptive_hermite,
    classical_hermite,
    condition_number,
    condition_sweep,
    feasible_region_check,
    orthogonality_radius,
    support_radius,
)
from .nn import LayerSpec, Network, cnn_specs, fcnn_specs, vpnet_specs
from .synthdata import SynthConfig
from .training import TrainConfig, TrainReport, evaluate, grid_search, train
from .vp import PinvBundle, pseudoinverse, vp_fit

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset",
    "load_checkpoint",
    "load_dataset",
    "load_heartbeats",
    "save_checkpoint",
    "save_dataset",
    "ConfigError",
    "ContractError",
    "DataFormatError",
    "DivergenceError",
    "UnsupportedVersionError",
    "VPNetError",
    "SampleGrid",
    "SampledBasis",
    "VpParams",
    "adaptive_hermite",
    "classical_hermite",
    "condition_number",
    "condition_sweep",
    "feasible_region_check",
    "orthogonality_radius",
    "support_radius",
    "LayerSpec",
    "Network",
    "cnn_specs",
    "fcnn_specs",
    "vpnet_specs",
    "SynthConfig",
    "TrainConfig",
    "TrainReport",
    "evaluate",
    "grid_search",
    "train",
    "PinvBundle",
    "pseudoinverse",
    "vp_fit",
]
