from .accounting import LayerCount, count_layers, count_macs, path_macs, segment_macs
from .branchy import (
    BranchyConfig,
    BranchyGhostNet,
    BuildError,
    InferenceOutcome,
    build_branchy_ghostnet,
    build_from_config,
    to_model_input,
)
from .checkpoint import (
    CheckpointFormatError,
    IncompleteCheckpointError,
    TopologyMismatchError,
    load_weights,
    save_weights,
)
from .ghost import GhostBottleneck, GhostBottleneckCfg, GhostModule, GhostModuleCfg, SqueezeExcite

__all__ = [
    "BranchyConfig", "BranchyGhostNet", "BuildError", "CheckpointFormatError", "GhostBottleneck",
    "GhostBottleneckCfg", "GhostModule", "GhostModuleCfg", "IncompleteCheckpointError", "InferenceOutcome",
    "LayerCount", "SqueezeExcite", "TopologyMismatchError", "build_branchy_ghostnet", "build_from_config",
    "count_layers", "count_macs", "load_weights", "path_macs", "save_weights", "segment_macs", "to_model_input",
]
