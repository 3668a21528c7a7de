"""Cross-layer feature self-attention module with a verifiable core.

Subpackages: :mod:`cfsam.tensor` (autograd engine), :mod:`cfsam.module`
(the attention pipeline), :mod:`cfsam.flops` (analytic cost accounting),
:mod:`cfsam.harness` (synthetic tasks and toy training),
:mod:`cfsam.fixtures` (portable binary tensors), :mod:`cfsam.cli`.
"""

from cfsam.backend import ACTIVE_BACKEND, available_backends
from cfsam.module import (
    SSD300_SHAPES,
    CfsamConfig,
    CfsamWeights,
    FeaturePyramid,
    PartitionedSequence,
    cfsam_forward,
    combine,
    flatten_concat,
    fuse_restore,
    init_weights,
    local_extract,
    partition,
    transformer_unit,
)
from cfsam.tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ACTIVE_BACKEND",
    "available_backends",
    "SSD300_SHAPES",
    "CfsamConfig",
    "CfsamWeights",
    "FeaturePyramid",
    "PartitionedSequence",
    "Tensor",
    "backward",
    "cfsam_forward",
    "combine",
    "flatten_concat",
    "fuse_restore",
    "init_weights",
    "local_extract",
    "partition",
    "transformer_unit",
]
