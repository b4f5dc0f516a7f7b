"""Checkpoint-merging toolkit: transfer task-specific abilities between
fine-tuned models that share a base model.

The main entry points are :func:`align_layers` to pair up tensors across
checkpoints, :func:`merge_checkpoints` to run one of the four engines
(subspace-projected merging, task arithmetic, sign-consensus merging, or
mask-and-rescale merging), and the ``ipmerge`` CLI.
"""

from .checkpoint import (
    AlignmentError,
    AlignmentSpec,
    CheckpointFormatError,
    LayerTriple,
    NamedTensorMap,
    align_layers,
    load_checkpoint,
    save_checkpoint,
    serialize_checkpoint,
)
from .engines import (
    MergeError,
    MergeRecipe,
    MergeReport,
    content_hash,
    emr_merge,
    ip_merge,
    merge_checkpoints,
    task_arithmetic_merge,
    ties_merge,
    verify_merge,
)
from .linalg import (
    NonFiniteError,
    SvdResult,
    nuclear_norm,
    spectral_norm,
    svd,
    weighted_right_projector,
)
from .report import AnalysisReport, analyze_triples
from .subspace import (
    SelectionConfig,
    SimilarityProfile,
    analyze_pair,
    corresponding_angles,
    importance_scores,
    rescale_factor,
    select_layers,
)
from .taskvector import TaskVector, compute_task_vector, trace_value

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "AlignmentSpec",
    "AnalysisReport",
    "CheckpointFormatError",
    "LayerTriple",
    "MergeError",
    "MergeRecipe",
    "MergeReport",
    "NamedTensorMap",
    "NonFiniteError",
    "SelectionConfig",
    "SimilarityProfile",
    "SvdResult",
    "TaskVector",
    "align_layers",
    "analyze_pair",
    "analyze_triples",
    "compute_task_vector",
    "content_hash",
    "corresponding_angles",
    "emr_merge",
    "importance_scores",
    "ip_merge",
    "load_checkpoint",
    "merge_checkpoints",
    "nuclear_norm",
    "rescale_factor",
    "save_checkpoint",
    "select_layers",
    "serialize_checkpoint",
    "spectral_norm",
    "svd",
    "task_arithmetic_merge",
    "ties_merge",
    "trace_value",
    "verify_merge",
    "weighted_right_projector",
]
