"""Multi-view edit propagation for posed RGB-D datasets.

A 2D image editor is applied to a few automatically chosen key views; depth
and poses carry those edits to every other view, and an averaged two-pass
blend cleans up the seams.
"""
from .editing import EditorConfig, EditorError, EditorHandle, EditRequest
from .estimators import EditPropagator, MaskPropagator
from .geometry import FilterPolicy, build_correspondences, propagate_mask
from .metrics import MetricReport, ThumbnailEmbedder
from .pipeline import PipelineError, RunConfig, run_all, run_stage1
from .propagation import PropagationConfig, key_view_weight, select_next_key_view
from .scene import (CameraIntrinsics, DatasetManifest, RigidPose, ViewRecord, gen_synthetic, load_dataset,
                    preset, save_dataset)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "DatasetManifest", "EditPropagator", "EditRequest", "EditorConfig", "EditorError",
    "EditorHandle", "FilterPolicy", "MaskPropagator", "MetricReport", "PipelineError", "PropagationConfig",
    "RigidPose", "RunConfig", "ThumbnailEmbedder", "ViewRecord", "build_correspondences", "gen_synthetic",
    "key_view_weight", "load_dataset", "preset", "propagate_mask", "run_all", "run_stage1", "save_dataset",
    "select_next_key_view",
]
