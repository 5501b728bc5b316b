"""Task-oriented affordance extraction on semantic 3D point fields."""

from .evaluation import EvalReport, evaluate, localization_hit, point_iou
from .extraction import (
    ExtractionConfig,
    ExtractionResult,
    TextEmbedding,
    dino_foreground,
    extract,
    flood_fill,
    relevancy,
)
from .field import (
    SemanticPoint,
    SemanticPointField,
    attach_features,
    build_field,
    load_field,
    nearest_neighbors,
    radius_neighbors,
    save_field,
)
from .frames import (
    DepthCoverage,
    Frame,
    Intrinsics,
    deproject,
    depth_coverage,
    preprocess_session,
    retain_mask,
)
from .geometry import (
    Pose,
    TaskContext,
    affordance_transform,
    compose,
    inverse,
    object_pose_from_camera,
    toao_pose,
)
from .synth import PartSpec, SceneSpec, flower_scene, generate_field, render_frames
from .taskllm import Backend, TaskQuery, build_prompt, parse_answer, resolve_part

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "DepthCoverage",
    "EvalReport",
    "ExtractionConfig",
    "ExtractionResult",
    "Frame",
    "Intrinsics",
    "PartSpec",
    "Pose",
    "SceneSpec",
    "SemanticPoint",
    "SemanticPointField",
    "TaskContext",
    "TaskQuery",
    "TextEmbedding",
    "affordance_transform",
    "attach_features",
    "build_field",
    "build_prompt",
    "compose",
    "deproject",
    "depth_coverage",
    "dino_foreground",
    "evaluate",
    "extract",
    "flood_fill",
    "flower_scene",
    "generate_field",
    "inverse",
    "load_field",
    "localization_hit",
    "nearest_neighbors",
    "object_pose_from_camera",
    "parse_answer",
    "point_iou",
    "preprocess_session",
    "radius_neighbors",
    "relevancy",
    "render_frames",
    "resolve_part",
    "retain_mask",
    "save_field",
    "toao_pose",
]
