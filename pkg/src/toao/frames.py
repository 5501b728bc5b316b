"""RGB-D capture data model for the static-camera / moving-object setup.

Covers depth-coverage mask retention, session preprocessing, pinhole
deprojection into the object-attached frame, and the on-disk dataset layout:

    frames/%06d.color.png   8-bit RGB
    frames/%06d.depth.png   16-bit grayscale, millimeters, 0 = invalid
    frames/%06d.mask.png    8-bit, nonzero = object
    poses.json              {"cam_pose": ..., "frames": [{"index", "ee_pose"}]}
    intrinsics.json         {"fx","fy","cx","cy","width","height"}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Pose, compose, inverse

DEFAULT_DEPTH_RANGE = (0.1, 2.0)  # meters
DEFAULT_RETENTION_THRESHOLD = 0.7


class EmptyMask(Exception):
    """The object mask of a frame contains no pixels (segmentation failure)."""


class NoFramesRetained(Exception):
    """Every frame of a session failed the depth-coverage retention test."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Intrinsics":
        return cls(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
        )


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB-D capture with object mask and poses at capture time.

    ``depth`` is 16-bit millimeters with 0 marking invalid pixels.
    ``cam_pose`` is constant across a session (static camera); ``ee_pose``
    is the end-effector pose when the frame was taken.
    """

    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    ee_pose: Pose
    cam_pose: Pose
    intrinsics: Intrinsics
    index: int

    def __post_init__(self) -> None:
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.color.shape != shape + (3,):
            raise ValueError(f"color must be {shape + (3,)}, got {self.color.shape}")
        if self.depth.shape != shape:
            raise ValueError(f"depth must be {shape}, got {self.depth.shape}")
        if self.mask.shape != shape:
            raise ValueError(f"mask must be {shape}, got {self.mask.shape}")
        if self.depth.dtype != np.uint16:
            raise ValueError("depth must be uint16 millimeters")


@dataclass(frozen=True)
class DepthCoverage:
    """Depth validity statistics of one frame's object mask."""

    valid_pixels: int
    mask_pixels: int
    ratio: float
    threshold: float

    def __post_init__(self) -> None:
        if not (0 <= self.valid_pixels <= self.mask_pixels):
            raise ValueError("valid pixel count must lie in [0, mask pixel count]")


def _valid_depth(depth: np.ndarray, valid_range: tuple[float, float]) -> np.ndarray:
    lo, hi = valid_range
    if not (0 < lo < hi):
        raise ValueError("valid_range must satisfy 0 < min < max")
    lo_mm, hi_mm = lo * 1000.0, hi * 1000.0
    return (depth > 0) & (depth >= lo_mm) & (depth <= hi_mm)


def depth_coverage(
    frame: Frame,
    valid_range: tuple[float, float] = DEFAULT_DEPTH_RANGE,
    threshold: float = DEFAULT_RETENTION_THRESHOLD,
) -> DepthCoverage:
    """Fraction of mask pixels whose depth is nonzero and within range.

    Raises EmptyMask when the mask is empty, which signals a segmentation
    failure for the frame rather than a coverage of zero.
    """
    mask = frame.mask.astype(bool)
    mask_pixels = int(mask.sum())
    if mask_pixels == 0:
        raise EmptyMask(f"frame {frame.index} has an empty object mask")
    valid_pixels = int((_valid_depth(frame.depth, valid_range) & mask).sum())
    return DepthCoverage(
        valid_pixels=valid_pixels,
        mask_pixels=mask_pixels,
        ratio=valid_pixels / mask_pixels,
        threshold=threshold,
    )


def retain_mask(cov: DepthCoverage) -> bool:
    """Keep the frame iff coverage reaches the threshold (inclusive)."""
    return cov.ratio >= cov.threshold


def _apply_mask(frame: Frame) -> Frame:
    mask = frame.mask.astype(bool)
    color = np.where(mask[..., None], frame.color, 0).astype(frame.color.dtype)
    depth = np.where(mask, frame.depth, 0).astype(np.uint16)
    return Frame(
        color=color, depth=depth, mask=mask,
        ee_pose=frame.ee_pose, cam_pose=frame.cam_pose,
        intrinsics=frame.intrinsics, index=frame.index,
    )


def preprocess_session(
    frames: list[Frame],
    threshold: float = DEFAULT_RETENTION_THRESHOLD,
    valid_range: tuple[float, float] = DEFAULT_DEPTH_RANGE,
) -> list[Frame]:
    """Drop frames with poor depth coverage and zero color/depth outside the mask.

    Frames with an empty mask count as not retained. Output order matches
    input order. Raises NoFramesRetained when nothing survives.
    """
    if not frames:
        raise ValueError("frame list must be non-empty")
    cam = frames[0].cam_pose
    for frame in frames[1:]:
        if not (np.array_equal(frame.cam_pose.rotation, cam.rotation)
                and np.array_equal(frame.cam_pose.translation, cam.translation)):
            raise ValueError("all frames of a session must share one camera pose")

    retained = []
    for frame in frames:
        try:
            cov = depth_coverage(frame, valid_range, threshold)
        except EmptyMask:
            continue
        if retain_mask(cov):
            retained.append(_apply_mask(frame))
    if not retained:
        raise NoFramesRetained(f"all {len(frames)} frames fell below coverage {threshold}")
    return retained


@dataclass(frozen=True, eq=False)
class DeprojectedPoints:
    """Deprojection output: positions with their source pixels.

    ``positions`` is (N, 3) meters in the object-attached frame and
    ``pixels`` is (N, 2) integer (u, v) provenance, row-aligned.
    """

    positions: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


def deproject(frame: Frame, valid_range: tuple[float, float] | None = None) -> DeprojectedPoints:
    """Lift mask pixels with valid depth into the object-attached frame.

    Pixel (u, v) with depth d meters maps to the camera-frame point
    ((u-cx)*d/fx, (v-cy)*d/fy, d) and is then carried into the frame that
    moves with the grasped object via compose(inverse(ee_pose), cam_pose),
    so clouds from different frames of the moving object align.

    ``valid_range`` optionally restricts depth to a metric interval;
    by default any nonzero depth deprojects.
    """
    ins = frame.intrinsics
    valid = frame.mask.astype(bool) & (frame.depth > 0)
    if valid_range is not None:
        valid &= _valid_depth(frame.depth, valid_range)
    v_idx, u_idx = np.nonzero(valid)
    if len(v_idx) == 0:
        return DeprojectedPoints(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))

    d = frame.depth[v_idx, u_idx].astype(np.float64) / 1000.0
    x = (u_idx - ins.cx) * d / ins.fx
    y = (v_idx - ins.cy) * d / ins.fy
    camera_points = np.column_stack([x, y, d])

    to_object = compose(inverse(frame.ee_pose), frame.cam_pose)
    positions = to_object.apply(camera_points)
    pixels = np.column_stack([u_idx, v_idx]).astype(np.int64)
    return DeprojectedPoints(positions=positions, pixels=pixels)


# --- dataset directory layout ---

def _frame_paths(root: Path, index: int) -> tuple[Path, Path, Path]:
    base = root / "frames"
    return (
        base / f"{index:06d}.color.png",
        base / f"{index:06d}.depth.png",
        base / f"{index:06d}.mask.png",
    )


def write_dataset(root: str | Path, frames: list[Frame]) -> None:
    """Write frames plus poses.json / intrinsics.json under ``root``."""
    if not frames:
        raise ValueError("frame list must be non-empty")
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for frame in frames:
        color_path, depth_path, mask_path = _frame_paths(root, frame.index)
        Image.fromarray(frame.color, mode="RGB").save(color_path)
        Image.fromarray(frame.depth.astype(np.uint16)).save(depth_path)
        Image.fromarray((frame.mask.astype(np.uint8) * 255)).save(mask_path)

    poses = {
        "cam_pose": frames[0].cam_pose.to_json_dict(),
        "frames": [
            {"index": f.index, "ee_pose": f.ee_pose.to_json_dict()} for f in frames
        ],
    }
    (root / "poses.json").write_text(json.dumps(poses, indent=2, sort_keys=True))
    (root / "intrinsics.json").write_text(
        json.dumps(frames[0].intrinsics.to_json_dict(), indent=2, sort_keys=True)
    )


def load_dataset(root: str | Path) -> list[Frame]:
    """Read a dataset directory back into Frame objects, ordered by index."""
    root = Path(root)
    poses_path = root / "poses.json"
    intrinsics_path = root / "intrinsics.json"
    if not poses_path.exists() or not intrinsics_path.exists():
        raise FileNotFoundError(f"{root} is not a dataset directory")
    poses = json.loads(poses_path.read_text())
    intrinsics = Intrinsics.from_json_dict(json.loads(intrinsics_path.read_text()))
    cam_pose = Pose.from_json_dict(poses["cam_pose"])

    frames = []
    for entry in sorted(poses["frames"], key=lambda e: e["index"]):
        index = int(entry["index"])
        color_path, depth_path, mask_path = _frame_paths(root, index)
        color = np.asarray(Image.open(color_path).convert("RGB"), dtype=np.uint8)
        depth = np.asarray(Image.open(depth_path), dtype=np.uint16)
        mask = np.asarray(Image.open(mask_path)) > 0
        frames.append(
            Frame(
                color=color, depth=depth, mask=mask,
                ee_pose=Pose.from_json_dict(entry["ee_pose"]),
                cam_pose=cam_pose, intrinsics=intrinsics, index=index,
            )
        )
    if not frames:
        raise ValueError(f"{root} contains no frames")
    return frames
