"""Rigid-body poses and the transform chains used throughout the pipeline.

Frames follow the parent/child convention: a pose maps points from its
child frame into its parent frame via ``x_parent = R @ x_child + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

ORTHONORMAL_TOL = 1e-9


def _orthonormal_defect(rotation: NDArray[np.float64]) -> float:
    return float(np.abs(rotation @ rotation.T - np.eye(3)).max())


def _polar_project(matrix: NDArray[np.float64]) -> NDArray[np.float64]:
    """Nearest rotation matrix (Frobenius) with det +1."""
    u, _, vt = np.linalg.svd(matrix)
    if np.linalg.det(u @ vt) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
    return u @ vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid SE(3) transform: orthonormal rotation plus translation in meters."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64)
        if rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
        if translation.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {translation.shape}")
        if _orthonormal_defect(rotation) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be proper (det +1)")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, xyz) -> "Pose":
        return cls(np.eye(3), np.asarray(xyz, dtype=np.float64))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rodrigues rotation about a unit axis (radians), plus translation."""
        axis = np.asarray(axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise ValueError("axis must be nonzero")
        x, y, z = axis / norm
        k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        rotation = np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
        return cls(_polar_project(rotation), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_quaternion(cls, qw: float, qx: float, qy: float, qz: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Unit quaternion (w, x, y, z) to rotation matrix, plus translation."""
        q = np.array([qw, qx, qy, qz], dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise ValueError("quaternion must be nonzero")
        w, x, y, z = q / norm
        rotation = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(_polar_project(rotation), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ValueError(f"expected 4x4 homogeneous matrix, got {matrix.shape}")
        if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0], atol=ORTHONORMAL_TOL):
            raise ValueError("bottom row must be [0, 0, 0, 1]")
        return cls(matrix[:3, :3].copy(), matrix[:3, 3].copy())

    @property
    def matrix(self) -> NDArray[np.float64]:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> NDArray[np.float64]:
        """Map points from the child frame into the parent frame.

        Accepts a single 3-vector or an (N, 3) array.
        """
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (3,) or (N, 3), got {points.shape}")
        return points @ self.rotation.T + self.translation

    def to_json_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Pose":
        if "rotation" in data:
            rotation = np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3)
            return cls(rotation, np.asarray(data["translation"], dtype=np.float64))
        if "qw" in data:
            return cls.from_quaternion(
                data["qw"], data["qx"], data["qy"], data["qz"],
                np.asarray(data["t"], dtype=np.float64),
            )
        raise ValueError("pose dict needs either 'rotation'/'translation' or 'qw'..'qz'/'t'")


@dataclass(frozen=True)
class TaskContext:
    """Task label and in-gripper object pose that parameterize an affordance transform."""

    task: str
    grip_pose: Pose

    def __post_init__(self) -> None:
        if not self.task:
            raise ValueError("task must be non-empty")


@dataclass(frozen=True, eq=False)
class AffordanceTransform(Pose):
    """Object-in-end-effector pose tagged with the task context it answers."""

    context: TaskContext


def compose(a: Pose, b: Pose) -> Pose:
    """Chain two poses: applying the result equals applying ``b`` then ``a``."""
    rotation = a.rotation @ b.rotation
    if _orthonormal_defect(rotation) > ORTHONORMAL_TOL:
        rotation = _polar_project(rotation)
    translation = a.rotation @ b.translation + a.translation
    return Pose(rotation, translation)


def inverse(p: Pose) -> Pose:
    """Pose q with compose(p, q) = identity."""
    rotation = p.rotation.T
    return Pose(rotation, -(rotation @ p.translation))


def object_pose_from_camera(w_c: Pose, c_o: Pose) -> Pose:
    """Object pose in the world frame from camera pose and object-in-camera pose."""
    return compose(w_c, c_o)


def affordance_transform(w_e: Pose, w_o: Pose, ctx: TaskContext) -> AffordanceTransform:
    """Object pose expressed in the end-effector frame, tagged with the task context.

    Satisfies compose(w_e, result) == w_o.
    """
    rel = compose(inverse(w_e), w_o)
    return AffordanceTransform(rel.rotation, rel.translation, ctx)


def toao_pose(field_centroid, w_e: Pose, w_c: Pose) -> Pose:
    """Pose of a target-part centroid in the end-effector frame.

    The centroid must already be expressed in the world frame; ``w_c`` is
    part of the call surface because centroids originate from camera-frame
    deprojection, but the world-to-end-effector mapping depends only on
    ``w_e``. A point region carries no orientation, so the rotation is
    identity and only the translation is meaningful.
    """
    del w_c
    centroid = np.asarray(field_centroid, dtype=np.float64)
    if centroid.shape != (3,):
        raise ValueError(f"centroid must be a 3-vector, got {centroid.shape}")
    return Pose(np.eye(3), inverse(w_e).apply(centroid))
