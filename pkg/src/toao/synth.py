"""Deterministic synthetic scenes: labeled multi-part objects with analytic
feature anchors, point-splat depth rendering, and wrist-sweep trajectories.

All randomness flows through PCG64 generators seeded from the scene's
``rng_seed`` via SeedSequence([rng_seed, stream]); stream 0 drives field
sampling, stream 1 drives rendering dropout, so the same spec always
produces bit-identical outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .extraction import TextEmbedding, save_text_embeddings
from .field import SemanticPointField, save_field
from .frames import Frame, Intrinsics, write_dataset
from .geometry import Pose, compose, inverse

DEFAULT_TRAJECTORY_STEPS = 156


class ObjectOutOfView(Exception):
    """No object point projects into the image for some frame."""


@dataclass(frozen=True, eq=False)
class PartSpec:
    """One labeled surface primitive with its feature anchors.

    ``shape`` is "sphere" (size: radius), "cylinder" (size: radius, height;
    axis along local z, caps included) or "box" (size: full edge lengths).
    ``clip_anchors`` is (3, d_clip), one unit row per semantic level.
    """

    name: str
    shape: str
    size: tuple[float, ...]
    pose: Pose
    clip_anchors: np.ndarray
    dino_anchor: np.ndarray
    count: int

    def __post_init__(self) -> None:
        if self.shape not in ("sphere", "cylinder", "box"):
            raise ValueError(f"unknown shape {self.shape!r}")
        expected = {"sphere": 1, "cylinder": 2, "box": 3}[self.shape]
        if len(self.size) != expected:
            raise ValueError(f"{self.shape} needs {expected} dimensions, got {len(self.size)}")
        if any(s <= 0 for s in self.size):
            raise ValueError("dimensions must be positive")
        if self.count <= 0:
            raise ValueError("count must be positive")
        clip = np.asarray(self.clip_anchors, dtype=np.float64)
        dino = np.asarray(self.dino_anchor, dtype=np.float64)
        if clip.ndim != 2 or clip.shape[0] != 3:
            raise ValueError("clip_anchors must be (3, d_clip)")
        if not np.allclose(np.linalg.norm(clip, axis=1), 1.0, atol=1e-6):
            raise ValueError("clip anchors must be unit norm")
        if abs(np.linalg.norm(dino) - 1.0) > 1e-6:
            raise ValueError("dino anchor must be unit norm")

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "shape": self.shape,
            "size": list(self.size),
            "pose": self.pose.to_json_dict(),
            "clip_anchors": [[float(v) for v in row] for row in self.clip_anchors],
            "dino_anchor": [float(v) for v in self.dino_anchor],
            "count": self.count,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PartSpec":
        return cls(
            name=data["name"],
            shape=data["shape"],
            size=tuple(float(s) for s in data["size"]),
            pose=Pose.from_json_dict(data["pose"]),
            clip_anchors=np.asarray(data["clip_anchors"], dtype=np.float64),
            dino_anchor=np.asarray(data["dino_anchor"], dtype=np.float64),
            count=int(data["count"]),
        )


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Full synthetic capture description.

    ``noise_sigma`` is the length of the random perturbation added to each
    feature anchor before renormalization, so within-part feature cosine
    stays near 1 - sigma^2 regardless of feature dimension.
    """

    parts: tuple[PartSpec, ...]
    trajectory: tuple[Pose, ...]
    cam_pose: Pose
    intrinsics: Intrinsics
    rng_seed: int
    noise_sigma: float = 0.05
    distractors: tuple[PartSpec, ...] = ()
    object_text: str = "object"
    depth_dropout: float = 0.0

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValueError("scene needs at least one part")
        if not self.trajectory:
            raise ValueError("trajectory must be non-empty")
        if not (0.0 <= self.depth_dropout < 1.0):
            raise ValueError("depth_dropout must lie in [0, 1)")
        dims = {(p.dino_anchor.shape[0], p.clip_anchors.shape[1]) for p in self.all_parts}
        if len(dims) > 1:
            raise ValueError("all parts must share feature dimensions")

    @property
    def all_parts(self) -> tuple[PartSpec, ...]:
        return self.parts + self.distractors

    def to_json_dict(self) -> dict:
        return {
            "parts": [p.to_json_dict() for p in self.parts],
            "distractors": [p.to_json_dict() for p in self.distractors],
            "trajectory": [p.to_json_dict() for p in self.trajectory],
            "cam_pose": self.cam_pose.to_json_dict(),
            "intrinsics": self.intrinsics.to_json_dict(),
            "rng_seed": self.rng_seed,
            "noise_sigma": self.noise_sigma,
            "object_text": self.object_text,
            "depth_dropout": self.depth_dropout,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SceneSpec":
        trajectory = data["trajectory"]
        if isinstance(trajectory, dict):
            if trajectory.get("kind") != "wrist_roll":
                raise ValueError(f"unknown trajectory kind {trajectory.get('kind')!r}")
            base = Pose.from_json_dict(trajectory["base"])
            poses = wrist_roll_trajectory(int(trajectory.get("count", DEFAULT_TRAJECTORY_STEPS)), base)
        else:
            poses = tuple(Pose.from_json_dict(p) for p in trajectory)
        return cls(
            parts=tuple(PartSpec.from_json_dict(p) for p in data["parts"]),
            distractors=tuple(PartSpec.from_json_dict(p) for p in data.get("distractors", [])),
            trajectory=poses,
            cam_pose=Pose.from_json_dict(data["cam_pose"]),
            intrinsics=Intrinsics.from_json_dict(data["intrinsics"]),
            rng_seed=int(data["rng_seed"]),
            noise_sigma=float(data.get("noise_sigma", 0.05)),
            object_text=data.get("object_text", "object"),
            depth_dropout=float(data.get("depth_dropout", 0.0)),
        )


def load_scene(path: str | Path) -> SceneSpec:
    return SceneSpec.from_json_dict(json.loads(Path(path).read_text()))


def save_scene(spec: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_json_dict(), indent=1, sort_keys=True))


def wrist_roll_trajectory(count: int, base: Pose, axis=(0.0, 0.0, 1.0)) -> tuple[Pose, ...]:
    """End-effector poses sweeping a full roll about the given wrist axis."""
    if count <= 0:
        raise ValueError("count must be positive")
    return tuple(
        compose(base, Pose.from_axis_angle(axis, 2.0 * np.pi * k / count))
        for k in range(count)
    )


def _stream(spec: SceneSpec, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.rng_seed, stream])))


def _sample_sphere(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return radius * direction


def _sample_cylinder(rng: np.random.Generator, n: int, radius: float, height: float) -> np.ndarray:
    lateral_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius * radius
    total = lateral_area + 2.0 * cap_area
    picks = rng.uniform(0.0, total, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-height / 2.0, height / 2.0, size=n)
    rad = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))

    points = np.empty((n, 3))
    on_side = picks < lateral_area
    on_top = (~on_side) & (picks < lateral_area + cap_area)
    points[on_side] = np.column_stack(
        [radius * np.cos(theta[on_side]), radius * np.sin(theta[on_side]), z[on_side]]
    )
    for cap_mask, cap_z in ((on_top, height / 2.0), (~on_side & ~on_top, -height / 2.0)):
        points[cap_mask] = np.column_stack(
            [
                rad[cap_mask] * np.cos(theta[cap_mask]),
                rad[cap_mask] * np.sin(theta[cap_mask]),
                np.full(cap_mask.sum(), cap_z),
            ]
        )
    return points


def _sample_box(rng: np.random.Generator, n: int, sx: float, sy: float, sz: float) -> np.ndarray:
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    points = np.empty((n, 3))
    half = np.array([sx, sy, sz]) / 2.0
    for f in range(6):
        sel = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        coords = np.zeros((int(sel.sum()), 3))
        other = [a for a in range(3) if a != axis]
        coords[:, axis] = sign * half[axis]
        coords[:, other[0]] = u[sel] * [sx, sy, sz][other[0]]
        coords[:, other[1]] = v[sel] * [sx, sy, sz][other[1]]
        points[sel] = coords
    return points


def _sample_part_surface(rng: np.random.Generator, part: PartSpec) -> np.ndarray:
    if part.shape == "sphere":
        local = _sample_sphere(rng, part.count, part.size[0])
    elif part.shape == "cylinder":
        local = _sample_cylinder(rng, part.count, *part.size)
    else:
        local = _sample_box(rng, part.count, *part.size)
    return part.pose.apply(local)


def _noisy_unit(rng: np.random.Generator, anchor: np.ndarray, sigma: float, n: int) -> np.ndarray:
    direction = rng.normal(size=(n, len(anchor)))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    noisy = anchor[None, :] + sigma * direction
    return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)


def generate_field(spec: SceneSpec) -> SemanticPointField:
    """Sample labeled surface points with perturbed anchor features.

    Parts are consumed in declaration order (parts, then distractors);
    per part the draws are positions, then DINO noise, then the three
    CLIP levels, which pins the random stream layout.
    """
    rng = _stream(spec, 0)
    positions, dinos, clips, labels = [], [], [], []
    for label, part in enumerate(spec.all_parts):
        positions.append(_sample_part_surface(rng, part))
        dinos.append(_noisy_unit(rng, part.dino_anchor, spec.noise_sigma, part.count))
        clips.append(
            np.stack(
                [
                    _noisy_unit(rng, part.clip_anchors[level], spec.noise_sigma, part.count)
                    for level in range(3)
                ]
            )
        )
        labels.append(np.full(part.count, label, dtype=np.uint16))
    return SemanticPointField(
        positions=np.concatenate(positions),
        dino=np.concatenate(dinos),
        clip=np.concatenate(clips, axis=1),
        labels=np.concatenate(labels),
    )


def label_names(spec: SceneSpec) -> dict[int, str]:
    """Label id to part name, matching generate_field's label assignment."""
    return {i: part.name for i, part in enumerate(spec.all_parts)}


def query_embeddings(spec: SceneSpec) -> list[TextEmbedding]:
    """The scene's synthetic language dictionary.

    The object text maps to the shared coarse-level anchor of the first
    part; each part or distractor name maps to its own fine-level anchor.
    """
    entries = [TextEmbedding(vector=spec.parts[0].clip_anchors[0], text=spec.object_text)]
    for part in spec.all_parts:
        entries.append(TextEmbedding(vector=part.clip_anchors[2], text=part.name))
    return entries


def render_frames(spec: SceneSpec, dropout: float | None = None) -> list[Frame]:
    """Point-splat depth render of the moving object from the static camera.

    Every field point is projected per trajectory pose; each hit pixel
    keeps the nearest depth (z-buffer) in 16-bit millimeters and joins the
    mask. ``dropout`` zeroes that fraction of masked depth pixels to
    exercise coverage-based retention.
    """
    if dropout is None:
        dropout = spec.depth_dropout
    if not (0.0 <= dropout < 1.0):
        raise ValueError("dropout must lie in [0, 1)")
    field = generate_field(spec)
    points_object = field.positions.astype(np.float64)
    world_from_camera = spec.cam_pose
    camera_from_world = inverse(world_from_camera)
    ins = spec.intrinsics
    dropout_rng = _stream(spec, 1)

    frames = []
    for index, ee_pose in enumerate(spec.trajectory):
        world_points = ee_pose.apply(points_object)
        cam_points = camera_from_world.apply(world_points)
        z = cam_points[:, 2]
        in_front = z > 1e-6
        u = np.round(ins.fx * cam_points[:, 0] / np.where(in_front, z, 1.0) + ins.cx).astype(np.int64)
        v = np.round(ins.fy * cam_points[:, 1] / np.where(in_front, z, 1.0) + ins.cy).astype(np.int64)
        visible = in_front & (u >= 0) & (u < ins.width) & (v >= 0) & (v < ins.height)
        if not visible.any():
            raise ObjectOutOfView(f"no point projects into frame {index}")

        flat = v[visible] * ins.width + u[visible]
        depth_mm = np.round(z[visible] * 1000.0)
        zbuf = np.full(ins.width * ins.height, np.inf)
        np.minimum.at(zbuf, flat, depth_mm)
        hit = np.isfinite(zbuf)
        depth = np.where(hit, zbuf, 0.0)
        depth = np.clip(depth, 0, np.iinfo(np.uint16).max).astype(np.uint16).reshape(ins.height, ins.width)
        mask = hit.reshape(ins.height, ins.width)

        if dropout > 0.0:
            drop = dropout_rng.random(mask.shape) < dropout
            depth = np.where(mask & drop, 0, depth).astype(np.uint16)

        color = np.zeros((ins.height, ins.width, 3), dtype=np.uint8)
        color[mask] = (200, 200, 200)
        frames.append(
            Frame(
                color=color, depth=depth, mask=mask,
                ee_pose=ee_pose, cam_pose=world_from_camera,
                intrinsics=ins, index=index,
            )
        )
    return frames


def write_scene_outputs(spec: SceneSpec, out_dir: str | Path) -> None:
    """Materialize a scene: dataset layout, GFF field, labels, query embeddings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = render_frames(spec)
    write_dataset(out_dir, frames)
    save_field(generate_field(spec), out_dir / "field.gff")
    names = label_names(spec)
    (out_dir / "labels.json").write_text(
        json.dumps({str(k): v for k, v in names.items()}, indent=2, sort_keys=True)
    )
    save_text_embeddings(out_dir / "text_embeddings.json", query_embeddings(spec))


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def flower_scene(
    rng_seed: int = 7,
    with_distractor: bool = False,
    noise_sigma: float = 0.05,
    steps: int = DEFAULT_TRAJECTORY_STEPS,
    points_per_part: int = 1000,
    d_dino: int = 64,
    d_clip: int = 512,
) -> SceneSpec:
    """Three-part flower analogue: blossom sphere, stem cylinder, leaf slab.

    Parts share one coarse-level anchor (whole-object semantics) and carry
    distinct fine-level anchors; DINO anchors are mutually similar
    perturbations of one object direction. The optional distractor reuses
    the stem's fine-level anchor while being spatially disconnected and
    DINO-dissimilar, which is the failure mode the staged extraction
    exists to reject.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([rng_seed, 2])))
    object_clip = _unit(rng, d_clip)
    object_dino = _unit(rng, d_dino)

    def anchors(dino_spread: float) -> tuple[np.ndarray, np.ndarray]:
        mid = object_clip + 0.5 * _unit(rng, d_clip)
        fine = _unit(rng, d_clip)
        clip = np.stack([object_clip, mid / np.linalg.norm(mid), fine])
        dino = object_dino + dino_spread * _unit(rng, d_dino)
        return clip, dino / np.linalg.norm(dino)

    blossom_clip, blossom_dino = anchors(0.25)
    stem_clip, stem_dino = anchors(0.18)
    leaf_clip, leaf_dino = anchors(0.12)

    parts = (
        PartSpec(
            name="blossom", shape="sphere", size=(0.05,),
            pose=Pose.from_translation((0.0, 0.0, 0.13)),
            clip_anchors=blossom_clip, dino_anchor=blossom_dino, count=points_per_part,
        ),
        PartSpec(
            name="stem", shape="cylinder", size=(0.01, 0.22),
            pose=Pose.identity(),
            clip_anchors=stem_clip, dino_anchor=stem_dino, count=points_per_part,
        ),
        PartSpec(
            name="leaf", shape="box", size=(0.06, 0.025, 0.002),
            pose=Pose.from_translation((0.035, 0.0, -0.02)),
            clip_anchors=leaf_clip, dino_anchor=leaf_dino, count=points_per_part,
        ),
    )

    distractors: tuple[PartSpec, ...] = ()
    if with_distractor:
        clutter_clip = np.stack([_unit(rng, d_clip), _unit(rng, d_clip), stem_clip[2]])
        distractors = (
            PartSpec(
                name="clutter", shape="box", size=(0.08, 0.08, 0.08),
                pose=Pose.from_translation((0.3, 0.0, 0.0)),
                clip_anchors=clutter_clip, dino_anchor=_unit(rng, d_dino),
                count=points_per_part,
            ),
        )

    base = compose(
        Pose.from_translation((0.0, 0.0, 0.6)),
        Pose.from_axis_angle((1.0, 0.0, 0.0), 0.25),
    )
    cam_pose = Pose.from_axis_angle((0.0, 1.0, 0.0), 0.02, translation=(0.02, -0.01, -0.05))
    return SceneSpec(
        parts=parts,
        distractors=distractors,
        trajectory=wrist_roll_trajectory(steps, base),
        cam_pose=cam_pose,
        intrinsics=Intrinsics(fx=320.0, fy=320.0, cx=160.0, cy=120.0, width=320, height=240),
        rng_seed=rng_seed,
        noise_sigma=noise_sigma,
        object_text="sunflowers",
    )
