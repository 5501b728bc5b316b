"""Feature export: deproject dataset pixels, encode, fuse, write GFF.

Speaks the GFF container and the text-embedding index purely through
their documented byte/JSON layouts; the consumer package is never
imported.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import ModelUnavailable, PretrainedEncoder, StubEncoder
from .manifest import ExportManifest, LayoutError

GFF_MAGIC = b"GFF1"
FUSE_RADIUS = 0.002  # meters; observations closer than this are the same point


def _pose_from_json(data: dict) -> tuple[np.ndarray, np.ndarray]:
    if "rotation" in data:
        rotation = np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3)
        translation = np.asarray(data["translation"], dtype=np.float64)
    else:
        w, x, y, z = (float(data[k]) for k in ("qw", "qx", "qy", "qz"))
        n = np.sqrt(w * w + x * x + y * y + z * z)
        w, x, y, z = w / n, x / n, y / n, z / n
        rotation = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        translation = np.asarray(data["t"], dtype=np.float64)
    return rotation, translation


def _object_from_camera(ee: tuple, cam: tuple) -> tuple[np.ndarray, np.ndarray]:
    """compose(inverse(ee_pose), cam_pose) as (rotation, translation)."""
    ee_r, ee_t = ee
    cam_r, cam_t = cam
    inv_r = ee_r.T
    inv_t = -inv_r @ ee_t
    return inv_r @ cam_r, inv_r @ cam_t + inv_t


def _load_frames(manifest: ExportManifest):
    manifest.validate_dataset()
    root = manifest.dataset_dir
    poses = json.loads((root / "poses.json").read_text())
    intrinsics = json.loads((root / "intrinsics.json").read_text())
    cam = _pose_from_json(poses["cam_pose"])
    frames = []
    for entry in sorted(poses["frames"], key=lambda e: e["index"]):
        index = int(entry["index"])
        base = root / "frames" / f"{index:06d}"
        color_path = Path(f"{base}.color.png")
        depth_path = Path(f"{base}.depth.png")
        mask_path = Path(f"{base}.mask.png")
        if not (color_path.exists() and depth_path.exists() and mask_path.exists()):
            raise LayoutError(f"missing image files for frame {index}")
        frames.append(
            {
                "index": index,
                "color": np.asarray(Image.open(color_path).convert("RGB"), dtype=np.uint8),
                "depth": np.asarray(Image.open(depth_path), dtype=np.uint16),
                "mask": np.asarray(Image.open(mask_path)) > 0,
                "ee": _pose_from_json(entry["ee_pose"]),
            }
        )
    if not frames:
        raise LayoutError(f"no frames listed in {root / 'poses.json'}")
    return frames, cam, intrinsics


def _deproject(frame: dict, cam: tuple, intrinsics: dict) -> tuple[np.ndarray, np.ndarray]:
    valid = frame["mask"] & (frame["depth"] > 0)
    v_idx, u_idx = np.nonzero(valid)
    depth_m = frame["depth"][v_idx, u_idx].astype(np.float64) / 1000.0
    x = (u_idx - float(intrinsics["cx"])) * depth_m / float(intrinsics["fx"])
    y = (v_idx - float(intrinsics["cy"])) * depth_m / float(intrinsics["fy"])
    camera_points = np.column_stack([x, y, depth_m])
    rotation, translation = _object_from_camera(frame["ee"], cam)
    points = camera_points @ rotation.T + translation
    pixels = np.column_stack([u_idx, v_idx]).astype(np.int64)
    return points, pixels


class _PointFuser:
    """Accumulates per-point feature sums, merging observations within 2 mm."""

    def __init__(self, n_blocks: int, dims: list[int]):
        self.positions: list[np.ndarray] = []
        self.sums = [[] for _ in range(n_blocks)]
        self.counts: list[int] = []
        self.dims = dims
        self.cells: dict[tuple[int, int, int], list[int]] = {}

    def _nearest(self, point: np.ndarray) -> int | None:
        key = tuple(np.floor(point / FUSE_RADIUS).astype(np.int64))
        best, best_d2 = None, FUSE_RADIUS * FUSE_RADIUS
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for idx in self.cells.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        d2 = float(((self.positions[idx] - point) ** 2).sum())
                        if d2 <= best_d2:
                            best, best_d2 = idx, d2
        return best

    def add(self, point: np.ndarray, features: list[np.ndarray]) -> None:
        idx = self._nearest(point)
        if idx is None:
            idx = len(self.positions)
            self.positions.append(point)
            self.counts.append(0)
            for block, feature in enumerate(features):
                self.sums[block].append(feature.astype(np.float64).copy())
            key = tuple(np.floor(point / FUSE_RADIUS).astype(np.int64))
            self.cells.setdefault(key, []).append(idx)
        else:
            for block, feature in enumerate(features):
                self.sums[block][idx] += feature
        self.counts[idx] += 1

    def finish(self) -> tuple[np.ndarray, list[np.ndarray]]:
        positions = np.asarray(self.positions, dtype=np.float32)
        blocks = []
        for block_sums in self.sums:
            stacked = np.asarray(block_sums, dtype=np.float64)
            norms = np.linalg.norm(stacked, axis=1, keepdims=True)
            blocks.append((stacked / np.maximum(norms, 1e-12)).astype(np.float32))
        return positions, blocks


def _write_gff_atomic(path: Path, positions: np.ndarray, dino: np.ndarray, clip_levels: list[np.ndarray]) -> None:
    header = {
        "n": int(len(positions)),
        "d_dino": int(dino.shape[1]),
        "d_clip": int(clip_levels[0].shape[1]),
        "levels": 3,
        "has_labels": False,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(GFF_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(positions.astype("<f4").tobytes())
        fh.write(dino.astype("<f4").tobytes())
        for level in clip_levels:
            fh.write(level.astype("<f4").tobytes())
    os.replace(tmp, path)


def _make_encoder(manifest: ExportManifest, stub: bool):
    if stub:
        return StubEncoder()
    return PretrainedEncoder(manifest.dino_model, manifest.clip_model, manifest.crop_scales)


def export_features(manifest: ExportManifest, stub: bool = False, encoder=None) -> Path:
    """Encode every frame's masked pixels and write the fused GFF.

    Each deprojected point takes the features of its source pixel; points
    observed by several frames (matched within 2 mm) are averaged and
    renormalized. Returns the output path.
    """
    if encoder is None:
        encoder = _make_encoder(manifest, stub)
    frames, cam, intrinsics = _load_frames(manifest)

    fuser = None
    for frame in frames:
        points, pixels = _deproject(frame, cam, intrinsics)
        if len(points) == 0:
            continue
        dino = encoder.pixel_features(frame["color"], pixels, "dino", None)
        clip = [
            encoder.pixel_features(frame["color"], pixels, "clip", level) for level in range(3)
        ]
        if fuser is None:
            dims = [dino.shape[1]] + [c.shape[1] for c in clip]
            fuser = _PointFuser(n_blocks=4, dims=dims)
        for row in range(len(points)):
            fuser.add(points[row], [dino[row], clip[0][row], clip[1][row], clip[2][row]])
    if fuser is None or not fuser.positions:
        raise LayoutError("dataset produced no deprojectable pixels")

    positions, blocks = fuser.finish()
    _write_gff_atomic(manifest.output_gff, positions, blocks[0], blocks[1:])
    return manifest.output_gff


def export_text_embeddings(queries: list[str], manifest: ExportManifest, stub: bool = False, encoder=None) -> Path:
    """Write unit-norm text embeddings as a JSON index plus .f32 sidecars."""
    if not queries:
        raise ValueError("query list must be non-empty")
    if manifest.text_output is None:
        raise ValueError("manifest has no text_output path")
    if encoder is None:
        encoder = _make_encoder(manifest, stub)
    vectors = encoder.text_features(list(queries))

    path = manifest.text_output
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (text, vector) in enumerate(zip(queries, vectors)):
        sidecar = f"{path.stem}.{i:03d}.f32"
        tmp = path.parent / (sidecar + ".tmp")
        tmp.write_bytes(vector.astype("<f4").tobytes())
        os.replace(tmp, path.parent / sidecar)
        entries.append({"text": text, "path": sidecar})
    payload = {"d": int(vectors.shape[1]), "entries": entries}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


__all__ = [
    "export_features",
    "export_text_embeddings",
    "ExportManifest",
    "LayoutError",
    "ModelUnavailable",
]
