"""Semantic point field: positions with DINO and three-level CLIP features.

The on-disk GFF container is little-endian:

    magic "GFF1" | header-length u32 | UTF-8 JSON header
    {"n", "d_dino", "d_clip", "levels": 3, "has_labels"}
    positions n*3 float32 | dino n*d_dino float32
    clip level 0..2, each n*d_clip float32 | labels n*u16 (optional)

Row i of every block describes the same point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GFF_MAGIC = b"GFF1"
CLIP_LEVELS = 3
UNIT_NORM_TOL = 1e-5
_ZERO_NORM = 1e-8


class ZeroFeature(Exception):
    """A feature vector has (near-)zero norm and cannot be normalized."""


class DimMismatch(Exception):
    """Points disagree on feature dimensions."""


class CountMismatch(Exception):
    """A feature file does not match the number of positions."""


class FormatError(Exception):
    """A feature file is malformed; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class VersionMismatch(Exception):
    """The file magic names an unsupported container version."""


@dataclass(frozen=True, eq=False)
class SemanticPoint:
    """One field point: position plus unit-norm DINO and per-level CLIP features."""

    position: np.ndarray
    dino: np.ndarray
    clip: np.ndarray  # (3, d_clip), one row per semantic level
    label: int | None = None


class _VoxelGrid:
    """Uniform hash grid over point positions for exact radius / k-NN queries."""

    def __init__(self, positions: np.ndarray, cell_size: float):
        if cell_size <= 0 or not np.isfinite(cell_size):
            raise ValueError("cell size must be positive and finite")
        self.positions = positions
        self.cell_size = cell_size
        keys = np.floor(positions / cell_size).astype(np.int64)
        cells: dict[tuple[int, int, int], list[int]] = {}
        for i, key in enumerate(map(tuple, keys)):
            cells.setdefault(key, []).append(i)
        self.cells = {k: np.asarray(v, dtype=np.int64) for k, v in cells.items()}
        self.key_min = keys.min(axis=0)
        self.key_max = keys.max(axis=0)

    def _candidates_in_box(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        lo_key = np.maximum(np.floor(lo / self.cell_size).astype(np.int64), self.key_min)
        hi_key = np.minimum(np.floor(hi / self.cell_size).astype(np.int64), self.key_max)
        if (lo_key > hi_key).any():
            return np.zeros(0, dtype=np.int64)
        chunks = []
        box_cells = int(np.prod(hi_key - lo_key + 1))
        if box_cells > len(self.cells):
            # scanning occupied cells is cheaper than enumerating the box
            for key, hit in self.cells.items():
                if all(lo_key[a] <= key[a] <= hi_key[a] for a in range(3)):
                    chunks.append(hit)
        else:
            for ix in range(lo_key[0], hi_key[0] + 1):
                for iy in range(lo_key[1], hi_key[1] + 1):
                    for iz in range(lo_key[2], hi_key[2] + 1):
                        hit = self.cells.get((ix, iy, iz))
                        if hit is not None:
                            chunks.append(hit)
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(chunks)

    def radius(self, center: np.ndarray, r: float) -> np.ndarray:
        """Indices with ||p - center|| <= r, ascending by index."""
        candidates = self._candidates_in_box(center - r, center + r)
        if len(candidates) == 0:
            return candidates
        delta = self.positions[candidates] - center
        hits = candidates[np.einsum("ij,ij->i", delta, delta) <= r * r]
        return np.sort(hits)

    def knn(self, center: np.ndarray, k: int) -> np.ndarray:
        """k nearest indices ordered by (distance, index); exact."""
        n = len(self.positions)
        k = min(k, n)
        r = self.cell_size
        span = float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))
        limit = max(span, self.cell_size) + float(
            np.linalg.norm(center - self.positions.mean(axis=0))
        )
        while True:
            hits = self.radius(center, r)
            if len(hits) >= k or r > 2 * limit:
                break
            r *= 2.0
        if len(hits) < k:
            hits = np.arange(n, dtype=np.int64)
        delta = self.positions[hits] - center
        dist = np.sqrt(np.einsum("ij,ij->i", delta, delta))
        order = np.lexsort((hits, dist))
        return hits[order[:k]]


class SemanticPointField:
    """Immutable array-backed point field with a spatial index.

    Positions and features are stored as float32 so file round trips are
    exact; queries and statistics are computed in float64.
    """

    def __init__(
        self,
        positions: np.ndarray,
        dino: np.ndarray,
        clip: np.ndarray,
        labels: np.ndarray | None = None,
        cell_size: float | None = None,
    ):
        positions = np.ascontiguousarray(positions, dtype=np.float32)
        dino = np.ascontiguousarray(dino, dtype=np.float32)
        clip = np.ascontiguousarray(clip, dtype=np.float32)
        n = len(positions)
        if n == 0:
            raise ValueError("field must contain at least one point")
        if positions.shape != (n, 3):
            raise ValueError(f"positions must be (n, 3), got {positions.shape}")
        if not np.isfinite(positions).all():
            raise ValueError("positions must be finite")
        if dino.ndim != 2 or dino.shape[0] != n:
            raise DimMismatch(f"dino block must be (n, d_dino), got {dino.shape}")
        if clip.shape[:2] != (CLIP_LEVELS, n) or clip.ndim != 3:
            raise DimMismatch(f"clip block must be (3, n, d_clip), got {clip.shape}")
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.uint16)
            if labels.shape != (n,):
                raise ValueError(f"labels must be (n,), got {labels.shape}")

        self.positions = positions
        self.dino = _renormalize(dino)
        self.clip = np.stack([_renormalize(clip[level]) for level in range(CLIP_LEVELS)])
        self.labels = labels
        for arr in (self.positions, self.dino, self.clip):
            arr.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)

        self._positions64 = self.positions.astype(np.float64)
        if cell_size is None:
            cell_size = _default_cell_size(self._positions64)
        self.index = _VoxelGrid(self._positions64, cell_size)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dims(self) -> tuple[int, int]:
        return self.dino.shape[1], self.clip.shape[2]

    def point(self, i: int) -> SemanticPoint:
        label = None if self.labels is None else int(self.labels[i])
        return SemanticPoint(
            position=self.positions[i], dino=self.dino[i], clip=self.clip[:, i], label=label
        )


def _renormalize(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features.astype(np.float64), axis=-1)
    if (norms < _ZERO_NORM).any():
        bad = int(np.argmin(norms))
        raise ZeroFeature(f"feature row {bad} has norm {norms[bad]:.2e}")
    return (features / norms[..., None]).astype(np.float32)


def _default_cell_size(positions: np.ndarray) -> float:
    span = positions.max(axis=0) - positions.min(axis=0)
    diag = float(np.linalg.norm(span))
    if diag <= 0:
        return 1.0
    return max(diag / max(np.cbrt(len(positions)) * 2.0, 1.0), diag * 1e-6)


def build_field(points, cell_size: float | None = None) -> SemanticPointField:
    """Assemble a field from SemanticPoint records, enforcing shared dims."""
    points = list(points)
    if not points:
        raise ValueError("field must contain at least one point")
    d_dino = len(points[0].dino)
    d_clip = np.asarray(points[0].clip).shape
    if d_clip[0] != CLIP_LEVELS:
        raise DimMismatch(f"clip must have {CLIP_LEVELS} levels, got {d_clip[0]}")
    for i, p in enumerate(points):
        if len(p.dino) != d_dino or np.asarray(p.clip).shape != d_clip:
            raise DimMismatch(f"point {i} disagrees on feature dimensions")

    positions = np.stack([np.asarray(p.position, dtype=np.float32) for p in points])
    dino = np.stack([np.asarray(p.dino, dtype=np.float32) for p in points])
    clip = np.stack([np.asarray(p.clip, dtype=np.float32) for p in points], axis=1)
    labels = None
    if all(p.label is not None for p in points):
        labels = np.asarray([p.label for p in points], dtype=np.uint16)
    elif any(p.label is not None for p in points):
        raise ValueError("either all points carry labels or none do")
    return SemanticPointField(positions, dino, clip, labels, cell_size=cell_size)


def radius_neighbors(field: SemanticPointField, center, r: float) -> np.ndarray:
    """Exactly the indices within r of center (inclusive), ascending."""
    if r <= 0:
        raise ValueError("radius must be positive")
    return field.index.radius(np.asarray(center, dtype=np.float64), r)


def nearest_neighbors(field: SemanticPointField, center, k: int) -> np.ndarray:
    """The k nearest point indices, ordered by (distance, index)."""
    if k <= 0:
        raise ValueError("k must be positive")
    return field.index.knn(np.asarray(center, dtype=np.float64), k)


def median_nn_distance(field: SemanticPointField) -> float:
    """Median distance from each point to its nearest other point."""
    if len(field) < 2:
        return field.index.cell_size
    dists = np.empty(len(field))
    for i in range(len(field)):
        center = field._positions64[i]
        nn = field.index.knn(center, 2)
        other = nn[1] if nn[0] == i else nn[0]
        dists[i] = np.linalg.norm(field._positions64[other] - center)
    return float(np.median(dists))


# --- GFF container ---

def _header_bytes(field: SemanticPointField) -> bytes:
    d_dino, d_clip = field.dims
    header = {
        "n": len(field),
        "d_dino": d_dino,
        "d_clip": d_clip,
        "levels": CLIP_LEVELS,
        "has_labels": field.labels is not None,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_field(field: SemanticPointField, path: str | Path) -> None:
    """Write the field; identical fields produce identical bytes."""
    header = _header_bytes(field)
    with open(path, "wb") as fh:
        fh.write(GFF_MAGIC)
        fh.write(np.array(len(header), dtype="<u4").tobytes())
        fh.write(header)
        fh.write(field.positions.astype("<f4").tobytes())
        fh.write(field.dino.astype("<f4").tobytes())
        for level in range(CLIP_LEVELS):
            fh.write(field.clip[level].astype("<f4").tobytes())
        if field.labels is not None:
            fh.write(field.labels.astype("<u2").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file while reading {what}", offset + len(data))
    return data


def _load_blocks(path: str | Path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != GFF_MAGIC:
            if magic[:3] == GFF_MAGIC[:3]:
                raise VersionMismatch(f"unsupported container version {magic!r}")
            raise FormatError(f"bad magic {magic!r}", 0)
        (header_len,) = np.frombuffer(_read_exact(fh, 4, "header length"), dtype="<u4")
        header_offset = fh.tell()
        try:
            header = json.loads(_read_exact(fh, int(header_len), "header"))
        except json.JSONDecodeError:
            raise FormatError("header is not valid JSON", header_offset) from None
        try:
            n = int(header["n"])
            d_dino = int(header["d_dino"])
            d_clip = int(header["d_clip"])
            levels = int(header["levels"])
            has_labels = bool(header["has_labels"])
        except KeyError as err:
            raise FormatError(f"header missing key {err}", header_offset) from None
        if levels != CLIP_LEVELS:
            raise FormatError(f"expected {CLIP_LEVELS} clip levels, header says {levels}", header_offset)
        if n <= 0 or d_dino <= 0 or d_clip <= 0:
            raise FormatError("header sizes must be positive", header_offset)

        def block(rows: int, cols: int, dtype: str, what: str) -> np.ndarray:
            raw = _read_exact(fh, rows * cols * np.dtype(dtype).itemsize, what)
            return np.frombuffer(raw, dtype=dtype).reshape(rows, cols)

        positions = block(n, 3, "<f4", "positions")
        dino = block(n, d_dino, "<f4", "dino features")
        clip = np.stack([block(n, d_clip, "<f4", f"clip level {lv}") for lv in range(CLIP_LEVELS)])
        labels = None
        if has_labels:
            labels = np.frombuffer(_read_exact(fh, n * 2, "labels"), dtype="<u2")
        trailing = fh.read(1)
        if trailing:
            raise FormatError("unexpected trailing bytes", fh.tell() - 1)
    return positions, dino, clip, labels


def load_field(path: str | Path, cell_size: float | None = None) -> SemanticPointField:
    """Read a GFF file back into a field. Lossless inverse of save_field."""
    positions, dino, clip, labels = _load_blocks(path)
    return SemanticPointField(positions, dino, clip, labels, cell_size=cell_size)


def attach_features(positions, feature_file: str | Path, cell_size: float | None = None) -> SemanticPointField:
    """Combine externally produced geometry with a feature file's rows.

    The file must contain exactly one feature row per position, in order.
    """
    positions = np.asarray(positions, dtype=np.float32)
    file_positions, dino, clip, labels = _load_blocks(feature_file)
    if len(file_positions) != len(positions):
        raise CountMismatch(
            f"feature file has {len(file_positions)} rows for {len(positions)} positions"
        )
    return SemanticPointField(positions, dino, clip, labels, cell_size=cell_size)
