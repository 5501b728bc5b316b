"""Conditional 3D object extraction and task-part selection.

Pipeline: a coarse language query localizes the object, the first
principal component of the DINO features splits foreground from
background, a similarity-gated flood fill grows the full object mask,
and a fine language query restricted to that mask selects the
task-relevant point set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import SemanticPointField, median_nn_distance, radius_neighbors

MIN_COARSE_RELEVANCY = 0.05
_EIGENGAP_REL_TOL = 1e-9
_OTSU_BINS = 256


class DegenerateFeatures(Exception):
    """DINO features have no dominant principal direction."""


class EmptyField(Exception):
    """Extraction was asked to run on an empty field."""


class NoRelevantPoints(Exception):
    """The coarse query matched nothing in the field."""


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    """Unit-norm language feature for a query string."""

    vector: np.ndarray
    text: str

    def __post_init__(self) -> None:
        vector = np.asarray(self.vector, dtype=np.float64)
        norm = np.linalg.norm(vector)
        if norm < 1e-8:
            raise ValueError(f"embedding for {self.text!r} has zero norm")
        vector = vector / norm
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)


@dataclass(frozen=True)
class ExtractionConfig:
    """Thresholds and level choices for the extraction pipeline.

    ``growth_radius`` of None resolves to twice the field's median
    nearest-neighbor distance at run time.
    """

    theta_dino: float = 0.85
    growth_radius: float | None = None
    relevancy_mode: str = "cosine"  # or "canonical-ratio"
    canonical_embeddings: tuple[TextEmbedding, ...] = ()
    seed_percentile: float = 90.0
    fine_percentile: float = 90.0
    coarse_level: int = 0
    fine_level: int = 2
    strict_foreground: bool = False

    def __post_init__(self) -> None:
        if not (0 < self.theta_dino <= 1):
            raise ValueError("theta_dino must lie in (0, 1]")
        if self.growth_radius is not None and self.growth_radius <= 0:
            raise ValueError("growth_radius must be positive")
        if self.relevancy_mode not in ("cosine", "canonical-ratio"):
            raise ValueError(f"unknown relevancy mode {self.relevancy_mode!r}")
        for pct in (self.seed_percentile, self.fine_percentile):
            if not (0 < pct < 100):
                raise ValueError("percentiles must lie in (0, 100)")
        for level in (self.coarse_level, self.fine_level):
            if level not in (0, 1, 2):
                raise ValueError("clip level must be 0, 1 or 2")


@dataclass(frozen=True, eq=False)
class ExtractionResult:
    """Index sets produced by the staged extraction, plus scores and centroid.

    ``relevancy`` holds the fine-level scores zeroed outside the object
    mask, so its argmax is the predicted part location.
    """

    foreground: np.ndarray
    object_mask: np.ndarray
    toao: np.ndarray
    relevancy: np.ndarray
    toao_centroid: np.ndarray

    def to_json_dict(self, relevancy_path: str) -> dict:
        return {
            "foreground": [int(i) for i in self.foreground],
            "object_mask": [int(i) for i in self.object_mask],
            "toao": [int(i) for i in self.toao],
            "toao_centroid": [float(v) for v in self.toao_centroid],
            "relevancy_path": relevancy_path,
        }


def save_result(result: ExtractionResult, json_path: str | Path, extra: dict | None = None) -> None:
    """Write the result JSON plus the float32 relevancy sidecar next to it."""
    json_path = Path(json_path)
    sidecar = json_path.with_suffix(".relevancy.f32")
    sidecar.write_bytes(result.relevancy.astype("<f4").tobytes())
    payload = result.to_json_dict(sidecar.name)
    if extra:
        payload.update(extra)
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_result(json_path: str | Path) -> tuple[ExtractionResult, dict]:
    """Read a result JSON (and sidecar) back; returns (result, full payload)."""
    json_path = Path(json_path)
    payload = json.loads(json_path.read_text())
    relevancy = np.frombuffer(
        (json_path.parent / payload["relevancy_path"]).read_bytes(), dtype="<f4"
    ).astype(np.float64)
    result = ExtractionResult(
        foreground=np.asarray(payload["foreground"], dtype=np.int64),
        object_mask=np.asarray(payload["object_mask"], dtype=np.int64),
        toao=np.asarray(payload["toao"], dtype=np.int64),
        relevancy=relevancy,
        toao_centroid=np.asarray(payload["toao_centroid"], dtype=np.float64),
    )
    return result, payload


def relevancy(
    field: SemanticPointField,
    query: TextEmbedding,
    level: int,
    cfg: ExtractionConfig,
) -> np.ndarray:
    """Per-point language relevancy in [0, 1] at one semantic level."""
    if level not in (0, 1, 2):
        raise ValueError("level must be 0, 1 or 2")
    features = field.clip[level].astype(np.float64)
    dots = features @ query.vector
    if cfg.relevancy_mode == "cosine":
        return np.clip(dots, 0.0, 1.0)
    if not cfg.canonical_embeddings:
        raise ValueError("canonical-ratio mode needs canonical embeddings")
    scores = np.ones(len(field))
    for canonical in cfg.canonical_embeddings:
        ratio = 1.0 / (1.0 + np.exp(-(dots - features @ canonical.vector)))
        scores = np.minimum(scores, ratio)
    return np.clip(scores, 0.0, 1.0)


def _principal_component(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First PC of mean-centered rows; raises when no dominant direction exists."""
    centered = features - features.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    eigen = singular**2
    if eigen[0] < 1e-18:
        raise DegenerateFeatures("feature matrix has no variance")
    if len(eigen) > 1 and (eigen[0] - eigen[1]) / eigen[0] < _EIGENGAP_REL_TOL:
        raise DegenerateFeatures("top two principal directions are indistinguishable")
    return vt[0], centered @ vt[0]


def _otsu_threshold(values: np.ndarray, bins: int = _OTSU_BINS) -> float:
    """Between-class-variance-maximizing split of a 1-D sample."""
    lo, hi = float(values.min()), float(values.max())
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    weight = counts.astype(np.float64)
    total = weight.sum()
    cum_w = np.cumsum(weight)
    cum_m = np.cumsum(weight * centers)
    mean_all = cum_m[-1] / total

    w0 = cum_w[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, cum_m[:-1] / np.where(w0 > 0, w0, 1.0), 0.0)
    mu1 = np.where(valid, (cum_m[-1] - cum_m[:-1]) / np.where(w1 > 0, w1, 1.0), 0.0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    if not np.isfinite(between).any():
        return mean_all
    split = int(np.argmax(between))
    return float(edges[split + 1])


def dino_foreground(field: SemanticPointField, seed: int) -> np.ndarray:
    """Foreground indices by thresholding the first DINO principal component.

    The component's sign is fixed so the seed projects non-negatively and
    the returned set always contains the seed.
    """
    if not (0 <= seed < len(field)):
        raise ValueError(f"seed {seed} out of range for field of {len(field)}")
    component, projections = _principal_component(field.dino.astype(np.float64))
    del component
    if projections[seed] < 0:
        projections = -projections
    threshold = _otsu_threshold(projections)
    keep = projections > threshold
    keep[seed] = True
    return np.nonzero(keep)[0].astype(np.int64)


def _resolve_radius(field: SemanticPointField, cfg: ExtractionConfig) -> float:
    if cfg.growth_radius is not None:
        return cfg.growth_radius
    return 2.0 * median_nn_distance(field)


def flood_fill(
    field: SemanticPointField,
    seeds,
    cfg: ExtractionConfig,
    restrict,
) -> np.ndarray:
    """Layer-synchronous region growing under a DINO-similarity gate.

    Each layer accepts, at once, every not-yet-accepted point of
    ``restrict`` that lies within the growth radius of any accepted point
    and whose DINO feature matches the normalized mean feature of the
    current accepted set at least ``theta_dino``. Layer-synchronous
    acceptance makes the result independent of traversal order.
    """
    seeds = np.asarray(sorted(set(int(i) for i in np.asarray(seeds).reshape(-1))), dtype=np.int64)
    if len(seeds) == 0:
        raise ValueError("seeds must be non-empty")
    n = len(field)
    restrict_mask = np.zeros(n, dtype=bool)
    restrict_mask[np.asarray(restrict, dtype=np.int64)] = True
    if not restrict_mask[seeds].all():
        raise ValueError("seeds must be a subset of the restrict set")

    radius = _resolve_radius(field, cfg)
    dino = field.dino.astype(np.float64)

    accepted = np.zeros(n, dtype=bool)
    accepted[seeds] = True
    reachable = np.zeros(n, dtype=bool)  # union of radius balls around accepted points
    frontier = seeds
    while True:
        for i in frontier:
            reachable[radius_neighbors(field, field.positions[i], radius)] = True
        candidates = reachable & restrict_mask & ~accepted
        if not candidates.any():
            break
        reference = dino[accepted].mean(axis=0)
        reference /= np.linalg.norm(reference)
        cand_idx = np.nonzero(candidates)[0]
        passing = cand_idx[dino[cand_idx] @ reference >= cfg.theta_dino]
        if len(passing) == 0:
            break
        accepted[passing] = True
        frontier = passing
    return np.nonzero(accepted)[0].astype(np.int64)


def extract(
    field: SemanticPointField,
    object_query: TextEmbedding,
    part_query: TextEmbedding,
    cfg: ExtractionConfig,
) -> ExtractionResult:
    """Full staged extraction from object query to task-part point set."""
    if len(field) == 0:
        raise EmptyField("cannot extract from an empty field")

    coarse = relevancy(field, object_query, cfg.coarse_level, cfg)
    if coarse.max() < MIN_COARSE_RELEVANCY:
        raise NoRelevantPoints(
            f"max coarse relevancy {coarse.max():.3f} below {MIN_COARSE_RELEVANCY} "
            f"for query {object_query.text!r}"
        )
    seed = int(np.argmax(coarse))

    foreground = dino_foreground(field, seed)

    fg_scores = coarse[foreground]
    seed_cut = np.percentile(fg_scores, cfg.seed_percentile)
    seeds = foreground[fg_scores >= seed_cut]

    if cfg.strict_foreground:
        restrict = foreground
    else:
        restrict = np.arange(len(field), dtype=np.int64)
    object_mask = flood_fill(field, seeds, cfg, restrict)

    fine = relevancy(field, part_query, cfg.fine_level, cfg)
    mask_scores = fine[object_mask]
    fine_cut = np.percentile(mask_scores, cfg.fine_percentile)
    toao = object_mask[mask_scores >= fine_cut]

    masked_relevancy = np.zeros(len(field))
    masked_relevancy[object_mask] = fine[object_mask]

    return ExtractionResult(
        foreground=foreground,
        object_mask=object_mask,
        toao=toao,
        relevancy=masked_relevancy,
        toao_centroid=field.positions[toao].astype(np.float64).mean(axis=0),
    )


def unconditioned_toao(
    field: SemanticPointField,
    part_query: TextEmbedding,
    cfg: ExtractionConfig,
) -> np.ndarray:
    """Single-stage baseline: fine-level percentile thresholding with no mask.

    The comparison point for measuring what the staged conditioning buys.
    """
    fine = relevancy(field, part_query, cfg.fine_level, cfg)
    cut = np.percentile(fine, cfg.fine_percentile)
    return np.nonzero(fine >= cut)[0].astype(np.int64)


# --- text-embedding files (shared with the exporter's output format) ---

def save_text_embeddings(path: str | Path, embeddings: list[TextEmbedding]) -> None:
    """Write a JSON index with one float32 sidecar vector per query text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = {len(e.vector) for e in embeddings}
    if len(dims) > 1:
        raise ValueError(f"embeddings disagree on dimension: {sorted(dims)}")
    entries = []
    for i, emb in enumerate(embeddings):
        sidecar = f"{path.stem}.{i:03d}.f32"
        (path.parent / sidecar).write_bytes(emb.vector.astype("<f4").tobytes())
        entries.append({"text": emb.text, "path": sidecar})
    payload = {"d": int(dims.pop()), "entries": entries}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_text_embeddings(path: str | Path) -> dict[str, TextEmbedding]:
    """Read a text-embedding index back into a text -> embedding map."""
    path = Path(path)
    payload = json.loads(path.read_text())
    result = {}
    for entry in payload["entries"]:
        vector = np.frombuffer((path.parent / entry["path"]).read_bytes(), dtype="<f4")
        if len(vector) != payload["d"]:
            raise ValueError(f"vector for {entry['text']!r} has wrong dimension")
        result[entry["text"]] = TextEmbedding(vector=vector.astype(np.float64), text=entry["text"])
    return result


def write_relevancy_ply(path: str | Path, field: SemanticPointField, indices, scores) -> None:
    """ASCII PLY of selected points colored blue (0) to red (1) by score."""
    indices = np.asarray(indices, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(indices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for i in indices:
            x, y, z = field.positions[i]
            s = min(max(float(scores[i]), 0.0), 1.0)
            r = int(round(255 * s))
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} 32 {255 - r}\n")
