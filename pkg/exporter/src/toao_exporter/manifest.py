"""Export job description: dataset, encoder choices, crop pyramid, outputs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_DINO_MODEL = "facebook/dinov2-small"
DEFAULT_CLIP_MODEL = "openai/clip-vit-base-patch16"
DEFAULT_CROP_SCALES = (1.0, 0.5, 0.25)


class LayoutError(Exception):
    """The dataset directory does not follow the expected layout."""


@dataclass(frozen=True)
class ExportManifest:
    """One export run.

    ``crop_scales`` are the three semantic-level crop sizes as fractions
    of the short image side, strictly decreasing: smaller crops mean finer
    granularity.
    """

    dataset_dir: Path
    output_gff: Path
    dino_model: str = DEFAULT_DINO_MODEL
    clip_model: str = DEFAULT_CLIP_MODEL
    crop_scales: tuple[float, float, float] = DEFAULT_CROP_SCALES
    text_queries: tuple[str, ...] = ()
    text_output: Path | None = None

    def __post_init__(self) -> None:
        scales = self.crop_scales
        if len(scales) != 3:
            raise ValueError("exactly three crop scales are required")
        if not all(0 < s <= 1 for s in scales):
            raise ValueError("crop scales must lie in (0, 1]")
        if not (scales[0] > scales[1] > scales[2]):
            raise ValueError("crop scales must be strictly decreasing (coarse to fine)")
        if self.text_queries and self.text_output is None:
            raise ValueError("text queries need a text_output path")

    @classmethod
    def from_file(cls, path: str | Path) -> "ExportManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        base = path.parent
        text_output = data.get("text_output")
        return cls(
            dataset_dir=(base / data["dataset_dir"]).resolve(),
            output_gff=(base / data["output_gff"]).resolve(),
            dino_model=data.get("dino_model", DEFAULT_DINO_MODEL),
            clip_model=data.get("clip_model", DEFAULT_CLIP_MODEL),
            crop_scales=tuple(data.get("crop_scales", DEFAULT_CROP_SCALES)),
            text_queries=tuple(data.get("text_queries", ())),
            text_output=(base / text_output).resolve() if text_output else None,
        )

    def validate_dataset(self) -> None:
        root = self.dataset_dir
        for required in ("frames", "poses.json", "intrinsics.json"):
            if not (root / required).exists():
                raise LayoutError(f"dataset is missing {required} under {root}")
