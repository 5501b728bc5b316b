"""Quantitative evaluation: point-set IoU, localization accuracy, reports.

Accuracy here means argmax-in-region localization: a query counts as a
hit when the highest-relevancy point lies inside the ground-truth set.
Reference rows rendered alongside results are bundled constants from
prior external measurements, never recomputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .extraction import ExtractionResult

_FOOTER = (
    "mIoU: mean 3-D point-set IoU of predicted vs ground-truth part points.\n"
    "Accuracy: fraction of queries whose argmax-relevancy point lies inside\n"
    "the ground-truth region (ties resolve to the lowest index).\n"
    "Rows without per-query entries are bundled reference values."
)


class BothEmpty(Exception):
    """IoU of two empty sets is undefined."""


@dataclass(frozen=True)
class QueryOutcome:
    query: str
    iou: float
    hit: bool


@dataclass(frozen=True)
class EvalReport:
    """Aggregated per-query metrics for one method."""

    method_name: str
    per_query: tuple[QueryOutcome, ...]
    miou: float
    accuracy: float

    def to_json_dict(self) -> dict:
        return {
            "method_name": self.method_name,
            "miou": self.miou,
            "accuracy": self.accuracy,
            "per_query": [
                {"query": q.query, "iou": q.iou, "hit": q.hit} for q in self.per_query
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def point_iou(pred, gt) -> float:
    """Intersection over union of two index sets over the same field."""
    pred = set(int(i) for i in pred)
    gt = set(int(i) for i in gt)
    union = pred | gt
    if not union:
        raise BothEmpty("IoU of two empty sets is undefined")
    return len(pred & gt) / len(union)


def localization_hit(relevancy: np.ndarray, gt) -> bool:
    """Whether the highest-relevancy point falls inside the ground truth."""
    gt = set(int(i) for i in gt)
    if not gt:
        raise ValueError("ground-truth set must be non-empty")
    return int(np.argmax(np.asarray(relevancy))) in gt


def evaluate(
    results: list[tuple[ExtractionResult, set, str]],
    method: str,
) -> EvalReport:
    """Aggregate (result, ground truth, query) triples into a report."""
    if not results:
        raise ValueError("results list must be non-empty")
    outcomes = []
    for result, gt, query in results:
        outcomes.append(
            QueryOutcome(
                query=query,
                iou=point_iou(result.toao, gt),
                hit=localization_hit(result.relevancy, gt),
            )
        )
    return EvalReport(
        method_name=method,
        per_query=tuple(outcomes),
        miou=float(np.mean([o.iou for o in outcomes])),
        accuracy=sum(o.hit for o in outcomes) / len(outcomes),
    )


def reference_rows() -> list[dict]:
    """Bundled reference scores for context rows in rendered tables."""
    raw = resources.files("toao").joinpath("data/reference_scores.json").read_text()
    return json.loads(raw)["rows"]


def _format_pct(value: float | None) -> str:
    return "NAN" if value is None else f"{value:.1f}"


def render_table(reports: list[EvalReport], include_reference: bool = True) -> str:
    """Aligned plain-text comparison table with the metric-definition footer."""
    rows = []
    if include_reference:
        rows.extend(
            (r["method"], _format_pct(r["miou_pct"]), _format_pct(r["accuracy_pct"]))
            for r in reference_rows()
        )
    rows.extend(
        (rep.method_name, f"{rep.miou * 100:.1f}", f"{rep.accuracy * 100:.1f}")
        for rep in reports
    )
    name_width = max(len("Method"), *(len(r[0]) for r in rows))
    lines = [f"{'Method':<{name_width}}  {'mIoU (%)':>9}  {'Accuracy (%)':>12}"]
    lines.append("-" * len(lines[0]))
    for name, miou, acc in rows:
        lines.append(f"{name:<{name_width}}  {miou:>9}  {acc:>12}")
    lines.append("")
    lines.append(_FOOTER)
    return "\n".join(lines)


def render_csv(reports: list[EvalReport]) -> str:
    """Per-query CSV for plotting: method,query,iou,hit."""
    lines = ["method,query,iou,hit"]
    for rep in reports:
        for q in rep.per_query:
            lines.append(f"{rep.method_name},{q.query},{q.iou:.6f},{int(q.hit)}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, json_path: str | Path, table_path: str | Path | None = None) -> None:
    Path(json_path).write_text(report.to_json())
    if table_path is not None:
        Path(table_path).write_text(render_table([report]))
