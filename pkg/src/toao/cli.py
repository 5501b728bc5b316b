"""Pipeline command line: synth, preprocess, extract, eval, ask.

Runs are anchored to a JSON config file; every path in the config is
resolved relative to the config file's directory, and selected flags
override config values for exploration.

Exit codes: 0 success, 2 usage or input problem, 3 preprocessing retained
nothing, 4 extraction found nothing.
"""

from __future__ import annotations

import argparse
import glob as globlib
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import evaluation, extraction, frames, synth, taskllm
from .extraction import ExtractionConfig
from .field import load_field

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_FRAMES = 3
EXIT_NO_POINTS = 4


@dataclass(frozen=True)
class RunConfig:
    """One run's inputs, thresholds, and backend wiring."""

    base_dir: Path
    dataset_dir: Path
    output_dir: Path
    gff: Path
    embeddings: Path
    labels: Path
    theta_d: float = frames.DEFAULT_RETENTION_THRESHOLD
    depth_range: tuple[float, float] = frames.DEFAULT_DEPTH_RANGE
    extraction: ExtractionConfig = ExtractionConfig()
    backend: dict | None = None
    method: str = "staged"
    seed: int = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        data = json.loads(path.read_text())
        base = path.parent

        def resolve(key: str, default: str) -> Path:
            return (base / data.get(key, default)).resolve()

        dataset_dir = resolve("dataset_dir", "dataset")
        extraction_cfg = ExtractionConfig(
            theta_dino=float(data.get("theta_dino", 0.85)),
            growth_radius=data.get("growth_radius"),
            relevancy_mode=data.get("relevancy_mode", "cosine"),
            seed_percentile=float(data.get("seed_percentile", 90.0)),
            fine_percentile=float(data.get("fine_percentile", 90.0)),
            coarse_level=int(data.get("coarse_level", 0)),
            fine_level=int(data.get("fine_level", 2)),
            strict_foreground=bool(data.get("strict_foreground", False)),
        )
        depth_range = data.get("depth_range", list(frames.DEFAULT_DEPTH_RANGE))
        return cls(
            base_dir=base.resolve(),
            dataset_dir=dataset_dir,
            output_dir=resolve("output_dir", "out"),
            gff=resolve("gff", str(Path(data.get("dataset_dir", "dataset")) / "field.gff")),
            embeddings=resolve(
                "embeddings", str(Path(data.get("dataset_dir", "dataset")) / "text_embeddings.json")
            ),
            labels=resolve("labels", str(Path(data.get("dataset_dir", "dataset")) / "labels.json")),
            theta_d=float(data.get("theta_d", frames.DEFAULT_RETENTION_THRESHOLD)),
            depth_range=(float(depth_range[0]), float(depth_range[1])),
            extraction=extraction_cfg,
            backend=data.get("backend"),
            method=data.get("method", "staged"),
            seed=int(data.get("seed", 0)),
        )


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    ex = cfg.extraction
    if getattr(args, "theta_dino", None) is not None:
        ex = replace(ex, theta_dino=args.theta_dino)
    if getattr(args, "growth_radius", None) is not None:
        ex = replace(ex, growth_radius=args.growth_radius)
    if getattr(args, "fine_percentile", None) is not None:
        ex = replace(ex, fine_percentile=args.fine_percentile)
    cfg = replace(cfg, extraction=ex)
    if getattr(args, "theta_d", None) is not None:
        cfg = replace(cfg, theta_d=args.theta_d)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "method", None) is not None:
        cfg = replace(cfg, method=args.method)
    return cfg


def _build_backend(cfg: RunConfig) -> taskllm.Backend:
    spec = cfg.backend or {"kind": "stub", "table": None}
    kind = spec.get("kind", "stub")
    if kind == "stub":
        table = spec.get("table")
        if table is None:
            return taskllm.Backend(kind="stub")
        return taskllm.Backend.from_stub_json(cfg.base_dir / table)
    return taskllm.Backend(
        kind="http",
        endpoint=spec.get("endpoint"),
        model_name=spec.get("model_name", "default"),
        timeout=float(spec.get("timeout", 30.0)),
    )


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        spec = synth.load_scene(args.spec)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as err:
        print(f"error: invalid scene spec: {err}", file=sys.stderr)
        return EXIT_INPUT
    synth.write_scene_outputs(spec, args.out)
    names = synth.label_names(spec)
    print(f"wrote dataset with {len(spec.trajectory)} frames and {len(names)} labels to {args.out}")
    return EXIT_OK


def cmd_preprocess(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    try:
        session = frames.load_dataset(cfg.dataset_dir)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: cannot load dataset: {err}", file=sys.stderr)
        return EXIT_INPUT
    try:
        retained = frames.preprocess_session(session, cfg.theta_d, cfg.depth_range)
    except frames.NoFramesRetained as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NO_FRAMES
    out = cfg.output_dir / "preprocessed"
    frames.write_dataset(out, retained)
    (out / "retained.json").write_text(
        json.dumps([f.index for f in retained], indent=2)
    )
    print(f"retained {len(retained)}/{len(session)} frames -> {out}")
    return EXIT_OK


def _load_query_embedding(cfg: RunConfig, text: str) -> extraction.TextEmbedding | None:
    table = extraction.load_text_embeddings(cfg.embeddings)
    return table.get(text)


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    if args.part is None and args.task is None:
        print("error: provide --task (backend resolution) or --part", file=sys.stderr)
        return EXIT_INPUT

    if args.part is not None:
        part_text = taskllm._normalize_part(args.part)
    else:
        query = taskllm.TaskQuery(object_text=args.object, task_text=args.task)
        try:
            part_text = taskllm.resolve_part(query, _build_backend(cfg)).part_text
        except (taskllm.StubMiss, taskllm.BackendUnavailable, taskllm.UnparseableAnswer) as err:
            print(f"error: part resolution failed: {err}", file=sys.stderr)
            return EXIT_INPUT

    try:
        field = load_field(cfg.gff)
    except (OSError, ValueError) as err:
        print(f"error: cannot load field: {err}", file=sys.stderr)
        return EXIT_INPUT
    object_query = _load_query_embedding(cfg, args.object)
    part_query = _load_query_embedding(cfg, part_text)
    if object_query is None:
        print(f"error: no embedding for object text {args.object!r}", file=sys.stderr)
        return EXIT_NO_POINTS
    if part_query is None:
        print(f"error: no embedding for part text {part_text!r}", file=sys.stderr)
        return EXIT_NO_POINTS

    try:
        result = extraction.extract(field, object_query, part_query, cfg.extraction)
    except extraction.NoRelevantPoints as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NO_POINTS

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    stem = f"extract_{part_text.replace(' ', '_')}"
    json_path = cfg.output_dir / f"{stem}.json"
    extraction.save_result(
        result,
        json_path,
        extra={
            "query": part_text,
            "object": args.object,
            "method": cfg.method,
            "gff": str(cfg.gff),
        },
    )
    extraction.write_relevancy_ply(
        cfg.output_dir / f"{stem}.ply", field, result.toao, result.relevancy
    )
    centroid = ", ".join(f"{v:.4f}" for v in result.toao_centroid)
    print(f"part {part_text!r}: {len(result.toao)} points, centroid ({centroid}) -> {json_path}")
    return EXIT_OK


def _ground_truth(field, labels_path: Path, query: str) -> set[int] | None:
    if field.labels is None or not labels_path.exists():
        return None
    names = json.loads(labels_path.read_text())
    ids = [int(k) for k, v in names.items() if v == query]
    if not ids:
        return None
    return set(int(i) for i in (field.labels == ids[0]).nonzero()[0])


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    paths = sorted(globlib.glob(str(cfg.base_dir / args.results)))
    if not paths:
        print(f"error: no result files match {args.results!r}", file=sys.stderr)
        return EXIT_INPUT

    by_method: dict[str, list] = {}
    fields = {}
    for path in paths:
        result, payload = extraction.load_result(path)
        gff = Path(payload.get("gff", cfg.gff))
        if gff not in fields:
            fields[gff] = load_field(gff)
        field = fields[gff]
        gt = _ground_truth(field, cfg.labels, payload["query"])
        if gt is None:
            print(f"error: no ground-truth label for query {payload['query']!r}", file=sys.stderr)
            return EXIT_INPUT
        by_method.setdefault(payload.get("method", cfg.method), []).append(
            (result, gt, payload["query"])
        )

    reports = [
        evaluation.evaluate(entries, method) for method, entries in sorted(by_method.items())
    ]
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    for report in reports:
        evaluation.write_report(report, cfg.output_dir / f"eval_{report.method_name}.json")
    table = evaluation.render_table(reports)
    (cfg.output_dir / "eval_table.txt").write_text(table)
    if args.csv:
        (cfg.base_dir / args.csv).write_text(evaluation.render_csv(reports))
    print(table)
    return EXIT_OK


def cmd_ask(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(args.config)
    query = taskllm.TaskQuery(object_text=args.object, task_text=args.task)
    try:
        resolved = taskllm.resolve_part(query, _build_backend(cfg))
    except (taskllm.StubMiss, taskllm.BackendUnavailable, taskllm.UnparseableAnswer) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    print(resolved.part_text)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toao", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset from a scene spec")
    p_synth.add_argument("--spec", required=True, help="scene spec JSON")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.set_defaults(func=cmd_synth)

    def add_common(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--theta-d", type=float, dest="theta_d")
        p.add_argument("--theta-dino", type=float, dest="theta_dino")
        p.add_argument("--growth-radius", type=float, dest="growth_radius")
        p.add_argument("--fine-percentile", type=float, dest="fine_percentile")
        p.add_argument("--seed", type=int, dest="seed")
        p.add_argument("--method", dest="method")

    p_pre = sub.add_parser("preprocess", help="apply depth-coverage retention and masking")
    add_common(p_pre)
    p_pre.set_defaults(func=cmd_preprocess)

    p_ext = sub.add_parser("extract", help="run the staged extraction for one query")
    add_common(p_ext)
    p_ext.add_argument("--object", required=True, help="object text (coarse query)")
    p_ext.add_argument("--task", help="task text; part resolved via the backend")
    p_ext.add_argument("--part", help="part text override, skips the backend")
    p_ext.set_defaults(func=cmd_extract)

    p_eval = sub.add_parser("eval", help="aggregate extraction results into a report")
    add_common(p_eval)
    p_eval.add_argument("--results", required=True, help="glob of result JSONs (relative to config)")
    p_eval.add_argument("--csv", help="also write per-query CSV to this path")
    p_eval.set_defaults(func=cmd_eval)

    p_ask = sub.add_parser("ask", help="resolve the task-relevant part name only")
    p_ask.add_argument("--config", required=True)
    p_ask.add_argument("--object", required=True)
    p_ask.add_argument("--task", required=True)
    p_ask.set_defaults(func=cmd_ask)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_INPUT if err.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
