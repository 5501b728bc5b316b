import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from toao.cli import main
from toao.extraction import load_result
from toao.field import load_field
from toao.frames import depth_coverage, load_dataset, retain_mask
from toao.synth import flower_scene, save_scene


def dir_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synthesized dataset shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    spec = flower_scene(rng_seed=7, steps=10)
    spec_path = root / "scene.json"
    save_scene(spec, spec_path)
    assert main(["synth", "--spec", str(spec_path), "--out", str(root / "dataset")]) == 0

    (root / "stub.json").write_text(
        json.dumps([{"o": "sunflowers", "t": "put it into the vase", "a": "The stem."}])
    )
    config = {
        "dataset_dir": "dataset",
        "output_dir": "out",
        "theta_d": 0.7,
        "growth_radius": 0.02,
        "fine_percentile": 68.0,
        "backend": {"kind": "stub", "table": "stub.json"},
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    return root, spec_path, config_path


class TestSynth:
    def test_outputs_present_with_labels(self, workspace):
        root, _, _ = workspace
        dataset = root / "dataset"
        assert (dataset / "field.gff").exists()
        labels = json.loads((dataset / "labels.json").read_text())
        assert labels == {"0": "blossom", "1": "stem", "2": "leaf"}
        assert (dataset / "frames" / "000000.color.png").exists()
        assert (dataset / "text_embeddings.json").exists()

    def test_deterministic_output_bytes(self, workspace, tmp_path):
        _, spec_path, _ = workspace
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--spec", str(spec_path), "--out", str(a)]) == 0
        assert main(["synth", "--spec", str(spec_path), "--out", str(b)]) == 0
        da, db = dir_digest(a), dir_digest(b)
        assert da == db and len(da) > 10

    def test_invalid_spec_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"parts": []}))
        assert main(["synth", "--spec", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_missing_spec_exits_2(self, tmp_path):
        assert main(["synth", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


class TestPreprocess:
    def test_dropout_free_retains_all(self, workspace, tmp_path):
        root, _, config_path = workspace
        cfg = json.loads(config_path.read_text())
        cfg["theta_d"] = 1.0
        cfg["output_dir"] = str(tmp_path / "pre_all")
        alt = root / "config_pre_all.json"
        alt.write_text(json.dumps(cfg))
        assert main(["preprocess", "--config", str(alt)]) == 0
        retained = json.loads((tmp_path / "pre_all" / "preprocessed" / "retained.json").read_text())
        assert retained == list(range(10))

    def test_dropout_subset_matches_per_frame_oracle(self, tmp_path):
        spec = replace(flower_scene(rng_seed=21, steps=12), depth_dropout=0.5)
        spec_path = tmp_path / "scene.json"
        save_scene(spec, spec_path)
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "dataset")]) == 0
        config_path = tmp_path / "cfg.json"
        config_path.write_text(json.dumps({"dataset_dir": "dataset", "output_dir": "out", "theta_d": 0.48}))
        assert main(["preprocess", "--config", str(config_path)]) == 0

        frames = load_dataset(tmp_path / "dataset")
        expected = [
            f.index for f in frames if retain_mask(depth_coverage(f, threshold=0.48))
        ]
        retained = json.loads((tmp_path / "out" / "preprocessed" / "retained.json").read_text())
        assert retained == expected
        assert len(retained) > 0

    def test_nothing_retained_exits_3(self, tmp_path):
        spec = replace(flower_scene(rng_seed=21, steps=4), depth_dropout=0.5)
        spec_path = tmp_path / "scene.json"
        save_scene(spec, spec_path)
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "dataset")]) == 0
        config_path = tmp_path / "cfg.json"
        config_path.write_text(json.dumps({"dataset_dir": "dataset", "theta_d": 0.999}))
        assert main(["preprocess", "--config", str(config_path)]) == 3

    def test_missing_dataset_exits_2(self, tmp_path):
        config_path = tmp_path / "cfg.json"
        config_path.write_text(json.dumps({"dataset_dir": "nowhere"}))
        assert main(["preprocess", "--config", str(config_path)]) == 2


class TestExtract:
    def test_part_override_reaches_iou(self, workspace):
        root, _, config_path = workspace
        assert main([
            "extract", "--config", str(config_path),
            "--object", "sunflowers", "--part", "stem",
        ]) == 0
        result, payload = load_result(root / "out" / "extract_stem.json")
        field = load_field(payload["gff"])
        gt = set(np.nonzero(field.labels == 1)[0].tolist())
        iou = len(set(result.toao.tolist()) & gt) / len(set(result.toao.tolist()) | gt)
        assert iou >= 0.9
        assert (root / "out" / "extract_stem.ply").exists()

    def test_stub_backend_equals_part_override(self, workspace):
        root, _, config_path = workspace
        assert main([
            "extract", "--config", str(config_path),
            "--object", "sunflowers", "--task", "put it into the vase",
            "--method", "via_stub",
        ]) == 0
        via_stub, payload = load_result(root / "out" / "extract_stem.json")
        assert payload["method"] == "via_stub"
        assert payload["query"] == "stem"

        assert main([
            "extract", "--config", str(config_path),
            "--object", "sunflowers", "--part", "stem",
        ]) == 0
        direct, _ = load_result(root / "out" / "extract_stem.json")
        assert via_stub.toao.tolist() == direct.toao.tolist()

    def test_unknown_part_exits_4(self, workspace):
        _, _, config_path = workspace
        assert main([
            "extract", "--config", str(config_path),
            "--object", "sunflowers", "--part", "nosuchpart",
        ]) == 4

    def test_unknown_object_exits_4(self, workspace):
        _, _, config_path = workspace
        assert main([
            "extract", "--config", str(config_path),
            "--object", "nosuchobject", "--part", "stem",
        ]) == 4

    def test_requires_task_or_part(self, workspace):
        _, _, config_path = workspace
        assert main(["extract", "--config", str(config_path), "--object", "sunflowers"]) == 2


class TestEval:
    @pytest.fixture()
    def extracted(self, workspace):
        root, _, config_path = workspace
        for part in ("stem", "blossom"):
            assert main([
                "extract", "--config", str(config_path),
                "--object", "sunflowers", "--part", part,
            ]) == 0
        return root, config_path

    def test_report_and_determinism(self, extracted):
        root, config_path = extracted
        args = ["eval", "--config", str(config_path), "--results", "out/extract_*.json",
                "--csv", "out/per_query.csv"]
        assert main(args) == 0
        report_path = root / "out" / "eval_staged.json"
        first = report_path.read_bytes()
        table = (root / "out" / "eval_table.txt").read_text()
        assert "staged" in table and "LangSplat" in table

        report = json.loads(first)
        assert report["miou"] >= 0.9
        assert report["accuracy"] == 1.0
        assert {q["query"] for q in report["per_query"]} == {"stem", "blossom"}

        csv = (root / "out" / "per_query.csv").read_text()
        assert csv.splitlines()[0] == "method,query,iou,hit"

        assert main(args) == 0
        assert report_path.read_bytes() == first

    def test_two_methods_two_rows(self, extracted, tmp_path):
        root, config_path = extracted
        assert main([
            "extract", "--config", str(config_path),
            "--object", "sunflowers", "--part", "leaf", "--method", "alt",
        ]) == 0
        assert main(["eval", "--config", str(config_path), "--results", "out/extract_*.json"]) == 0
        table = (root / "out" / "eval_table.txt").read_text()
        assert "staged" in table and "alt" in table

    def test_no_results_exits_2(self, workspace):
        _, _, config_path = workspace
        assert main(["eval", "--config", str(config_path), "--results", "missing/*.json"]) == 2


class TestAsk:
    def test_stub_resolution(self, workspace, capsys):
        _, _, config_path = workspace
        assert main([
            "ask", "--config", str(config_path),
            "--object", "sunflowers", "--task", "put it into the vase",
        ]) == 0
        assert capsys.readouterr().out.strip() == "stem"

    def test_miss_exits_2(self, workspace):
        _, _, config_path = workspace
        assert main([
            "ask", "--config", str(config_path),
            "--object", "sunflowers", "--task", "juggle",
        ]) == 2
