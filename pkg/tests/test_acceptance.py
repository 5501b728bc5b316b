"""Acceptance suite: one test per release criterion, each printing a
pass/fail line (run with -s or -rA to see them) and enforcing its runtime
budget. Tolerances are pinned here and nowhere else.
"""

import functools
import time

import numpy as np
import pytest

from toao.evaluation import evaluate, localization_hit, point_iou
from toao.extraction import (
    ExtractionConfig,
    TextEmbedding,
    dino_foreground,
    extract,
    flood_fill,
    unconditioned_toao,
)
from toao.field import SemanticPointField
from toao.frames import (
    DepthCoverage,
    deproject,
    depth_coverage,
    preprocess_session,
    retain_mask,
)
from toao.geometry import Pose, TaskContext, affordance_transform, compose, inverse
from toao.synth import flower_scene, generate_field, query_embeddings, render_frames
from toao.taskllm import Backend, TaskQuery, build_prompt, parse_answer, resolve_part

from .conftest import random_pose
from .test_extraction import flood_fill_oracle, random_fill_instance
from .test_frames import make_frame

FLOWER_CFG = ExtractionConfig(growth_radius=0.02, fine_percentile=68.0)


def criterion(name, budget_s):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.monotonic()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[FAIL] {name}")
                raise
            elapsed = time.monotonic() - start
            assert elapsed < budget_s, f"{name}: {elapsed:.1f}s exceeds {budget_s}s budget"
            print(f"[PASS] {name} ({elapsed:.1f}s)")

        return wrapper

    return decorate


@criterion("pose algebra: 1000 random pairs, 1e-9", budget_s=1.0)
def test_pose_algebra():
    rng = np.random.default_rng(42)
    ctx = TaskContext(task="place", grip_pose=Pose.identity())
    for _ in range(1000):
        w_e, w_o = random_pose(rng), random_pose(rng)
        rel = affordance_transform(w_e, w_o, ctx)
        assert np.abs(compose(w_e, rel).matrix - w_o.matrix).max() < 1e-9
        assert np.abs(compose(w_e, inverse(w_e)).matrix - np.eye(4)).max() < 1e-9
    for _ in range(200):
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = compose(compose(a, b), c)
        rhs = compose(a, compose(b, c))
        assert np.abs(lhs.matrix - rhs.matrix).max() < 1e-9


@criterion("depth-coverage retention: exact ratios, inclusive boundary, monotone", budget_s=1.0)
def test_depth_coverage_semantics():
    rng = np.random.default_rng(7)
    # exact ratio on constructed 10x10 fixtures
    for valid_count in (0, 1, 37, 70, 99, 100):
        depth = np.zeros(100, dtype=np.uint16)
        depth[:valid_count] = 500
        frame = make_frame(depth.reshape(10, 10), np.ones((10, 10)))
        cov = depth_coverage(frame)
        assert cov.ratio == valid_count / 100
        assert cov.mask_pixels == 100 and cov.valid_pixels == valid_count
    # boundary ratio equal to the threshold is retained (inclusive)
    assert retain_mask(DepthCoverage(70, 100, 70 / 100, 0.7)) is True
    assert retain_mask(DepthCoverage(69, 100, 69 / 100, 0.7)) is False
    # monotonicity over 200 random dropout patterns
    for _ in range(200):
        pattern = rng.random((10, 10)) < rng.uniform(0.1, 0.9)
        depth = np.where(pattern, 500, 0).astype(np.uint16)
        frame = make_frame(depth, np.ones((10, 10)))
        threshold = float(rng.uniform(0, 1))
        cov = depth_coverage(frame, threshold=threshold)
        # adding valid pixels can only help
        refill = depth.copy().reshape(-1)
        zeros = np.nonzero(refill == 0)[0]
        if len(zeros):
            refill[zeros[: int(rng.integers(0, len(zeros) + 1))]] = 500
        better = depth_coverage(make_frame(refill.reshape(10, 10), np.ones((10, 10))), threshold=threshold)
        assert better.ratio >= cov.ratio
        if retain_mask(cov):
            assert retain_mask(better)


@criterion("deprojection consistency: 156-frame sweep within 2 mm", budget_s=30.0)
def test_deprojection_consistency():
    spec = flower_scene(rng_seed=7, steps=156)
    surface = generate_field(spec).positions.astype(np.float64)
    surface_sq = (surface**2).sum(axis=1)
    frames = preprocess_session(render_frames(spec))
    assert len(frames) == 156
    worst = 0.0
    for frame in frames:
        cloud = deproject(frame).positions
        assert len(cloud) > 0
        sq = (cloud**2).sum(axis=1)[:, None] + surface_sq[None, :] - 2.0 * cloud @ surface.T
        nearest = np.sqrt(np.maximum(sq.min(axis=1), 0.0))
        worst = max(worst, float(nearest.mean()))
    assert worst <= 0.002, f"worst per-frame mean deviation {worst * 1000:.2f} mm"


@criterion("first principal component matches dense eigendecomposition, 1e-6", budget_s=5.0)
def test_pca_oracle():
    from toao.extraction import _principal_component

    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(100, 400))
        scales = np.sort(rng.uniform(0.2, 3.0, size=64))[::-1]
        scales[0] += 1.0  # enforce a definite dominant direction
        raw = rng.normal(size=(n, 64)) * scales
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        component, _ = _principal_component(raw)

        centered = raw - raw.mean(axis=0)
        eigvals, eigvecs = np.linalg.eigh(centered.T @ centered / (n - 1))
        oracle = eigvecs[:, -1]
        err = min(np.linalg.norm(component - oracle), np.linalg.norm(component + oracle))
        assert err < 1e-6

    # symmetric two-cluster fixture separates exactly
    d = 64
    e1 = np.zeros(d)
    e1[0] = 1.0
    dino = np.concatenate([np.tile(e1, (30, 1)), np.tile(-e1, (30, 1))])
    positions = np.random.default_rng(0).uniform(size=(60, 3))
    clip = np.broadcast_to(dino[None], (3, 60, d)).copy()
    field = SemanticPointField(positions, dino, clip)
    assert dino_foreground(field, seed=0).tolist() == list(range(30))
    assert dino_foreground(field, seed=59).tolist() == list(range(30, 60))


@criterion("flood fill equals brute-force BFS on 100 instances; monotone in theta", budget_s=10.0)
def test_flood_fill_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        field, seeds, theta, radius, restrict = random_fill_instance(rng, max_n=500)
        cfg = ExtractionConfig(theta_dino=theta, growth_radius=radius)
        got = set(flood_fill(field, seeds, cfg, restrict).tolist())
        want = flood_fill_oracle(field, seeds, theta, radius, restrict)
        assert got == want, f"instance {trial}: {len(got)} vs {len(want)} points"
        if trial < 20:
            previous = None
            for theta_step in (0.9, 0.7, 0.5):
                step_cfg = ExtractionConfig(theta_dino=theta_step, growth_radius=radius)
                current = set(flood_fill(field, seeds, step_cfg, restrict).tolist())
                if previous is not None:
                    assert previous <= current
                previous = current


@criterion("end-to-end synthetic task-part extraction: 20 trials, IoU >= 0.9, accuracy 100%", budget_s=60.0)
def test_end_to_end_toao():
    entries = {"stem": [], "blossom": []}
    for seed in range(20):
        spec = flower_scene(rng_seed=seed, noise_sigma=0.05)
        field = generate_field(spec)
        table = {e.text: e for e in query_embeddings(spec)}
        for part, label in (("stem", 1), ("blossom", 0)):
            result = extract(field, table["sunflowers"], table[part], FLOWER_CFG)
            gt = set(np.nonzero(field.labels == label)[0].tolist())
            iou = point_iou(result.toao, gt)
            hit = localization_hit(result.relevancy, gt)
            assert iou >= 0.9, f"seed {seed} {part}: IoU {iou:.3f}"
            assert hit, f"seed {seed} {part}: localization miss"
            entries[part].append((seed, iou, result))
    # deterministic per seed: bit-stable repeat of the first trial
    spec = flower_scene(rng_seed=0, noise_sigma=0.05)
    field = generate_field(spec)
    table = {e.text: e for e in query_embeddings(spec)}
    again = extract(field, table["sunflowers"], table["stem"], FLOWER_CFG)
    first = entries["stem"][0][2]
    assert again.toao.tolist() == first.toao.tolist()
    assert again.object_mask.tolist() == first.object_mask.tolist()
    assert np.array_equal(again.relevancy, first.relevancy)


@criterion("staged conditioning beats single-stage thresholding by >= 10 IoU points", budget_s=60.0)
def test_conditioning_dominance():
    staged_ious, single_ious = [], []
    for seed in range(5):
        spec = flower_scene(rng_seed=seed, with_distractor=True)
        field = generate_field(spec)
        table = {e.text: e for e in query_embeddings(spec)}
        gt = set(np.nonzero(field.labels == 1)[0].tolist())
        result = extract(field, table["sunflowers"], table["stem"], FLOWER_CFG)
        staged_ious.append(point_iou(result.toao, gt))
        single_ious.append(point_iou(unconditioned_toao(field, table["stem"], FLOWER_CFG), gt))
        distractor_points = set(np.nonzero(field.labels == 3)[0].tolist())
        assert not (set(result.toao.tolist()) & distractor_points)
    staged_miou = float(np.mean(staged_ious))
    single_miou = float(np.mean(single_ious))
    assert staged_miou - single_miou >= 0.10, (
        f"staged {staged_miou:.3f} vs single-stage {single_miou:.3f}"
    )


@criterion("prompt protocol: byte-stable prompt, published replies parsed, offline stub", budget_s=5.0)
def test_prompt_protocol():
    q = TaskQuery("a bouquet of sunflowers", "put it into the vase")
    assert build_prompt(q) == build_prompt(q)
    assert build_prompt(q).encode() == build_prompt(q).encode()
    assert "O: a bouquet of sunflowers" in build_prompt(q)

    assert parse_answer("-A: The blossoms.") == "blossoms"
    assert parse_answer("-A: The stem.") == "stem"

    # full pipeline offline: stub resolution drives the part query
    backend = Backend(
        kind="stub",
        lookup={("sunflowers", "put it into the vase"): "The stem."},
    )
    resolved = resolve_part(TaskQuery("sunflowers", "put it into the vase"), backend)
    assert resolved.part_text == "stem"
    spec = flower_scene(rng_seed=7)
    field = generate_field(spec)
    table = {e.text: e for e in query_embeddings(spec)}
    result = extract(field, table["sunflowers"], table[resolved.part_text], FLOWER_CFG)
    gt = set(np.nonzero(field.labels == 1)[0].tolist())
    assert point_iou(result.toao, gt) >= 0.9


@criterion("metrics: enumerated IoU fixtures exact, report deterministic", budget_s=5.0)
def test_metrics():
    assert point_iou({1, 2, 3}, {1, 2, 3}) == 1.0
    assert point_iou({1, 2}, {3, 4}) == 0.0
    assert point_iou(set(range(1, 11)), set(range(6, 16))) == pytest.approx(5 / 15)

    spec = flower_scene(rng_seed=3)
    field = generate_field(spec)
    table = {e.text: e for e in query_embeddings(spec)}
    entries = []
    for part, label in (("stem", 1), ("blossom", 0)):
        result = extract(field, table["sunflowers"], table[part], FLOWER_CFG)
        gt = set(np.nonzero(field.labels == label)[0].tolist())
        entries.append((result, gt, part))
    first = evaluate(entries, "staged").to_json()
    second = evaluate(entries, "staged").to_json()
    assert first == second
    assert "stem" in first and "blossom" in first
