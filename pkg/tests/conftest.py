from __future__ import annotations

import numpy as np
import pytest

from toao.field import SemanticPointField
from toao.geometry import Pose


def random_pose(rng: np.random.Generator) -> Pose:
    q = rng.normal(size=4)
    return Pose.from_quaternion(*q, translation=rng.normal(size=3))


def make_field(
    rng: np.random.Generator,
    n: int,
    d_dino: int = 8,
    d_clip: int = 8,
    spread: float = 1.0,
) -> SemanticPointField:
    positions = rng.uniform(0.0, spread, size=(n, 3))
    dino = rng.normal(size=(n, d_dino))
    clip = rng.normal(size=(3, n, d_clip))
    return SemanticPointField(positions, dino, clip)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
