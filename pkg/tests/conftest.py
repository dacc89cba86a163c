from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from irsis.mask import BinaryMask, BoundingBox


def random_mask(rng: np.random.Generator, width: int, height: int, density: float = 0.4) -> BinaryMask:
    return BinaryMask.from_array(rng.random((height, width)) < density)


def random_box(rng: np.random.Generator, width: int, height: int) -> BoundingBox:
    x0 = int(rng.integers(0, width - 1))
    y0 = int(rng.integers(0, height - 1))
    x1 = int(rng.integers(x0 + 1, width + 1))
    y1 = int(rng.integers(y0 + 1, height + 1))
    return BoundingBox(x0, y0, x1, y1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260823)
