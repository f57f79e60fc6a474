"""Shared fixtures: small synthetic image trees."""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

TEN_IMAGE_LAYOUT = {"alice": 4, "bob": 3, "carol": 3}


def make_tree(root: Path, layout: dict, seed: int = 1,
              size: int = 64) -> Path:
    """One folder per identity, PNG noise images inside."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for identity, n in layout.items():
        folder = root / identity
        folder.mkdir(exist_ok=True)
        for k in range(n):
            arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            Image.fromarray(arr).save(folder / f"img{k}.png")
    return root


@pytest.fixture
def ten_image_tree(tmp_path) -> Path:
    return make_tree(tmp_path / "imgs", TEN_IMAGE_LAYOUT)
