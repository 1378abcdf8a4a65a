import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """Four small random RGB images, deliberately non-square."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(42)
    for i in range(4):
        arr = rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / f"part_{i:02d}.png")
    return root


@pytest.fixture(scope="session")
def labeled_dir(tmp_path_factory):
    """Test-style layout with one normal and one defect subdirectory."""
    root = tmp_path_factory.mktemp("labeled")
    rng = np.random.default_rng(43)
    for sub, count in (("good", 2), ("dent", 2)):
        (root / sub).mkdir()
        for i in range(count):
            arr = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
            Image.fromarray(arr).save(root / sub / f"img_{i}.png")
    return root
