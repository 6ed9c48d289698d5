import numpy as np
import pytest
from PIL import Image

from hfmextract.backbone import load_backbone


@pytest.fixture(scope="session")
def backbone50():
    return load_backbone("resnet50", weights="random", seed=1)


def save_image(path, array):
    """Write an (H, W, 3) uint8 array as an image file."""
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def flat_image(h, w, value=128):
    return np.full((h, w, 3), value, dtype=np.uint8)


def noise_image(h, w, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
