import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_blob_mask(rng, h, w, n_pixels=40):
    """Random scattered mask with comfortable spread on both axes."""
    mask = np.zeros((h, w), dtype=bool)
    ys = rng.integers(0, h, size=n_pixels)
    xs = rng.integers(0, w, size=n_pixels)
    mask[ys, xs] = True
    return mask


def disk_mask(h, w, cy, cx, radius):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= radius ** 2
