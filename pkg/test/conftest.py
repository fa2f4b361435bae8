# SHARED FIXTURES

import os

os.environ.setdefault("MICRODIFF_LOG_TO_FILE", "0")
os.environ.setdefault("MICRODIFF_LOG_LEVEL", "WARNING")

import numpy as np
import pytest
import torch

from src.mnist_data.idx_reader import Bitmap
from src.mnist_data.idx_reader import write_idx


def pytest_addoption(parser):
    parser.addoption("--runslow", action = "store_true", default = False, help = "run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return

    skip_slow = pytest.mark.skip(reason = "needs --runslow")

    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse = True)
def seeded_torch():
    torch.manual_seed(0)


@pytest.fixture
def digit_stack():
    """ Four 28x28 blobs of increasing thickness, uint8. """
    yy, xx  = np.mgrid[0:28, 0:28]
    radius  = np.hypot(yy - 13.5, xx - 13.5)
    images  = [np.where(np.abs(radius - 8.0) < width, 255, 0) for width in (1.0, 2.0, 3.0, 4.0)]

    return np.stack(images).astype(np.uint8)


@pytest.fixture
def idx_file(tmp_path, digit_stack):
    return write_idx(tmp_path / "images.idx", digit_stack)


@pytest.fixture
def small_bitmap():
    """ 4x4 field with a stiff column on the left. """
    values        = np.zeros((4, 4), dtype = np.uint8)
    values[:, :2] = 255

    return Bitmap(values)
