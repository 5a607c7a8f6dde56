import numpy as np
import pytest

from layerguard.detector import DetectorConfig, fit_detector
from layerguard.synthetic import gaussian_blobs
from layerguard.toynet import ToyNetwork, export_representations, train_toy


@pytest.fixture(scope="session")
def blob_net():
    """Small trained classifier on overlapping 3-class blobs."""
    x, y = gaussian_blobs(900, num_classes=3, dim=2, spread=1.1, seed=11)
    net = ToyNetwork([2, 16, 16, 3], ["tanh", "tanh"], seed=3)
    net = train_toy(net, x, y, epochs=120, lr=0.1, seed=3)
    return net


@pytest.fixture(scope="session")
def blob_calibration(blob_net):
    x, y = gaussian_blobs(900, num_classes=3, dim=2, spread=1.1, seed=12)
    return export_representations(blob_net, x, y), x, y


@pytest.fixture(scope="session")
def blob_test(blob_net):
    x, y = gaussian_blobs(600, num_classes=3, dim=2, spread=1.1, seed=13)
    return export_representations(blob_net, x, y), x, y


@pytest.fixture(scope="session")
def blob_detector(blob_calibration):
    ds, _, _ = blob_calibration
    config = DetectorConfig(alpha=0.05, seed=5, dim_reduce=None)
    return fit_detector(ds, config)
