"""Synthetic data for desk-scale experiments and the demo pipeline."""

import numpy as np


def gaussian_blobs(n, num_classes=3, dim=2, spread=1.0, radius=3.0, seed=0,
                    box=(0.0, 1.0), box_margin=1.0):
    """Gaussian class blobs on a circle, squashed into a box.

    Centers sit evenly on a circle of the given radius; samples are
    min-max-rescaled into the box so they can serve as network inputs with a
    known input range. box_margin > 1 shrinks the blobs into the middle of
    the box, leaving most of the input range off-manifold (the situation of
    image data inside a pixel hypercube). Returns (x, y).
    """
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1 % dim] = radius * np.sin(angles)
    y = rng.integers(0, num_classes, size=n)
    x = centers[y] + rng.normal(0.0, spread, size=(n, dim))
    lo, hi = box
    # Fixed squash based on the blob geometry, not the sample, so train and
    # test draws share one coordinate system.
    span = (radius + 4.0 * spread) * box_margin
    x = (x + span) / (2.0 * span)
    x = lo + np.clip(x, 0.0, 1.0) * (hi - lo)
    return x, y


def uniform_noise(n, dim, box=(0.0, 1.0), seed=0):
    """Inputs drawn uniformly over the valid input box (OOD injection)."""
    rng = np.random.default_rng(seed)
    lo, hi = box
    return lo + rng.random((n, dim)) * (hi - lo)


def blob_geometry(num_classes=3, dim=2, spread=1.0, radius=3.0, box=(0.0, 1.0),
                  box_margin=1.0):
    """Mapped blob centers and per-component deviation inside the box."""
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1 % dim] = radius * np.sin(angles)
    lo, hi = box
    span = (radius + 4.0 * spread) * box_margin
    mapped = lo + (centers + span) / (2.0 * span) * (hi - lo)
    sigma = spread / (2.0 * span) * (hi - lo)
    return mapped, sigma


def bayes_classify(x, centers, sigma):
    """True-posterior class of points under the equal-weight Gaussian mixture.

    The ground-truth oracle for deciding whether a perturbed input still
    belongs to its source class.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2 / (sigma ** 2), axis=1)
