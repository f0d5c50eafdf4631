"""Canonical benchmark problems shared by tests, the CLI and the reports."""

from __future__ import annotations

import numpy as np

from ..mixture import GaussianMixture


def two_mode_mixture() -> GaussianMixture:
    """2-D, two anisotropic components; the standard test target."""
    return GaussianMixture(
        weights=np.array([0.6, 0.4]),
        means=np.array([[-1.0, -0.5], [1.2, 0.8]]),
        covs=np.array([[[0.30, 0.08], [0.08, 0.20]], [[0.25, -0.05], [-0.05, 0.35]]]),
    )


def standard_normal_1d() -> GaussianMixture:
    return GaussianMixture(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1, 1)))


def gaussian(mean, cov) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    return GaussianMixture(np.array([1.0]), mean[None], cov[None])


def point_mass(c) -> GaussianMixture:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return GaussianMixture(np.array([1.0]), c[None], np.zeros((1, c.size, c.size)))


TILT_C = np.array([0.8, 0.4])
PARETO_C = 6.0 * TILT_C
