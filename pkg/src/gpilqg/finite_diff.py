"""Batched central finite differences for black-box maps."""

from __future__ import annotations

from typing import Callable

import numpy as np

REL_STEP = 1e-6
MIN_STEP = 1e-6


def step_sizes(z: np.ndarray) -> np.ndarray:
    """Per-coordinate step ``max(1e-6, 1e-6 * |z|)``."""
    return np.maximum(MIN_STEP, REL_STEP * np.abs(z))


def jacobian(fn: Callable[[np.ndarray], np.ndarray], z: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian of a batched map.

    ``fn`` must accept an array ``(N, d)`` and return ``(N, *out)``. For input
    ``z`` of shape ``(N, d)`` the result has shape ``(N, *out, d)``, so the last
    axis indexes the differentiation variable.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    N, d = z.shape
    h = step_sizes(z)  # (N, d)
    eye = np.eye(d)
    plus = z[:, None, :] + eye[None] * h[:, :, None]
    minus = z[:, None, :] - eye[None] * h[:, :, None]
    both = np.concatenate([plus, minus], axis=1).reshape(N * 2 * d, d)
    out = np.asarray(fn(both))
    out = out.reshape(N, 2, d, *out.shape[1:])
    diff = (out[:, 0] - out[:, 1]) / (2.0 * h.reshape(N, d, *([1] * (out.ndim - 3))))
    # (N, d, *out) -> (N, *out, d)
    return np.moveaxis(diff, 1, -1)
