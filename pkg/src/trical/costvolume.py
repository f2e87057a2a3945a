"""Local correlation cost volume between two feature maps."""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.1


class CostVolumeError(ValueError):
    pass


def displacements(d: int) -> list[tuple[int, int]]:
    """(dy, dx) offsets in channel order: row-major over dy, then dx, from (-d, -d)."""
    return [(dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)]


def correlate(f_li: np.ndarray, f_cam: np.ndarray, d: int) -> np.ndarray:
    """Channel-normalized inner products over a (2d+1)^2 window.

    Inputs are (C, H, W); the result is (M, H, W) with M = (2d+1)^2 and
    ``out[m, y, x] = mean_c f_li[c, y, x] * f_cam[c, y+dy, x+dx]``. Target
    positions outside the map count as zero features.
    """
    if f_li.shape != f_cam.shape:
        raise CostVolumeError(f"feature shapes differ: {f_li.shape} vs {f_cam.shape}")
    if d < 0:
        raise CostVolumeError("radius must be non-negative")
    c, h, w = f_li.shape
    padded = np.zeros((c, h + 2 * d, w + 2 * d))
    padded[:, d : d + h, d : d + w] = f_cam
    out = np.empty(((2 * d + 1) ** 2, h, w))
    for m, (dy, dx) in enumerate(displacements(d)):
        window = padded[:, d + dy : d + dy + h, d + dx : d + dx + w]
        out[m] = np.einsum("chw,chw->hw", f_li, window) / c
    return out


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if not 0 < slope < 1:
        raise CostVolumeError("slope must be in (0, 1)")
    return np.where(x >= 0, x, x * slope)
