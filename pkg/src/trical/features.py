"""Fixed feature extractors and the shared LiDAR fusion.

Feature maps are channel-first ``(C, H, W)`` arrays. Image features are laid
out feature-major: for an input with ``n`` channels the output channels are
``[intensity x n, |d/dx| x n, |d/dy| x n, local std x n]``.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from trical.geometry import PointCloud

FEATURES_PER_CHANNEL = 4
DENSITY_RADIUS = 1.0


class FeatureError(ValueError):
    pass


def block_mean(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average-pool the last two axes down to (out_h, out_w)."""
    h, w = x.shape[-2:]
    if h % out_h or w % out_w:
        raise FeatureError(f"{h}x{w} does not pool evenly to {out_h}x{out_w}")
    by, bx = h // out_h, w // out_w
    return x.reshape(x.shape[:-2] + (out_h, by, out_w, bx)).mean(axis=(-3, -1))


def standardize_channels(fm: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per channel; constant channels become zero."""
    mean = fm.mean(axis=(1, 2), keepdims=True)
    std = fm.std(axis=(1, 2), keepdims=True)
    centered = fm - mean
    return np.divide(centered, std, out=np.zeros_like(centered), where=std > 1e-12)


def extract_image_features(img: np.ndarray, out_h: int = 16, out_w: int = 32, standardize: bool = True) -> np.ndarray:
    """Pooled intensity, absolute gradients and local standard deviation.

    ``img`` is (H, W) or (H, W, C). Gradients are forward differences at input
    resolution (zero in the last column / row) before pooling.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    x = np.moveaxis(img, -1, 0)
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :, :-1] = np.abs(np.diff(x, axis=2))
    gy[:, :-1, :] = np.abs(np.diff(x, axis=1))
    mean = block_mean(x, out_h, out_w)
    sq = block_mean(x * x, out_h, out_w)
    lstd = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    fm = np.concatenate([mean, block_mean(gx, out_h, out_w), block_mean(gy, out_h, out_w), lstd], axis=0)
    return standardize_channels(fm) if standardize else fm


def neighbor_counts(points: np.ndarray, radius: float) -> np.ndarray:
    tree = cKDTree(points)
    return tree.query_ball_point(points, r=radius, return_length=True) - 1


def zscore_columns(a: np.ndarray) -> np.ndarray:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    centered = a - mean
    return np.divide(centered, std, out=np.zeros_like(centered), where=std > 1e-12)


def extract_point_features(pc: PointCloud, radius: float = DENSITY_RADIUS, standardize: bool = True) -> np.ndarray:
    """Per-point (x, y, z, range, neighbor count within ``radius``), shape (N, 5)."""
    p = pc.points
    feats = np.column_stack([p, np.linalg.norm(p, axis=1), neighbor_counts(p, radius)]).astype(np.float64)
    return zscore_columns(feats) if standardize else feats


def common_channels(fm: np.ndarray, c: int) -> np.ndarray:
    """Fixed linear map to ``c`` channels.

    Wider inputs are reduced by averaging contiguous channel groups; narrower
    ones are tiled cyclically.
    """
    n = fm.shape[0]
    if n == c:
        return fm
    if n > c:
        return np.stack([g.mean(axis=0) for g in np.array_split(fm, c, axis=0)])
    return fm[np.arange(c) % n]


def fuse_lidar(point_fm: np.ndarray, depth_fm: np.ndarray, channels: int = 8) -> np.ndarray:
    """Unified LiDAR embedding: [standardized point half | standardized depth half]."""
    if point_fm.shape[1:] != depth_fm.shape[1:]:
        raise FeatureError(f"spatial size mismatch {point_fm.shape[1:]} vs {depth_fm.shape[1:]}")
    if channels % 2:
        raise FeatureError("fused channel count must be even")
    half = channels // 2
    p = standardize_channels(common_channels(point_fm, half))
    d = standardize_channels(common_channels(depth_fm, half))
    return np.concatenate([p, d], axis=0)


def camera_embedding(fm: np.ndarray, channels: int = 8) -> np.ndarray:
    """Collapse image features to one map per feature kind, then tile to ``channels``."""
    per_kind = common_channels(fm, FEATURES_PER_CHANNEL)
    return standardize_channels(common_channels(per_kind, channels))
