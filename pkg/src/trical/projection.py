"""Scaled depth / feature projection, bilinear resizing and image export.

Projection uses round-half-away-from-zero pixel snapping and a z-buffer that
keeps the nearest point; exact depth ties go to the lowest input index.
Depth maps hold raw metric depth with 0 marking empty pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from trical.geometry import PointCloud


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ProjectionError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ProjectionError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class ScaledIntrinsics:
    """Intrinsics rescaled to another resolution, plus the scale matrix used."""

    intrinsics: Intrinsics
    scale: np.ndarray
    original: Intrinsics

    @property
    def fx(self):
        return self.intrinsics.fx

    @property
    def fy(self):
        return self.intrinsics.fy

    @property
    def cx(self):
        return self.intrinsics.cx

    @property
    def cy(self):
        return self.intrinsics.cy

    def matrix(self) -> np.ndarray:
        return self.intrinsics.matrix()


def scale_intrinsics(k: Intrinsics, w_out: int, h_out: int) -> ScaledIntrinsics:
    if w_out < 1 or h_out < 1:
        raise ProjectionError("output size must be at least 1x1")
    sx = w_out / k.width
    sy = h_out / k.height
    scaled = Intrinsics(k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy, int(w_out), int(h_out))
    return ScaledIntrinsics(scaled, np.diag([sx, sy, 1.0]), k)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def project_pixels(points: np.ndarray, k) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel coordinates (u, v) of camera-frame points."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    u = round_half_away(k.fx * x / z + k.cx).astype(np.int64)
    v = round_half_away(k.fy * y / z + k.cy).astype(np.int64)
    return u, v


def _zbuffer(points: np.ndarray, k, w: int, h: int):
    """Indices of winning points and their flat pixel ids."""
    if points.shape[0] and not np.all(points[:, 2] > 0):
        raise ProjectionError("projection requires z > 0 for every point")
    u, v = project_pixels(points, k)
    inside = np.flatnonzero((u >= 0) & (u < w) & (v >= 0) & (v < h))
    pix = v[inside] * w + u[inside]
    # nearest depth first; lexsort is stable so equal depths keep index order
    order = np.lexsort((inside, points[inside, 2], pix))
    pix_sorted = pix[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    return inside[order[first]], pix_sorted[first]


def project_depth(pc: PointCloud, k: ScaledIntrinsics, w: int, h: int) -> np.ndarray:
    """Rasterize a camera-frame cloud into an (h, w) depth map."""
    pts = pc.points
    depth = np.zeros(h * w)
    idx, pix = _zbuffer(pts, k, w, h)
    depth[pix] = pts[idx, 2]
    return depth.reshape(h, w)


def project_features(pc: PointCloud, feats: np.ndarray, k: ScaledIntrinsics, w: int, h: int) -> np.ndarray:
    """Scatter per-point feature vectors into a (C, h, w) grid with the depth z-buffer rule."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] != len(pc):
        raise ProjectionError(f"feature count {feats.shape[0]} != point count {len(pc)}")
    out = np.zeros((feats.shape[1], h * w))
    idx, pix = _zbuffer(pc.points, k, w, h)
    out[:, pix] = feats[idx].T
    return out.reshape(feats.shape[1], h, w)


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, w_out: int, h_out: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) image, half-pixel centers."""
    if w_out < 1 or h_out < 1:
        raise ProjectionError("output size must be at least 1x1")
    img = np.asarray(img, dtype=np.float64)
    h_in, w_in = img.shape[:2]
    if (h_in, w_in) == (h_out, w_out):
        return img.copy()
    y0, y1, fy = _bilinear_axis(h_in, h_out)
    x0, x1, fx = _bilinear_axis(w_in, w_out)
    extra = (None,) * (img.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# --- export ---------------------------------------------------------------


def write_depth_pgm(path, depth: np.ndarray, z_max: float) -> None:
    """16-bit binary PGM (big-endian per the netpbm format)."""
    q = np.clip(np.round(np.asarray(depth) / z_max * 65535.0), 0, 65535).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def _read_netpbm(path, magic: bytes):
    """Header fields and raw pixel bytes of a binary netpbm file."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ProjectionError(f"{path}: truncated header at byte {pos}")
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise ProjectionError(f"{path}: expected {magic.decode()} file")
    # exactly one whitespace byte separates header and raster
    return int(fields[1]), int(fields[2]), int(fields[3]), data[pos + 1 :], pos + 1


def read_pgm16(path) -> np.ndarray:
    w, h, maxval, raster, offset = _read_netpbm(path, b"P5")
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(raster) < need:
        raise ProjectionError(f"{path}: truncated pixel data at byte {offset + len(raster)}")
    return np.frombuffer(raster, dtype=dtype, count=w * h).reshape(h, w)


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit binary PPM from an (H, W, 3) uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    w, h, maxval, raster, offset = _read_netpbm(path, b"P6")
    if maxval != 255:
        raise ProjectionError(f"{path}: only 8-bit PPM is supported")
    if len(raster) < w * h * 3:
        raise ProjectionError(f"{path}: truncated pixel data at byte {offset + len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


_LUT = None


def turbo_lut() -> np.ndarray:
    global _LUT
    if _LUT is None:
        text = resources.files("trical").joinpath("data/turbo_lut.txt").read_text()
        _LUT = np.array([[int(v) for v in line.split()] for line in text.splitlines() if line.strip()], dtype=np.uint8)
    return _LUT


def overlay_depth(gray: np.ndarray, depth: np.ndarray, z_max: float) -> np.ndarray:
    """Color-code nonzero depth pixels over a grayscale frame in [0, 1]."""
    g = np.clip(np.round(np.asarray(gray) * 255.0), 0, 255).astype(np.uint8)
    out = np.repeat(g[:, :, None], 3, axis=2)
    mask = depth > 0
    # near points are red, far points blue
    idx = np.clip(np.round((1.0 - depth[mask] / z_max) * 255.0), 0, 255).astype(np.int64)
    out[mask] = turbo_lut()[idx]
    return out
