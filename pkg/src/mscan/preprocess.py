"""Image conditioning for crops: window extraction, CLAHE, z-scoring, resizing.

The fixed pipeline order is crop -> CLAHE -> normalize -> resize, see
:func:`prepare_crop`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CropSpec:
    center: tuple  # (row, col) in source pixels
    size_px: tuple = (128, 128)
    pad_value: int = 0

    def __post_init__(self):
        h, w = self.size_px
        if int(h) <= 0 or int(w) <= 0:
            raise ValueError("crop size must be positive")


@dataclass(frozen=True)
class ClaheParams:
    clip_limit: float = 2.0
    tiles: tuple = (8, 8)
    bins: int = 256

    def __post_init__(self):
        if not self.clip_limit >= 1.0:
            raise ValueError("clip_limit must be >= 1")
        if min(self.tiles) < 1 or self.bins < 2:
            raise ValueError("need at least one tile per axis and two bins")


def crop(image: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Cut an ``size_px`` window centred on ``spec.center``; out-of-image pixels are padded."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("crop needs a non-empty 2-D image")
    h, w = (int(v) for v in spec.size_px)
    top = int(np.floor(spec.center[0])) - h // 2
    left = int(np.floor(spec.center[1])) - w // 2
    out = np.full((h, w), spec.pad_value, dtype=image.dtype)
    r0, r1 = max(top, 0), min(top + h, image.shape[0])
    c0, c1 = max(left, 0), min(left + w, image.shape[1])
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = image[r0:r1, c0:c1]
    return out


def tile_edges(n: int, tiles: int) -> np.ndarray:
    """Tile boundaries along one axis; the last tile absorbs the remainder."""
    tiles = min(tiles, n)
    size = n // tiles
    edges = np.arange(tiles + 1) * size
    edges[-1] = n
    return edges


def _tile_luts(binned: np.ndarray, row_edges, col_edges, bins: int, clip_limit: float) -> np.ndarray:
    ty, tx = len(row_edges) - 1, len(col_edges) - 1
    luts = np.empty((ty, tx, bins))
    for i in range(ty):
        for j in range(tx):
            tile = binned[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins).astype(float)
            n = tile.size
            if np.isfinite(clip_limit):
                limit = max(clip_limit * n / bins, 1.0)
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / bins
            luts[i, j] = np.cumsum(hist) / n
    return luts


def _axis_weights(n: int, edges: np.ndarray):
    """Neighbouring tile indices and blend weight for each pixel along an axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=float)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    weight = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, weight


def clahe(image: np.ndarray, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation for uint16 images.

    Intensities are bucketed over the image's own ``[min, max]`` range and
    the equalised output is mapped back into that range, so constant images
    are returned unchanged and the value range never grows.
    """
    image = np.asarray(image)
    lo, hi = int(image.min()), int(image.max())
    if lo == hi:
        return image.copy()
    bins = params.bins
    binned = (image.astype(np.int64) - lo) * bins // (hi - lo + 1)
    row_edges = tile_edges(image.shape[0], params.tiles[0])
    col_edges = tile_edges(image.shape[1], params.tiles[1])
    luts = _tile_luts(binned, row_edges, col_edges, bins, params.clip_limit)

    r_lo, r_hi, wy = _axis_weights(image.shape[0], row_edges)
    c_lo, c_hi, wx = _axis_weights(image.shape[1], col_edges)
    wy, wx = wy[:, None], wx[None, :]
    b = binned
    top = (1 - wx) * luts[r_lo[:, None], c_lo[None, :], b] + wx * luts[r_lo[:, None], c_hi[None, :], b]
    bottom = (1 - wx) * luts[r_hi[:, None], c_lo[None, :], b] + wx * luts[r_hi[:, None], c_hi[None, :], b]
    mapped = (1 - wy) * top + wy * bottom
    out = np.rint(lo + mapped * (hi - lo))
    return np.clip(out, lo, hi).astype(image.dtype)


def normalize(image: np.ndarray) -> np.ndarray:
    """Per-image z-score; near-constant images become all zeros."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    if std < 1e-8:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def _source_coords(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image: np.ndarray, out) -> np.ndarray:
    """Bilinear resampling with half-pixel centres (align_corners=False)."""
    x = np.asarray(image, dtype=np.float64)
    h, w = int(out[0]), int(out[1])
    if h <= 0 or w <= 0:
        raise ValueError("output size must be positive")
    if (h, w) == x.shape:
        return x.copy()
    r0, r1, fy = _source_coords(x.shape[0], h)
    c0, c1, fx = _source_coords(x.shape[1], w)
    fy, fx = fy[:, None], fx[None, :]
    top = x[r0][:, c0] * (1 - fx) + x[r0][:, c1] * fx
    bottom = x[r1][:, c0] * (1 - fx) + x[r1][:, c1] * fx
    return top * (1 - fy) + bottom * fy


def prepare_crop(image, center, size_px, out_size, clahe_params: ClaheParams | None = ClaheParams()) -> np.ndarray:
    """crop -> CLAHE (optional) -> normalize -> resize, returned as float32."""
    patch = crop(image, CropSpec(tuple(center), tuple(size_px)))
    if clahe_params is not None:
        patch = clahe(patch, clahe_params)
    return resize_bilinear(normalize(patch), out_size).astype(np.float32)


def prepare_full(image, out_size) -> np.ndarray:
    """Whole-slice model input: normalize -> resize, float32."""
    return resize_bilinear(normalize(image), out_size).astype(np.float32)


def map_points(points, src_shape, dst_shape) -> np.ndarray:
    """Carry (row, col) positions through a half-pixel-centred resize."""
    p = np.asarray(points, dtype=float)
    scale = np.array([dst_shape[0] / src_shape[0], dst_shape[1] / src_shape[1]])
    return (p + 0.5) * scale - 0.5
