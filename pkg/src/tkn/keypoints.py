"""Keypoint <-> heatmap conversions shared by the detector and predictor.

A keypoint is a triple ``(x, y, v)``: normalized coordinates on the
``[-1, 1]`` image square (x along width, y along height, top-left corner at
``(-1, -1)``) plus a real intensity.  Batches travel as a :class:`Keypoints`
triple of ``[B, K]`` tensors, or flattened to ``[B, 3K]`` vectors in the
fixed order ``(x1, y1, v1, ..., xK, yK, vK)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .engine import Tensor, ops
from .errors import ShapeError


class Keypoints(NamedTuple):
    """Batched keypoint set: three ``[B, K]`` tensors."""

    x: Tensor
    y: Tensor
    v: Tensor

    @property
    def count(self) -> int:
        return self.x.shape[1]

    def numpy(self) -> np.ndarray:
        """[B, K, 3] array (x, y, v)."""
        return np.stack([self.x.data, self.y.data, self.v.data], axis=2)


def grid_vector(n: int) -> np.ndarray:
    """``n`` positions uniformly spanning [-1, 1] (e.g. n=4 -> [-1,-1/3,1/3,1])."""
    if n < 2:
        raise ValueError(f"grid needs at least 2 points, got {n}")
    return np.linspace(-1.0, 1.0, n)


def spatial_expectation(maps: Tensor) -> tuple[Tensor, Tensor]:
    """Expected (x, y) of each channel of a nonnegative ``[B, K, H, W]`` map.

    Marginalizes each channel over rows/columns, normalizes by the channel
    total, and takes the expectation against the [-1, 1] grid.  The caller
    guarantees nonnegative values with a positive per-channel sum (e.g. a
    spatially softmaxed feature channel, or a rendered Gaussian map).
    """
    if maps.ndim != 4:
        raise ShapeError(f"spatial_expectation expects [B,K,H,W], got {maps.shape}")
    _, _, h, w = maps.shape
    gx = Tensor(grid_vector(w))
    gy = Tensor(grid_vector(h))
    total = ops.sum(maps, axis=(2, 3), keepdims=False)  # [B,K]
    marg_x = ops.div(ops.sum(maps, axis=2), ops.reshape(total, total.shape + (1,)))
    marg_y = ops.div(ops.sum(maps, axis=3), ops.reshape(total, total.shape + (1,)))
    px = ops.sum(ops.mul(marg_x, ops.reshape(gx, (1, 1, w))), axis=2)
    py = ops.sum(ops.mul(marg_y, ops.reshape(gy, (1, 1, h))), axis=2)
    return px, py


def gaussian_maps(points: Keypoints, height: int, width: int, sigma: float) -> Tensor:
    """Render keypoints to ``[B, K, H, W]`` Gaussian bumps scaled by intensity.

    Each channel is the outer product of 1-D Gaussians
    ``exp(-(g - x)^2 / (2 sigma^2))`` evaluated on the [-1, 1] grids, times
    the keypoint's intensity.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    b, k = points.x.shape
    gx = Tensor(grid_vector(width).reshape(1, 1, width))
    gy = Tensor(grid_vector(height).reshape(1, 1, height))
    inv = 1.0 / (2.0 * sigma * sigma)
    dx = ops.sub(gx, ops.reshape(points.x, (b, k, 1)))
    dy = ops.sub(gy, ops.reshape(points.y, (b, k, 1)))
    x_vec = ops.exp(ops.mul(ops.mul(dx, dx), Tensor(-inv)))  # [B,K,W]
    y_vec = ops.exp(ops.mul(ops.mul(dy, dy), Tensor(-inv)))  # [B,K,H]
    maps = ops.mul(ops.reshape(y_vec, (b, k, height, 1)),
                   ops.reshape(x_vec, (b, k, 1, width)))
    return ops.mul(maps, ops.reshape(points.v, (b, k, 1, 1)))


def flatten_keypoints(points: Keypoints) -> Tensor:
    """[B, K] triple -> [B, 3K] in (x, y, v) interleaved order."""
    b, k = points.x.shape
    stacked = ops.concat(
        [ops.reshape(points.x, (b, k, 1)),
         ops.reshape(points.y, (b, k, 1)),
         ops.reshape(points.v, (b, k, 1))],
        axis=2,
    )
    return ops.reshape(stacked, (b, 3 * k))


def unflatten_keypoints(flat: Tensor) -> Keypoints:
    """[..., 3K] -> Keypoints with leading axes collapsed into the batch."""
    if flat.shape[-1] % 3 != 0:
        raise ShapeError(f"flattened keypoints need a 3K last axis, got {flat.shape}")
    k = flat.shape[-1] // 3
    b = int(np.prod(flat.shape[:-1])) if flat.ndim > 1 else 1
    grid = ops.reshape(flat, (b, k, 3))
    x = ops.reshape(ops.slice_axis(grid, 2, 0, 1), (b, k))
    y = ops.reshape(ops.slice_axis(grid, 2, 1, 2), (b, k))
    v = ops.reshape(ops.slice_axis(grid, 2, 2, 3), (b, k))
    return Keypoints(x, y, v)
