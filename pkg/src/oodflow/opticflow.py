"""Dense optic flow from the brightness-constancy constraint.

Per-pixel motion (u, v) satisfies ix*u + iy*v + it = 0 up to noise; a
windowed least-squares solve with Tikhonov regularization (Lucas-Kanade
style, single scale) recovers it.  Flat or aperture-limited neighborhoods
are biased toward zero flow by the regularizer instead of blowing up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .gridio import frame2d


@dataclass(frozen=True)
class FlowParams:
    """Solver parameters.

    window_radius of 2 means a 5x5 summation window; regularization is the
    Tikhonov weight added to the normal-equation diagonal; presmooth_sigma
    is a Gaussian blur applied to both frames (0 disables it).
    """

    window_radius: int = 2
    regularization: float = 1e-3
    presmooth_sigma: float = 1.0

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        if self.presmooth_sigma < 0:
            raise ValueError("presmooth_sigma must be >= 0")


@dataclass(frozen=True)
class GradientField:
    """Spatial and temporal intensity derivatives of a frame pair."""

    ix: np.ndarray
    iy: np.ndarray
    it: np.ndarray


def _prepare_pair(frame_a, frame_b, params: FlowParams):
    a = frame2d(frame_a).astype(np.float64)
    b = frame2d(frame_b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    if params.presmooth_sigma > 0:
        a = gaussian_filter(a, params.presmooth_sigma, mode="nearest")
        b = gaussian_filter(b, params.presmooth_sigma, mode="nearest")
    return a, b


def _central_diff(img: np.ndarray):
    """Central differences with replicate padding at the borders."""
    padded = np.pad(img, 1, mode="edge")
    dx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    dy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return dx, dy


def gradients(frame_a, frame_b, params: FlowParams = FlowParams()) -> GradientField:
    """Estimate ix, iy (from the two-frame average) and it = frame_b - frame_a.

    Spatial derivatives are central differences of the average of the two
    (optionally presmoothed) frames; the average keeps them symmetric in the
    frame pair.  Units: intensity per pixel for ix/iy, intensity per frame
    for it.
    """
    a, b = _prepare_pair(frame_a, frame_b, params)
    avg = 0.5 * (a + b)
    ix, iy = _central_diff(avg)
    it = b - a
    return GradientField(
        ix=ix.astype(np.float32), iy=iy.astype(np.float32), it=it.astype(np.float32)
    )


def lucas_kanade(frame_a, frame_b, params: FlowParams = FlowParams()) -> np.ndarray:
    """Dense flow between two frames; returns a (2, H, W) grid of (u, v).

    Solves, per pixel, the regularized 2x2 normal equations

        (S_xx + lam   S_xy      ) (u)   (-S_xt)
        (S_xy         S_yy + lam) (v) = (-S_yt)

    where S_* are sums of gradient products over the window (replicate
    padding at borders).  Output flow is in pixels per frame: u along the
    width axis, v along the height axis.
    """
    a, b = _prepare_pair(frame_a, frame_b, params)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("frames contain non-finite values")
    avg = 0.5 * (a + b)
    ix, iy = _central_diff(avg)
    it = b - a

    size = 2 * params.window_radius + 1
    area = float(size * size)

    def wsum(z):
        return uniform_filter(z, size=size, mode="nearest") * area

    lam = params.regularization
    sxx = wsum(ix * ix) + lam
    syy = wsum(iy * iy) + lam
    sxy = wsum(ix * iy)
    sxt = wsum(ix * it)
    syt = wsum(iy * it)

    det = sxx * syy - sxy * sxy
    # det >= lam^2 > 0 whenever regularization is on; the guard only matters
    # for lam == 0 at fully degenerate pixels, where the RHS is zero too.
    det = np.where(det > 0, det, 1.0)
    u = (-sxt * syy + sxy * syt) / det
    v = (sxy * sxt - sxx * syt) / det
    return np.stack([u, v]).astype(np.float32)
