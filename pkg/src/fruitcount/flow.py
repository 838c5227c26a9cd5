"""Sparse pyramidal Lucas-Kanade optical flow.

Flow is evaluated at one point per fruit (its region centroid). All points
of a frame pair are solved together as a batch: each point carries its own
21x21 (by default) window, sampled bilinearly with clamped borders.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .core import FrameImage

__all__ = [
    "DimensionMismatch",
    "FlowConfig",
    "FlowProvider",
    "FlowVector",
    "LucasKanadeFlow",
    "PointOutOfBounds",
    "build_pyramid",
    "estimate_flow",
    "mean_flow",
]

_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class DimensionMismatch(ValueError):
    pass


class PointOutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class FlowVector:
    d: tuple[float, float]
    valid: bool


@dataclass(frozen=True)
class FlowConfig:
    window: int = 21
    pyramid_levels: int = 3
    max_iterations: int = 30
    epsilon: float = 0.01
    min_eigenvalue: float = 1e-4
    max_displacement: float | None = None

    def __post_init__(self) -> None:
        if self.window < 5 or self.window % 2 == 0:
            raise ValueError(f"flow window must be odd and >= 5, got {self.window}")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def displacement_limit(self) -> float:
        if self.max_displacement is not None:
            return float(self.max_displacement)
        return float(self.window * 2 ** (self.pyramid_levels - 1))


class FlowProvider(Protocol):
    def __call__(
        self,
        prev: FrameImage,
        next: FrameImage,
        points: Sequence[tuple[float, float]],
        initial_guess=(0.0, 0.0),
    ) -> list[FlowVector]: ...


def build_pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    """Gaussian pyramid, finest level first. Level ``L`` pixel ``i`` sits at
    level-0 coordinate ``i * 2**L``."""
    pyr = [np.asarray(image, dtype=np.float64)]
    for _ in range(1, levels):
        blurred = ndimage.correlate1d(pyr[-1], _PYR_KERNEL, axis=0, mode="nearest")
        blurred = ndimage.correlate1d(blurred, _PYR_KERNEL, axis=1, mode="nearest")
        pyr.append(blurred[::2, ::2].copy())
    return pyr


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = img.shape
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.minimum(np.floor(rows).astype(np.intp), h - 2) if h > 1 else np.zeros(rows.shape, np.intp)
    c0 = np.minimum(np.floor(cols).astype(np.intp), w - 2) if w > 1 else np.zeros(cols.shape, np.intp)
    fr = rows - r0
    fc = cols - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[r0, c0] * (1.0 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1.0 - fc) + img[r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def _gray(frame) -> np.ndarray:
    if isinstance(frame, FrameImage):
        return frame.gray()
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("flow needs single-channel images")
    return arr


def estimate_flow(
    prev,
    next,
    points,
    initial_guess=(0.0, 0.0),
    config: FlowConfig | None = None,
) -> list[FlowVector]:
    """Track ``points`` from ``prev`` to ``next``.

    Args:
        prev, next: FrameImage or 2-D arrays of equal shape.
        points: (u, v) positions in ``prev``.
        initial_guess: a single (d_u, d_v) or one per point; seeds the search
            at the coarsest pyramid level.
        config: solver settings, defaults to :class:`FlowConfig`.

    Returns:
        One FlowVector per point. ``valid`` is False when the window's
        gradient matrix is near-singular, when the finest level fails to
        converge, or when the displacement exceeds the configured limit.

    Raises:
        DimensionMismatch: images differ in shape.
        PointOutOfBounds: a point lies outside ``prev``.
    """
    cfg = config or FlowConfig()
    I0 = _gray(prev)
    I1 = _gray(next)
    if I0.shape != I1.shape:
        raise DimensionMismatch(f"image shapes differ: {I0.shape} vs {I1.shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return []
    h, w = I0.shape
    out = (pts[:, 0] < 0) | (pts[:, 0] > h - 1) | (pts[:, 1] < 0) | (pts[:, 1] > w - 1)
    if np.any(out):
        raise PointOutOfBounds(f"point {tuple(pts[np.argmax(out)])} outside {h}x{w} image")
    guess = np.broadcast_to(np.asarray(initial_guess, dtype=np.float64), (n, 2)).copy()

    levels = cfg.pyramid_levels
    pyr0 = build_pyramid(I0, levels)
    pyr1 = build_pyramid(I1, levels)

    half = cfg.window // 2
    offs = np.arange(-half, half + 1, dtype=np.float64)
    off_r = np.repeat(offs, cfg.window)[None, :]
    off_c = np.tile(offs, cfg.window)[None, :]
    npix = cfg.window * cfg.window

    g = guess / 2 ** (levels - 1)
    valid = np.ones(n, dtype=bool)
    d = np.zeros((n, 2))
    for level in range(levels - 1, -1, -1):
        A, B = pyr0[level], pyr1[level]
        gu, gv = np.gradient(A)
        p = pts / 2**level
        rows = p[:, 0:1] + off_r
        cols = p[:, 1:2] + off_c
        T = _bilinear(A, rows, cols)
        Iu = _bilinear(gu, rows, cols)
        Iv = _bilinear(gv, rows, cols)
        Guu = np.einsum("ij,ij->i", Iu, Iu) / npix
        Guv = np.einsum("ij,ij->i", Iu, Iv) / npix
        Gvv = np.einsum("ij,ij->i", Iv, Iv) / npix
        tr = Guu + Gvv
        det = Guu * Gvv - Guv * Guv
        eig_min = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0)))
        solvable = eig_min >= cfg.min_eigenvalue
        safe_det = np.where(solvable, det, 1.0)

        d = np.zeros((n, 2))
        active = solvable.copy()
        converged = np.zeros(n, dtype=bool)
        for _ in range(cfg.max_iterations):
            if not np.any(active):
                break
            idx = np.nonzero(active)[0]
            shift = g[idx] + d[idx]
            J = _bilinear(B, rows[idx] + shift[:, 0:1], cols[idx] + shift[:, 1:2])
            err = T[idx] - J
            bu = np.einsum("ij,ij->i", err, Iu[idx]) / npix
            bv = np.einsum("ij,ij->i", err, Iv[idx]) / npix
            du = (Gvv[idx] * bu - Guv[idx] * bv) / safe_det[idx]
            dv = (Guu[idx] * bv - Guv[idx] * bu) / safe_det[idx]
            d[idx, 0] += du
            d[idx, 1] += dv
            done = np.hypot(du, dv) < cfg.epsilon
            converged[idx[done]] = True
            active[idx[done]] = False
        if level == 0:
            valid &= solvable & converged
        if level > 0:
            g = 2.0 * (g + d)

    flow = g + d
    valid &= np.hypot(flow[:, 0], flow[:, 1]) <= cfg.displacement_limit
    valid &= np.all(np.isfinite(flow), axis=1)
    return [FlowVector((float(f[0]), float(f[1])), bool(ok)) for f, ok in zip(flow, valid)]


class LucasKanadeFlow:
    """FlowProvider backed by :func:`estimate_flow`."""

    def __init__(self, config: FlowConfig | None = None):
        self.config = config or FlowConfig()

    def __call__(self, prev, next, points, initial_guess=(0.0, 0.0)) -> list[FlowVector]:
        return estimate_flow(prev, next, points, initial_guess, self.config)


def mean_flow(flows: Sequence[FlowVector]) -> tuple[float, float]:
    """Average of the valid flows, or (0, 0) if there are none."""
    good = [f.d for f in flows if f.valid]
    if not good:
        return (0.0, 0.0)
    arr = np.asarray(good, dtype=np.float64)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())
