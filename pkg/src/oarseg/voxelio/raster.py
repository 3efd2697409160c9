"""Polygon scan conversion and instance box extraction."""

from __future__ import annotations

import warnings

import numpy as np

from oarseg.voxelio.types import Contour, InstanceRecord

ENLARGE_FACTOR = 1.2
MIN_AREA_PX = 10


class EmptyMaskError(ValueError):
    """Raised when an instance mask has no set pixel at all."""


def polygon_area(points: np.ndarray) -> float:
    """Signed shoelace area."""
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def rasterize_contour(contour: Contour | np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Even-odd fill sampled at pixel centers.

    A pixel is set iff ``(c + 0.5, r + 0.5)`` lies inside the closed polygon.
    Zero-area polygons give an empty mask and a warning.
    """
    pts = contour.points if isinstance(contour, Contour) else np.asarray(contour, dtype=np.float64)
    rows, cols = grid
    mask = np.zeros((rows, cols), dtype=bool)
    if abs(polygon_area(pts)) < 1e-12:
        warnings.warn("degenerate polygon with zero area rasterized to an empty mask", stacklevel=2)
        return mask

    # only rows whose centers fall inside the vertical extent can be set
    r_lo = max(int(np.floor(pts[:, 1].min() - 0.5)), 0)
    r_hi = min(int(np.ceil(pts[:, 1].max() - 0.5)) + 1, rows)
    if r_lo >= r_hi:
        return mask
    ys = (np.arange(r_lo, r_hi) + 0.5)[:, None]
    xs = (np.arange(cols) + 0.5)[None, :]
    inside = np.zeros((r_hi - r_lo, cols), dtype=bool)

    xj, yj = pts[-1]
    for xi, yi in pts:
        crosses = (yi > ys) != (yj > ys)
        if yi != yj:
            x_at = xi + (ys - yi) * (xj - xi) / (yj - yi)
            inside ^= crosses & (xs < x_at)
        xj, yj = xi, yi
    mask[r_lo:r_hi] = inside
    return mask


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Smallest box ``(x0, y0, x1, y1)`` covering every set pixel (pixel-corner coordinates)."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("mask has no set pixel")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def enlarge_bbox(box, factor: float, grid: tuple[int, int]) -> tuple[float, float, float, float]:
    """Scale width and height about the box center, then clip to the slice."""
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) * factor / 2, (y1 - y0) * factor / 2
    return clip_bbox((cx - hw, cy - hh, cx + hw, cy + hh), grid)


def clip_bbox(box, grid: tuple[int, int]) -> tuple[float, float, float, float]:
    rows, cols = grid
    x0, y0, x1, y1 = box
    return (
        float(min(max(x0, 0.0), cols)),
        float(min(max(y0, 0.0), rows)),
        float(min(max(x1, 0.0), cols)),
        float(min(max(y1, 0.0), rows)),
    )


def compute_instance_bbox(
    mask: np.ndarray,
    enlarge: float = ENLARGE_FACTOR,
    min_area: int = MIN_AREA_PX,
    class_id: int = 1,
    slice_index: int = -1,
) -> InstanceRecord | None:
    """Turn a binary instance mask into an :class:`InstanceRecord`.

    Returns ``None`` when the mask covers fewer than ``min_area`` pixels; the
    area filter looks at the mask itself, before any enlargement.  An all-zero
    mask raises :class:`EmptyMaskError`.
    """
    mask = np.asarray(mask, dtype=bool)
    area = int(mask.sum())
    if area == 0:
        raise EmptyMaskError("mask has no set pixel")
    if area < min_area:
        return None
    tight = tight_bbox(mask)
    box = enlarge_bbox(tight, enlarge, mask.shape)
    return InstanceRecord(
        class_id=class_id,
        bbox=box,
        mask=mask,
        area_px=area,
        slice_index=slice_index,
        tight_bbox=tight,
    )
