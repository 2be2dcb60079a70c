"""Detector pixel lattice, q-coordinates and validity masks.

The detector is a square array with an odd number of pixels per side, so
that the zero-frequency pixel sits exactly on the lattice.  Spatial
frequencies are measured in cycles per array length,

    q_ij = ((i - c) / N, (j - c) / N),   c = (N - 1) / 2,

which makes the phase ramp ``exp(2*pi*1j * q . t)`` dimensionless for a
shift ``t`` given in pixels.  A circular aperture and a central beamstop
hole classify each pixel as GOOD, HOLE or CORNER.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

__all__ = ["PixelClass", "DetectorGeometry", "build_detector", "rotate_coord"]


class PixelClass(IntEnum):
    GOOD = 0
    HOLE = 1
    CORNER = 2


@dataclass(frozen=True)
class DetectorGeometry:
    """Immutable pixel lattice shared by the simulator and reconstruction.

    Attributes
    ----------
    side_px : int
        Edge length of the square array (odd).
    aperture_radius_px : float
        Radius of the circular detector in pixels.
    hole_radius_px : float
        Radius of the central beamstop hole in pixels.
    q : ndarray, shape (side, side, 2)
        Per-pixel spatial frequency in inverse array-length units.
    mask : ndarray of uint8, shape (side, side)
        Per-pixel :class:`PixelClass` value.
    """

    side_px: int
    aperture_radius_px: float
    hole_radius_px: float
    q: np.ndarray
    mask: np.ndarray
    radius_px: np.ndarray = field(repr=False, default=None)

    @property
    def center(self) -> float:
        return (self.side_px - 1) / 2

    @property
    def good(self) -> np.ndarray:
        return self.mask == PixelClass.GOOD

    @property
    def n_good(self) -> int:
        return int(np.count_nonzero(self.mask == PixelClass.GOOD))

    @property
    def n_hole(self) -> int:
        return int(np.count_nonzero(self.mask == PixelClass.HOLE))

    @property
    def n_corner(self) -> int:
        return int(np.count_nonzero(self.mask == PixelClass.CORNER))

    @property
    def n_pixels(self) -> int:
        return self.side_px * self.side_px

    def good_indices(self) -> np.ndarray:
        """Flat (row-major) indices of GOOD pixels, ascending."""
        return np.flatnonzero(self.mask.ravel() == PixelClass.GOOD)

    def to_dict(self) -> dict:
        return {
            "side_px": self.side_px,
            "aperture_radius_px": self.aperture_radius_px,
            "hole_radius_px": self.hole_radius_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorGeometry":
        return build_detector(d["side_px"], d["aperture_radius_px"], d["hole_radius_px"])


def build_detector(side_px: int, aperture_radius_px: float, hole_radius_px: float) -> DetectorGeometry:
    """Construct the detector lattice with its pixel classification.

    A pixel at radius r (in pixels from the exact center) is HOLE when
    r < hole_radius_px, CORNER when r >= aperture_radius_px, GOOD
    otherwise.

    Raises
    ------
    ValueError
        If ``side_px`` is even or below 3, or the radii are inconsistent.
    """
    if side_px < 3 or side_px % 2 == 0:
        raise ValueError(f"side_px must be odd and >= 3, got {side_px}")
    if not 0 <= hole_radius_px < aperture_radius_px:
        raise ValueError(
            f"need 0 <= hole_radius_px < aperture_radius_px, got {hole_radius_px}, {aperture_radius_px}"
        )
    if aperture_radius_px > side_px / 2:
        raise ValueError(f"aperture radius {aperture_radius_px} exceeds side_px/2 = {side_px / 2}")

    c = (side_px - 1) / 2
    ax = np.arange(side_px, dtype=np.float64) - c
    dx, dy = np.meshgrid(ax, ax, indexing="ij")
    radius = np.hypot(dx, dy)

    q = np.stack([dx, dy], axis=-1) / side_px

    mask = np.full((side_px, side_px), PixelClass.GOOD, dtype=np.uint8)
    mask[radius < hole_radius_px] = PixelClass.HOLE
    mask[radius >= aperture_radius_px] = PixelClass.CORNER

    for arr in (q, mask, radius):
        arr.flags.writeable = False
    return DetectorGeometry(side_px, float(aperture_radius_px), float(hole_radius_px), q, mask, radius)


def rotate_coord(q: np.ndarray, theta: float) -> np.ndarray:
    """Rotate 2-vectors by ``theta`` radians.

    Accepts a single vector or an array of vectors with the components in
    the last axis.
    """
    q = np.asarray(q, dtype=np.float64)
    ct, st = np.cos(theta), np.sin(theta)
    out = np.empty_like(q)
    out[..., 0] = ct * q[..., 0] - st * q[..., 1]
    out[..., 1] = st * q[..., 0] + ct * q[..., 1]
    return out
