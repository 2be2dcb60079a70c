"""Forward model: spherical-reference amplitude and composite intensities.

The far-field intensity of a target object conjugated to a spherical
reference at relative shift ``t`` is

    I(q) = | F_o(q) + F_s(|q|, D) * exp(2*pi*1j * q . t) |^2 ,

where ``F_o`` is the complex Fourier transform of the target and ``F_s``
the analytic sphere form factor.  Frames are produced by evaluating the
target transform at in-plane rotated coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DetectorGeometry, rotate_coord
from .latent import LatentParams

__all__ = [
    "SphereReference",
    "ComplexModel",
    "sphere_ft",
    "composite_intensity",
    "render_frame",
    "interpolate_complex",
]


@dataclass(frozen=True)
class SphereReference:
    """Spherical reference particle.

    ``contrast`` is the electron-density ratio of the reference material
    to the target material (dimensionless); it multiplies the form factor
    linearly.
    """

    diameter_px: float
    contrast: float = 1.0

    def __post_init__(self):
        if self.diameter_px <= 0:
            raise ValueError("diameter_px must be > 0")
        if self.contrast <= 0:
            raise ValueError("contrast must be > 0")


@dataclass
class ComplexModel:
    """Complex Fourier amplitudes of the target on the detector lattice.

    Attributes
    ----------
    grid : ndarray of complex128, shape (side, side)
        F_o sampled at the lattice q-coordinates.
    reliable : ndarray of bool, shape (side, side)
        False where the value is unknown or poorly constrained.
    scale : float
        Global fluence factor; rendered intensities are multiplied by it.
    """

    grid: np.ndarray
    reliable: np.ndarray = None
    scale: float = 1.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.complex128)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError(f"model grid must be square, got {self.grid.shape}")
        if self.reliable is None:
            self.reliable = np.ones(self.grid.shape, dtype=bool)
        else:
            self.reliable = np.asarray(self.reliable, dtype=bool)
            if self.reliable.shape != self.grid.shape:
                raise ValueError("reliability mask shape mismatch")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")

    @property
    def side_px(self) -> int:
        return self.grid.shape[0]

    def copy(self) -> "ComplexModel":
        return ComplexModel(self.grid.copy(), self.reliable.copy(), self.scale)


def sphere_ft(q_mag, ref: SphereReference):
    """Analytic Fourier amplitude of a uniform sphere.

    amplitude = contrast * V(D) * 3 [sin x - x cos x] / x^3,
    with x = pi * |q| * D and V(D) = (pi/6) D^3.  The x -> 0 limit is
    contrast * V(D).  Vectorized over ``q_mag``.
    """
    q_mag = np.asarray(q_mag, dtype=np.float64)
    if np.any(q_mag < 0):
        raise ValueError("q_mag must be >= 0")
    d = ref.diameter_px
    volume = (np.pi / 6.0) * d**3
    x = np.pi * q_mag * d
    small = x < 0.05
    xs = np.where(small, 1.0, x)
    shape = 3.0 * (np.sin(xs) - xs * np.cos(xs)) / xs**3
    # small-x series avoids the sin/cos cancellation near the origin
    shape = np.where(small, 1.0 - x**2 / 10.0 + x**4 / 280.0, shape)
    out = ref.contrast * volume * shape
    return float(out) if out.ndim == 0 else out


def composite_intensity(f_obj: complex, q, diameter_px: float, shift_px, contrast: float = 1.0):
    """Single-pixel intensity of object plus shifted spherical reference."""
    q = np.asarray(q, dtype=np.float64)
    shift = np.asarray(shift_px, dtype=np.float64)
    q_mag = np.hypot(q[..., 0], q[..., 1])
    fs = sphere_ft(q_mag, SphereReference(diameter_px, contrast))
    ramp = np.exp(2j * np.pi * (q[..., 0] * shift[..., 0] + q[..., 1] * shift[..., 1]))
    amp = f_obj + fs * ramp
    out = amp.real**2 + amp.imag**2
    return float(out) if np.ndim(out) == 0 else out


def interpolate_complex(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a complex grid at fractional indices.

    Real and imaginary parts are interpolated separately; coordinates
    outside the grid contribute zero.
    """
    n0, n1 = grid.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    out = np.zeros(x.shape, dtype=np.complex128)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    for di, wi in ((0, 1.0 - fx), (1, fx)):
        for dj, wj in ((0, 1.0 - fy), (1, fy)):
            ii = ix + di
            jj = iy + dj
            inside = (ii >= 0) & (ii < n0) & (jj >= 0) & (jj < n1)
            w = wi * wj * inside
            vals = grid[np.clip(ii, 0, n0 - 1), np.clip(jj, 0, n1 - 1)]
            out += w * vals
    return out


def sample_rotated(model: ComplexModel, geom: DetectorGeometry, theta: float,
                   flat_indices: np.ndarray | None = None) -> np.ndarray:
    """Model values at detector pixels rotated in-plane by ``theta``.

    Evaluates F_o at R_{-theta} q_p for each requested pixel (all GOOD
    pixels when ``flat_indices`` is None) by bilinear interpolation.
    """
    if flat_indices is None:
        flat_indices = geom.good_indices()
    n = geom.side_px
    qs = geom.q.reshape(-1, 2)[flat_indices]
    qr = rotate_coord(qs, -theta)
    c = geom.center
    return interpolate_complex(model.grid, c + n * qr[:, 0], c + n * qr[:, 1])


def render_frame(model: ComplexModel, geom: DetectorGeometry, latent: LatentParams,
                 ref: SphereReference | None) -> np.ndarray:
    """Noise-free composite intensity image for one set of latents.

    GOOD pixels get the composite intensity scaled by ``model.scale``;
    HOLE and CORNER pixels are zero.  ``ref=None`` drops the reference
    term (conventional imaging without a holographic reference).
    """
    if model.side_px != geom.side_px:
        raise ValueError("model and geometry dimensions disagree")
    flat = geom.good_indices()
    f_obj = sample_rotated(model, geom, latent.theta, flat)

    qs = geom.q.reshape(-1, 2)[flat]
    if ref is not None:
        q_mag = np.hypot(qs[:, 0], qs[:, 1])
        fs = sphere_ft(q_mag, SphereReference(latent.diameter_px, ref.contrast))
        tx, ty = latent.shift_px
        phase = 2.0 * np.pi * (qs[:, 0] * tx + qs[:, 1] * ty)
        amp = f_obj + fs * np.exp(1j * phase)
    else:
        amp = f_obj
    vals = (amp.real**2 + amp.imag**2) * model.scale

    img = np.zeros(geom.n_pixels, dtype=np.float64)
    img[flat] = vals
    return img.reshape(geom.side_px, geom.side_px)
