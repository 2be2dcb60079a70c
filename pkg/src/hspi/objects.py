"""Ground-truth target objects and their Fourier models.

Targets are random agglomerates of small projected spheres ("blobs")
confined to a disc, mimicking the projected electron density of a
globular particle.  Heterogeneous variants add a mobile sub-unit either
in one of two discrete positions or continuously displaced from a
nominal position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .forward import ComplexModel
from .geometry import DetectorGeometry

__all__ = [
    "DensityGrid",
    "TargetSpec",
    "HeteroMode",
    "random_blob_object",
    "make_subunit",
    "heterogeneous_variant",
    "average_structure",
    "density_to_model",
    "save_density",
    "load_density",
]

# sub-pixel sampling factor used when rasterizing analytic blobs
_SUPERSAMPLE = 4


@dataclass
class DensityGrid:
    """Real-space, non-negative electron density in pixel units."""

    grid: np.ndarray
    extent_px: float | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError(f"density grid must be square, got {self.grid.shape}")
        if np.any(self.grid < 0):
            raise ValueError("density must be non-negative")

    @property
    def side_px(self) -> int:
        return self.grid.shape[0]

    def copy(self) -> "DensityGrid":
        return DensityGrid(self.grid.copy(), self.extent_px)


@dataclass(frozen=True)
class TargetSpec:
    """Parameters of the random blob agglomerate.

    ``extent_px`` is the radius of the disc that contains the whole
    object.  Blob centers are drawn uniformly inside the disc of radius
    ``extent_px - r_blob`` so no blob is clipped by the extent.
    """

    side_px: int
    n_blobs: int = 12
    blob_radius_px: tuple[float, float] = (2.0, 4.0)
    extent_px: float = 17.5
    density: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_blobs < 1:
            raise ValueError("n_blobs must be >= 1")
        lo, hi = self.blob_radius_px
        if not 0 < lo <= hi:
            raise ValueError("blob radius range must satisfy 0 < lo <= hi")
        if hi > self.extent_px:
            raise ValueError("blob radius exceeds object extent")
        if 2 * self.extent_px >= self.side_px:
            raise ValueError("object extent does not fit inside the grid")

    def to_dict(self) -> dict:
        return {
            "side_px": self.side_px,
            "n_blobs": self.n_blobs,
            "blob_radius_px": list(self.blob_radius_px),
            "extent_px": self.extent_px,
            "density": self.density,
            "seed": self.seed,
        }


class HeteroMode(Enum):
    TWO_STATE = "two_state"
    CONTINUOUS = "continuous"


def _projected_sphere(side_px: int, center: tuple[float, float], radius: float,
                      amplitude: float) -> np.ndarray:
    """Projected density 2*amp*sqrt(r^2 - d^2) of a solid sphere.

    Rasterized with sub-pixel supersampling so the integral tracks the
    analytic volume amp*(4/3)*pi*r^3 closely even for small radii.
    """
    f = _SUPERSAMPLE
    cx, cy = center
    # bounding box in whole pixels, padded by one
    lo_x = max(int(np.floor(cx - radius)) - 1, 0)
    hi_x = min(int(np.ceil(cx + radius)) + 2, side_px)
    lo_y = max(int(np.floor(cy - radius)) - 1, 0)
    hi_y = min(int(np.ceil(cy + radius)) + 2, side_px)
    if lo_x >= hi_x or lo_y >= hi_y:
        return np.zeros((side_px, side_px))
    sub = (np.arange(f) + 0.5) / f - 0.5
    xs = (np.arange(lo_x, hi_x)[:, None] + sub[None, :]).ravel()
    ys = (np.arange(lo_y, hi_y)[:, None] + sub[None, :]).ravel()
    d2 = (xs[:, None] - cx) ** 2 + (ys[None, :] - cy) ** 2
    prof = 2.0 * amplitude * np.sqrt(np.maximum(radius**2 - d2, 0.0))
    # average the f x f sub-samples of each pixel
    nx, ny = hi_x - lo_x, hi_y - lo_y
    prof = prof.reshape(nx, f, ny, f).mean(axis=(1, 3))
    out = np.zeros((side_px, side_px))
    out[lo_x:hi_x, lo_y:hi_y] = prof
    return out


def random_blob_object(spec: TargetSpec) -> DensityGrid:
    """Random agglomerate of projected spheres, deterministic in the seed."""
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    c = (spec.side_px - 1) / 2
    lo, hi = spec.blob_radius_px
    grid = np.zeros((spec.side_px, spec.side_px))
    for _ in range(spec.n_blobs):
        radius = rng.uniform(lo, hi)
        # uniform in the disc that keeps the blob inside the extent
        r_max = spec.extent_px - radius
        rad = r_max * np.sqrt(rng.uniform())
        ang = rng.uniform(0.0, 2.0 * np.pi)
        center = (c + rad * np.cos(ang), c + rad * np.sin(ang))
        grid += _projected_sphere(spec.side_px, center, radius, spec.density)
    return DensityGrid(grid, extent_px=spec.extent_px)


def make_subunit(side_px: int, radius_px: float = 1.4, density: float = 3.0,
                 extent_px: float | None = None) -> DensityGrid:
    """Single centered blob used as the mobile sub-unit."""
    c = (side_px - 1) / 2
    grid = _projected_sphere(side_px, (c, c), radius_px, density)
    return DensityGrid(grid, extent_px=extent_px if extent_px is not None else radius_px)


def shift_splat(grid: np.ndarray, shift: tuple[float, float]) -> np.ndarray:
    """Shift an image by a possibly fractional offset via bilinear splatting.

    Each pixel's mass is distributed over the four neighbours of its
    shifted position; mass pushed outside the grid is dropped.
    """
    dx, dy = shift
    n0, n1 = grid.shape
    ix0 = int(np.floor(dx))
    iy0 = int(np.floor(dy))
    fx = dx - ix0
    fy = dy - iy0
    out = np.zeros_like(grid)
    for di, wi in ((0, 1.0 - fx), (1, fx)):
        for dj, wj in ((0, 1.0 - fy), (1, fy)):
            w = wi * wj
            if w == 0.0:
                continue
            sx = ix0 + di
            sy = iy0 + dj
            src_x = slice(max(0, -sx), min(n0, n0 - sx))
            src_y = slice(max(0, -sy), min(n1, n1 - sy))
            dst_x = slice(max(0, sx), min(n0, n0 + sx))
            dst_y = slice(max(0, sy), min(n1, n1 + sy))
            out[dst_x, dst_y] += w * grid[src_x, src_y]
    return out


def _support_radius(grid: np.ndarray) -> float:
    """Largest center distance of any pixel carrying density."""
    n = grid.shape[0]
    c = (n - 1) / 2
    idx = np.argwhere(grid > 0)
    if idx.size == 0:
        return 0.0
    return float(np.max(np.hypot(idx[:, 0] - c, idx[:, 1] - c)))


def heterogeneous_variant(base: DensityGrid, subunit: DensityGrid, mode: HeteroMode,
                          draw, *, offset_px: tuple[float, float] = (8.0, 0.0),
                          sigma_px: float = 0.5) -> DensityGrid:
    """One realization of a heterogeneous target: base plus placed sub-unit.

    Parameters
    ----------
    draw
        Either a ``numpy.random.Generator`` or an explicit realization:
        for TWO_STATE a state index (0 or 1, the sub-unit goes to
        ``+offset_px`` or ``-offset_px``); for CONTINUOUS a 2-tuple of
        displacements in pixels added to the nominal position.
    """
    if base.side_px != subunit.side_px:
        raise ValueError("base and subunit grids must have the same shape")

    if mode is HeteroMode.TWO_STATE:
        if isinstance(draw, np.random.Generator):
            state = int(draw.integers(0, 2))
        else:
            state = int(draw)
            if state not in (0, 1):
                raise ValueError(f"two-state selector must be 0 or 1, got {state}")
        sign = 1.0 if state == 0 else -1.0
        disp = (sign * offset_px[0], sign * offset_px[1])
    elif mode is HeteroMode.CONTINUOUS:
        if isinstance(draw, np.random.Generator):
            disp = tuple(draw.normal(0.0, sigma_px, size=2))
        else:
            disp = (float(draw[0]), float(draw[1]))
    else:
        raise ValueError(f"unknown mode {mode}")

    # reject placements that push any sub-unit mass outside the grid
    n = base.side_px
    max_r = _support_radius(subunit.grid)
    if max_r + np.hypot(disp[0], disp[1]) > (n - 1) / 2:
        raise ValueError("sub-unit placement falls outside the grid")

    placed = shift_splat(subunit.grid, disp)
    extent = base.extent_px
    return DensityGrid(base.grid + placed, extent_px=extent)


def average_structure(base: DensityGrid, subunit: DensityGrid, mode: HeteroMode, *,
                      offset_px: tuple[float, float] = (8.0, 0.0),
                      sigma_px: float = 0.5) -> DensityGrid:
    """Ensemble-average density of the heterogeneous target.

    TWO_STATE averages the two placements.  CONTINUOUS convolves the
    sub-unit with the displacement distribution (the normal law combined
    with the bilinear splatting kernel), evaluated by quadrature.
    """
    if mode is HeteroMode.TWO_STATE:
        a = shift_splat(subunit.grid, offset_px)
        b = shift_splat(subunit.grid, (-offset_px[0], -offset_px[1]))
        return DensityGrid(base.grid + 0.5 * (a + b), extent_px=base.extent_px)

    # expected splat kernel: E_d[hat(i - d)] with d ~ N(0, sigma^2), per axis
    half = int(np.ceil(4 * sigma_px)) + 2
    taps = np.arange(-half, half + 1)
    du = np.linspace(-6 * sigma_px, 6 * sigma_px, 4001)
    pdf = np.exp(-0.5 * (du / sigma_px) ** 2)
    pdf /= np.trapz(pdf, du)
    kern = np.array([np.trapz(np.maximum(1.0 - np.abs(t - du), 0.0) * pdf, du) for t in taps])
    kern /= kern.sum()
    from scipy.signal import convolve2d

    blurred = convolve2d(subunit.grid, np.outer(kern, kern), mode="same")
    return DensityGrid(base.grid + blurred, extent_px=base.extent_px)


def density_to_model(density: DensityGrid, geom: DetectorGeometry | None = None,
                     scale: float = 1.0) -> ComplexModel:
    """Centered discrete Fourier transform of a density.

    The zero-frequency sample lands on the center pixel and equals the
    total density sum.  With a geometry, non-GOOD pixels are flagged
    unreliable.
    """
    g = density.grid
    f = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(g)))
    reliable = None
    if geom is not None:
        if geom.side_px != density.side_px:
            raise ValueError("geometry and density dimensions disagree")
        reliable = geom.good.copy()
    return ComplexModel(f, reliable, scale)


def save_density(density: DensityGrid, path: str | Path, *, seed: int | None = None,
                 spec: dict | None = None) -> None:
    """Raw little-endian float64 row-major grid plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    density.grid.astype("<f8").tofile(path)
    meta = {
        "side_px": density.side_px,
        "extent_px": density.extent_px,
        "seed": seed,
        "spec": spec,
        "dtype": "<f8",
        "order": "C",
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_density(path: str | Path) -> DensityGrid:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    n = meta["side_px"]
    grid = np.fromfile(path, dtype="<f8").reshape(n, n)
    return DensityGrid(grid, extent_px=meta.get("extent_px"))
