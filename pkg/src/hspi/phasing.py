"""Support-constrained difference-map phase retrieval.

Fills unreliable Fourier pixels of a reconstructed model and produces a
real-space image.  Two data constraints are supported: complex mode pins
the known complex values at reliable pixels (holographic arm, no twin
ambiguity) and magnitude mode rescales moduli to known magnitudes
(conventional arm after an intensity reconstruction).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .forward import ComplexModel
from .objects import DensityGrid

__all__ = ["SupportMask", "PhaseFillResult", "estimate_support", "difference_map"]

log = logging.getLogger(__name__)

_MAX_AREA_FRACTION = 0.25


@dataclass
class SupportMask:
    """Binary real-space support; area below 25% preserves oversampling."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        n_on = int(np.count_nonzero(self.mask))
        if n_on == 0:
            raise ValueError("support mask is empty")
        if n_on >= _MAX_AREA_FRACTION * self.mask.size:
            raise ValueError(
                f"support covers {n_on / self.mask.size:.1%} of the grid; "
                f"must stay below {_MAX_AREA_FRACTION:.0%} to preserve oversampling")

    @property
    def area_fraction(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.mask.size

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.mask.astype(np.uint8).tofile(path)


def _centered_ifft(grid: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(grid)))


def _centered_fft(img: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img)))


def estimate_support(model: ComplexModel, q_band: tuple[float, float] = (0.075, 0.25),
                     threshold_frac: float = 0.05) -> SupportMask:
    """Support from the autocorrelation of the band-filtered object.

    Keeps |F|^2 inside the radial band ``q_band`` (inverse-pixel units,
    the lattice edge is at 0.5), inverse transforms to the band-limited
    autocorrelation, thresholds at ``threshold_frac`` of the maximum and
    closes small gaps morphologically.  The result is centered since the
    autocorrelation of any object is.
    """
    n = model.side_px
    c = (n - 1) / 2
    ax = (np.arange(n) - c) / n
    q_mag = np.hypot(ax[:, None], ax[None, :])
    lo, hi = q_band
    band = (q_mag >= lo) & (q_mag <= hi)
    power = np.abs(model.grid) ** 2 * band
    acf = np.abs(_centered_ifft(power))
    mask = acf >= threshold_frac * acf.max()
    mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)))
    return SupportMask(mask)


@dataclass
class PhaseFillResult:
    density: DensityGrid
    model: ComplexModel
    error_trace: np.ndarray
    best_iteration: int
    diverged: bool = False


def difference_map(known: ComplexModel, support: SupportMask, beta: float = 0.7,
                   n_iter: int = 500, seed: int = 0, mode: str = "complex") -> PhaseFillResult:
    """Difference-map iteration  x <- x + beta [P_S(2 P_M(x) - x) - P_M(x)].

    P_M enforces the Fourier data at the reliable pixels of ``known``
    (complex values in complex mode, magnitudes in magnitude mode; other
    pixels float freely) and P_S zeroes density outside the support and
    clips negatives.  Returns the support-projected Fourier estimate of
    the iterate with the smallest constraint gap ``||P_M(x) - P_S(x)||``.
    If the gap grows tenfold above its running minimum for 50 consecutive
    iterations the search stops and returns the best iterate, flagged.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    if mode not in ("complex", "magnitude"):
        raise ValueError(f"mode must be 'complex' or 'magnitude', got {mode!r}")
    if known.grid.shape != support.mask.shape:
        raise ValueError("model and support dimensions disagree")

    reliable = known.reliable
    data = known.grid
    magnitudes = np.abs(data)
    sup = support.mask

    def project_data(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        f = _centered_fft(x)
        if mode == "complex":
            f = np.where(reliable, data, f)
        else:
            mod = np.abs(f)
            phase = np.where(mod > 0, f / np.where(mod > 0, mod, 1.0), 1.0 + 0j)
            f = np.where(reliable, magnitudes * phase, f)
        return _centered_ifft(f), f

    def project_support(x: np.ndarray) -> np.ndarray:
        rho = np.where(sup, np.maximum(x.real, 0.0), 0.0)
        return rho

    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    x = np.where(sup, rng.uniform(0.0, 1.0, size=sup.shape), 0.0).astype(np.complex128)
    # start from the data itself where available: faster and still seeded
    x = x + _centered_ifft(np.where(reliable, data if mode == "complex" else magnitudes, 0.0))

    best_err = np.inf
    best_pm = None
    best_it = 0
    grow_count = 0
    errors = np.empty(n_iter)
    diverged = False
    for it in range(n_iter):
        pm_x, pm_grid = project_data(x)
        ps_x = project_support(x)
        err = float(np.linalg.norm(pm_x - ps_x))
        errors[it] = err
        if err < best_err:
            best_err = err
            best_pm = pm_grid
            best_it = it
            grow_count = 0
        elif err > 10.0 * best_err:
            grow_count += 1
            if grow_count >= 50:
                log.warning("difference map diverged after %d iterations; "
                            "returning best iterate %d", it + 1, best_it)
                diverged = True
                errors = errors[:it + 1]
                break
        else:
            grow_count = 0
        inner = project_support(2.0 * pm_x - x)
        x = x + beta * (inner - pm_x)

    density = project_support(_centered_ifft(best_pm))
    filled = ComplexModel(best_pm, np.ones_like(reliable), known.scale)
    return PhaseFillResult(DensityGrid(density), filled, errors, best_it, diverged)
