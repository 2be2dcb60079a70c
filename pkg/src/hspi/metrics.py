"""Evaluation: Fourier ring correlation, alignment, latent error statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .forward import ComplexModel
from .objects import DensityGrid
from .simulate import LatentRecord

__all__ = ["FrcCurve", "AlignResult", "LatentErrorStats", "frc", "resolution_at_half",
           "align_global", "latent_errors", "rotate_image", "pearson"]

log = logging.getLogger(__name__)


@dataclass
class FrcCurve:
    """Ring-wise correlation between two Fourier models.

    ``radius_px`` holds the ring centers in detector pixels; ``q_inv_px``
    the same in inverse-pixel units (radius / side).  Rings without any
    usable pixel are flagged invalid and skipped downstream.
    """

    radius_px: np.ndarray
    q_inv_px: np.ndarray
    correlation: np.ndarray
    n_pixels: np.ndarray
    ring_width_px: float
    valid: np.ndarray

    def usable(self) -> tuple[np.ndarray, np.ndarray]:
        return self.radius_px[self.valid], self.correlation[self.valid]


def frc(model_a: ComplexModel, model_b: ComplexModel, ring_width_px: float = 1.0) -> FrcCurve:
    """Fourier ring correlation over pixels reliable in both models.

    Per ring:  Re{sum F_a conj(F_b)} / sqrt(sum |F_a|^2 sum |F_b|^2).
    """
    if model_a.grid.shape != model_b.grid.shape:
        raise ValueError("models must have equal dimensions")
    if ring_width_px <= 0:
        raise ValueError("ring width must be > 0")
    n = model_a.side_px
    c = (n - 1) / 2
    ax = np.arange(n) - c
    r = np.hypot(ax[:, None], ax[None, :])
    ring = np.rint(r / ring_width_px).astype(np.int64)
    n_rings = int(ring.max()) + 1

    use = model_a.reliable & model_b.reliable
    ring_u = ring[use]
    fa = model_a.grid[use]
    fb = model_b.grid[use]

    cross = np.bincount(ring_u, weights=(fa * np.conj(fb)).real, minlength=n_rings)
    pa = np.bincount(ring_u, weights=np.abs(fa) ** 2, minlength=n_rings)
    pb = np.bincount(ring_u, weights=np.abs(fb) ** 2, minlength=n_rings)
    count = np.bincount(ring_u, minlength=n_rings)

    denom = np.sqrt(pa * pb)
    valid = (count > 0) & (denom > 0)
    corr = np.zeros(n_rings)
    corr[valid] = cross[valid] / denom[valid]
    if not np.all(valid):
        log.debug("frc: %d rings without usable pixels", int((~valid).sum()))

    radius = ring_width_px * np.arange(n_rings)
    return FrcCurve(radius, radius / n, corr, count, float(ring_width_px), valid)


def resolution_at_half(curve: FrcCurve) -> float:
    """Radius (in pixels) where the curve first drops below 0.5.

    Linearly interpolates between ring centers; a curve that never drops
    returns the outermost valid ring center, one that starts below 0.5
    returns 0.
    """
    r, c = curve.usable()
    if r.size == 0:
        raise ValueError("empty FRC curve")
    if c[0] < 0.5:
        log.warning("FRC starts below 0.5; resolution reported as 0")
        return 0.0
    below = np.nonzero(c < 0.5)[0]
    if below.size == 0:
        return float(r[-1])
    k = below[0]
    r0, r1 = r[k - 1], r[k]
    c0, c1 = c[k - 1], c[k]
    return float(r0 + (0.5 - c0) * (r1 - r0) / (c1 - c0))


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def rotate_image(img: np.ndarray, theta: float, order: int = 1) -> np.ndarray:
    """Rotate an image by ``theta`` about the center pixel.

    Matches the forward model's rotation convention: the output at
    coordinate r samples the input at R_{-theta} r.  Values outside the
    input are zero.
    """
    from scipy.ndimage import map_coordinates

    n = img.shape[0]
    c = (n - 1) / 2
    ax = np.arange(n) - c
    x, y = np.meshgrid(ax, ax, indexing="ij")
    ct, st = np.cos(-theta), np.sin(-theta)
    xs = ct * x - st * y + c
    ys = st * x + ct * y + c
    coords = np.stack([xs, ys])
    if np.iscomplexobj(img):
        re = map_coordinates(img.real, coords, order=order, cval=0.0)
        im = map_coordinates(img.imag, coords, order=order, cval=0.0)
        return re + 1j * im
    return map_coordinates(img, coords, order=order, cval=0.0)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two arrays, 0 when either is constant."""
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(np.dot(a, b) / denom) if denom > 0 else 0.0


@dataclass
class AlignResult:
    aligned: object
    theta_offset: float
    inverted: bool
    correlation: float


def _as_real_image(x) -> np.ndarray:
    if isinstance(x, ComplexModel):
        f = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(x.grid)))
        return f.real
    if isinstance(x, DensityGrid):
        return x.grid
    return np.asarray(x, dtype=np.float64)


def _golden_section(fun, lo: float, hi: float, tol: float) -> tuple[float, float]:
    """Golden-section maximization of a scalar function on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = fun(x1), fun(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = fun(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = fun(x1)
    return ((x1 + x2) / 2, max(f1, f2))


def align_global(recon, truth, theta_candidates: np.ndarray | None = None,
                 allow_inversion: bool = False) -> AlignResult:
    """Resolve the arbitrary overall orientation of a reconstruction.

    Searches candidate rotations (and optionally point inversion, the
    twin of magnitude-only phase retrieval) maximizing the real-space
    correlation against the truth, then refines the winner with a
    golden-section search to 0.1 degrees.  Returns the aligned
    reconstruction, the rotation offset such that ``recon`` matches the
    truth rotated by that offset, and the inversion flag.
    """
    img_r = _as_real_image(recon)
    img_t = _as_real_image(truth)
    if img_r.shape != img_t.shape:
        raise ValueError("reconstruction and truth dimensions disagree")

    if theta_candidates is None:
        top = np.pi if allow_inversion else 2.0 * np.pi
        theta_candidates = np.arange(0.0, top, np.deg2rad(2.0))
    inversions = (False, True) if allow_inversion else (False,)

    def corr_at(theta: float, inv: bool) -> float:
        img = img_r[::-1, ::-1] if inv else img_r
        return pearson(rotate_image(img, -theta), img_t)

    best = (-np.inf, 0.0, False)
    for inv in inversions:
        for th in theta_candidates:
            c = corr_at(float(th), inv)
            if c > best[0]:
                best = (c, float(th), inv)
    _, th0, inv = best
    span = np.deg2rad(2.0)
    th, corr = _golden_section(lambda t: corr_at(t, inv), th0 - span, th0 + span,
                               np.deg2rad(0.1))

    if isinstance(recon, ComplexModel):
        grid = recon.grid[::-1, ::-1].conj() if inv else recon.grid
        rel = recon.reliable[::-1, ::-1] if inv else recon.reliable
        aligned = ComplexModel(rotate_image(grid, -th),
                               rotate_image(rel.astype(float), -th, order=0) > 0.5,
                               recon.scale)
    elif isinstance(recon, DensityGrid):
        img = recon.grid[::-1, ::-1] if inv else recon.grid
        aligned = DensityGrid(np.maximum(rotate_image(img, -th), 0.0), recon.extent_px)
    else:
        img = img_r[::-1, ::-1] if inv else img_r
        aligned = rotate_image(img, -th)
    return AlignResult(aligned, float(th), bool(inv), float(corr))


# ---------------------------------------------------------------------------
# latent parameter errors
# ---------------------------------------------------------------------------

@dataclass
class LatentErrorStats:
    """Per-frame latent errors and their standard deviations.

    Orientation errors are wrapped to (-pi/2, pi/2] after removing the
    global offset; shifts are rotated into the object frame with the
    (offset-corrected) predicted orientations before differencing, which
    also absorbs the half-turn ambiguity of the orientation grid.
    """

    theta_err: np.ndarray
    diameter_err: np.ndarray
    tx_err: np.ndarray
    ty_err: np.ndarray
    theta_offset: float

    @property
    def sigma_theta(self) -> float:
        return float(np.std(self.theta_err))

    @property
    def sigma_diameter(self) -> float:
        return float(np.std(self.diameter_err))

    @property
    def sigma_tx(self) -> float:
        return float(np.std(self.tx_err))

    @property
    def sigma_ty(self) -> float:
        return float(np.std(self.ty_err))

    def to_dict(self) -> dict:
        return {
            "n_frames": int(self.theta_err.size),
            "theta_offset_rad": self.theta_offset,
            "sigma_theta_rad": self.sigma_theta,
            "sigma_theta_deg": float(np.rad2deg(self.sigma_theta)),
            "sigma_diameter_px": self.sigma_diameter,
            "sigma_tx_px": self.sigma_tx,
            "sigma_ty_px": self.sigma_ty,
        }


def _wrap_half_turn(x: np.ndarray) -> np.ndarray:
    """Wrap angles to (-pi/2, pi/2]."""
    w = np.mod(x + np.pi / 2, np.pi) - np.pi / 2
    w[w == -np.pi / 2] = np.pi / 2
    return w


def _rotate_vec(tx, ty, theta):
    ct, st = np.cos(theta), np.sin(theta)
    return ct * tx - st * ty, st * tx + ct * ty


def latent_errors(predicted: list[LatentRecord], truth: list[LatentRecord],
                  theta_offset: float) -> LatentErrorStats:
    """Latent recovery errors given the global orientation offset.

    The predicted shift of each frame is rotated into the object frame
    with its offset-corrected predicted orientation, the true shift with
    the true orientation; the difference is reported per axis.
    """
    if len(predicted) != len(truth):
        raise ValueError("predicted and truth frame counts differ")
    th_p = np.array([r.theta for r in predicted])
    th_t = np.array([r.theta for r in truth])
    d_p = np.array([r.diameter_px for r in predicted])
    d_t = np.array([r.diameter_px for r in truth])
    tx_p = np.array([r.tx_px for r in predicted])
    ty_p = np.array([r.ty_px for r in predicted])
    tx_t = np.array([r.tx_px for r in truth])
    ty_t = np.array([r.ty_px for r in truth])

    theta_eff = th_p + theta_offset
    theta_err = _wrap_half_turn(theta_eff - th_t)

    pox, poy = _rotate_vec(tx_p, ty_p, -theta_eff)
    tox, toy = _rotate_vec(tx_t, ty_t, -th_t)
    return LatentErrorStats(theta_err, d_p - d_t, pox - tox, poy - toy, float(theta_offset))
