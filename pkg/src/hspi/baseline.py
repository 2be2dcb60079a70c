"""Conventional single-particle baseline: intensity EMC plus phase retrieval.

Reconstructs the rotationally averaged intensity distribution with the
classic expand/maximize/compress iteration over in-plane orientations,
using the full per-frame probability distribution (soft weights), then
feeds the square-root magnitudes into magnitude-mode phase retrieval.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .forward import ComplexModel, interpolate_complex
from .geometry import DetectorGeometry, rotate_coord
from .maxlp import _dataset_csr, _good_pixel_tables
from .phasing import PhaseFillResult, SupportMask, difference_map, estimate_support
from .simulate import SparseDataset

__all__ = ["IntensityModel", "BaselineConfig", "BaselineResult", "emc_intensity",
           "baseline_reconstruct"]

log = logging.getLogger(__name__)

_LOG_CLAMP = 1e-20


@dataclass
class IntensityModel:
    """Non-negative intensity model with its orientation grid and logs."""

    grid: np.ndarray
    thetas: np.ndarray
    log_likelihood: list = field(default_factory=list)
    mutual_info: list = field(default_factory=list)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if np.any(self.grid < 0):
            raise ValueError("intensity model must be non-negative")

    @property
    def side_px(self) -> int:
        return self.grid.shape[0]


def _expand(grid: np.ndarray, geom: DetectorGeometry, theta: float,
            q: np.ndarray) -> np.ndarray:
    """Sample the model at detector pixels rotated by ``theta`` (bilinear)."""
    n = geom.side_px
    c = geom.center
    qr = rotate_coord(q, -theta)
    return interpolate_complex(grid.astype(np.complex128), c + n * qr[:, 0], c + n * qr[:, 1]).real


def _scatter_bilinear(values: np.ndarray, x: np.ndarray, y: np.ndarray, n: int,
                      acc: np.ndarray, norm: np.ndarray) -> None:
    """Adjoint of bilinear sampling: deposit values at fractional coords."""
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    for di, wi in ((0, 1.0 - fx), (1, fx)):
        for dj, wj in ((0, 1.0 - fy), (1, fy)):
            ii = x0 + di
            jj = y0 + dj
            inside = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n)
            w = wi * wj * inside
            idx = np.clip(ii, 0, n - 1) * n + np.clip(jj, 0, n - 1)
            np.add.at(acc, idx, w * values)
            np.add.at(norm, idx, w)


def emc_intensity(dataset: SparseDataset, theta_grid: np.ndarray, geom: DetectorGeometry,
                  n_iter: int = 20, seed: int = 0) -> IntensityModel:
    """Expectation-maximization intensity reconstruction over orientations.

    Each iteration expands the model into per-orientation tomograms,
    computes normalized Poisson probabilities of every frame over the
    orientation grid, updates the tomograms by probability-weighted
    photon averaging and compresses them back onto the model lattice.
    Logs the total mixture log-likelihood and the frame/orientation
    mutual information per iteration.
    """
    theta_grid = np.atleast_1d(np.asarray(theta_grid, dtype=np.float64))
    if theta_grid.size == 0:
        raise ValueError("orientation grid must be non-empty")
    if dataset.with_reference:
        raise ValueError("intensity EMC expects a dataset simulated without the reference")
    if dataset.total_photons() == 0:
        raise ValueError("dataset contains no photons")

    flat, q, _ = _good_pixel_tables(geom)
    n_good = flat.size
    n = geom.side_px
    n_th = theta_grid.size
    n_frames = dataset.n_frames

    ptr, cols, vals = _dataset_csr(dataset, flat)
    # dense per-frame count matrix; frames x GOOD pixels
    counts = np.zeros((n_frames, n_good))
    for f in range(n_frames):
        sl = slice(ptr[f], ptr[f + 1])
        counts[f, cols[sl]] = vals[sl]

    mean_count = dataset.total_photons() / (n_frames * n_good)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    grid = np.zeros((n, n))
    grid.reshape(-1)[flat] = mean_count * rng.uniform(0.5, 1.5, size=n_good)

    model = IntensityModel(grid, theta_grid)
    log_prior = -np.log(n_th)
    for it in range(n_iter):
        tomo = np.stack([_expand(model.grid, geom, th, q) for th in theta_grid])  # (n_th, n_good)
        tomo = np.maximum(tomo, 0.0)
        log_tomo = np.log(np.maximum(tomo, _LOG_CLAMP))
        # log P(frame | orientation) = K . log W - sum W
        log_p = counts @ log_tomo.T
        log_p -= tomo.sum(axis=1)[None, :]
        peak = log_p.max(axis=1, keepdims=True)
        w = np.exp(log_p - peak)
        norm = w.sum(axis=1, keepdims=True)
        w /= norm
        loglik = float(np.sum(peak[:, 0] + np.log(norm[:, 0])) + n_frames * log_prior)
        with np.errstate(divide="ignore", invalid="ignore"):
            mi = float(np.mean(np.sum(np.where(w > 0, w * (np.log(np.maximum(w, 1e-300)) - log_prior), 0.0), axis=1)))

        # maximize: photon-weighted average per orientation
        occupancy = w.sum(axis=0)                          # (n_th,)
        new_tomo = w.T @ counts                            # (n_th, n_good)
        # orientations with weight keep photon averages; empty ones keep the old tomogram
        nonzero = occupancy > 0
        new_tomo[nonzero] /= occupancy[nonzero, None]
        new_tomo[~nonzero] = tomo[~nonzero]

        # compress: average the tomograms back onto the model lattice
        acc = np.zeros(n * n)
        wsum = np.zeros(n * n)
        c = geom.center
        for j, th in enumerate(theta_grid):
            qr = rotate_coord(q, -th)
            _scatter_bilinear(new_tomo[j], c + n * qr[:, 0], c + n * qr[:, 1], n, acc, wsum)
        newgrid = np.zeros(n * n)
        nz = wsum > 0
        newgrid[nz] = np.maximum(acc[nz] / wsum[nz], 0.0)
        model.grid = newgrid.reshape(n, n)
        model.log_likelihood.append(loglik)
        model.mutual_info.append(mi)
        log.info("emc iteration %d: logL=%.6g MI=%.4g", it, loglik, mi)
    return model


@dataclass
class BaselineConfig:
    n_iter_emc: int = 30
    seed: int = 0
    beta: float = 0.7
    n_iter_phase: int = 500
    q_band: tuple[float, float] = (0.075, 0.25)
    threshold_frac: float = 0.05


@dataclass
class BaselineResult:
    intensity: IntensityModel
    support: SupportMask
    phase: PhaseFillResult

    @property
    def density(self):
        return self.phase.density


def baseline_reconstruct(dataset: SparseDataset, theta_grid: np.ndarray,
                         geom: DetectorGeometry, cfg: BaselineConfig | None = None) -> BaselineResult:
    """Full conventional pipeline: EMC, then magnitude-mode phase retrieval."""
    cfg = cfg or BaselineConfig()
    intensity = emc_intensity(dataset, theta_grid, geom, cfg.n_iter_emc, cfg.seed)
    mags = np.sqrt(np.maximum(intensity.grid, 0.0))
    model = ComplexModel(mags.astype(np.complex128), geom.good.copy(), 1.0)
    support = estimate_support(model, cfg.q_band, cfg.threshold_frac)
    phase = difference_map(model, support, cfg.beta, cfg.n_iter_phase,
                           seed=cfg.seed, mode="magnitude")
    return BaselineResult(intensity, support, phase)
