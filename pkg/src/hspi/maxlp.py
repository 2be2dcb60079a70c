"""Maximum-likelihood reconstruction of the target's complex Fourier model.

The loop alternates two steps.  The assignment step scores every frame
against a Cartesian grid of latent hypotheses (orientation, reference
diameter, reference shift) with the Poisson log-likelihood

    Q = sum_pix [ K log I - I ] ,

keeping only the most likely hypothesis per frame.  The update step then
re-fits the complex model amplitude of every model pixel independently,
maximizing the same likelihood over the frames binned onto that pixel
with a derivative-free pattern search in the complex plane.

Internally the model amplitudes are handled in photon units (the global
fluence factor is absorbed into the amplitudes), so the per-pixel
objective needs no extra scaling.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import ComplexModel, SphereReference, render_frame, sample_rotated, sphere_ft
from .geometry import DetectorGeometry, rotate_coord
from .latent import LatentConfig, LatentParams
from .simulate import LatentRecord, SparseDataset, SparseFrame

__all__ = [
    "LatentGrid",
    "Assignment",
    "PixelObservations",
    "PatternSearchConfig",
    "MaxLPConfig",
    "MaxLPResult",
    "frame_log_likelihood",
    "assign_latents",
    "pixel_pattern_search",
    "pixel_log_likelihood",
    "update_model",
    "maxlp_reconstruct",
    "save_model",
    "load_model",
    "write_assignment_csv",
    "assignment_records",
]

log = logging.getLogger(__name__)

_LOG_CLAMP = 1e-20
_CHUNK_FRAMES = 512     # fixed work unit; results never depend on the worker count
_PIXEL_BLOCK = 4096


@dataclass
class LatentGrid:
    """Sampled search grid of the latent parameters.

    Hypotheses are enumerated in C order over (theta, diameter, shift_x,
    shift_y); ties in the likelihood are broken towards the lowest flat
    index.  Duplicated grid values are tolerated and resolve to the first
    occurrence.
    """

    thetas: np.ndarray
    diameters: np.ndarray
    shifts_x: np.ndarray
    shifts_y: np.ndarray

    def __post_init__(self):
        for name in ("thetas", "diameters", "shifts_x", "shifts_y"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if arr.size == 0:
                raise ValueError(f"{name} must be non-empty")
            if np.any(np.diff(arr) < 0):
                raise ValueError(f"{name} must be sorted ascending")
            setattr(self, name, arr)

    @classmethod
    def default(cls, latent_config: LatentConfig | None = None, *,
                theta_step_deg: float = 2.0, theta_max_deg: float = 180.0,
                diameter_halfwidth_sigmas: float = 2.0, diameter_step_px: float = 0.5,
                shift_max_px: float = 2.0, shift_step_px: float = 1.0) -> "LatentGrid":
        """Grid used throughout: 2 deg orientations on a half turn,
        diameters within +-2 sigma at 0.5 px, shifts within +-2 px at 1 px."""
        lc = latent_config or LatentConfig()
        n_th = int(round(theta_max_deg / theta_step_deg))
        thetas = np.deg2rad(theta_step_deg) * np.arange(n_th)
        hw = diameter_halfwidth_sigmas * lc.sigma_diameter_px
        if hw > 0 and diameter_step_px > 0:
            n_d = 2 * int(round(hw / diameter_step_px)) + 1
            diameters = lc.mu_diameter_px + np.linspace(-hw, hw, n_d)
        else:
            diameters = np.array([lc.mu_diameter_px])
        n_s = 2 * int(round(shift_max_px / shift_step_px)) + 1
        shifts = np.linspace(-shift_max_px, shift_max_px, n_s)
        return cls(thetas, diameters, shifts, shifts.copy())

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.thetas.size, self.diameters.size, self.shifts_x.size, self.shifts_y.size)

    @property
    def n_hypotheses(self) -> int:
        t, d, sx, sy = self.shape
        return t * d * sx * sy

    def steps(self) -> dict:
        """Representative step per parameter, for error reporting."""
        def step(a):
            return float(np.median(np.diff(a))) if a.size > 1 else 0.0
        return {"theta_rad": step(self.thetas), "diameter_px": step(self.diameters),
                "shift_x_px": step(self.shifts_x), "shift_y_px": step(self.shifts_y)}

    def latents(self, it: int, id_: int, ix: int, iy: int) -> LatentParams:
        return LatentParams(float(self.thetas[it]), float(self.diameters[id_]),
                            (float(self.shifts_x[ix]), float(self.shifts_y[iy])))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("thetas", "diameters", "shifts_x", "shifts_y")}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentGrid":
        return cls(np.asarray(d["thetas"]), np.asarray(d["diameters"]),
                   np.asarray(d["shifts_x"]), np.asarray(d["shifts_y"]))


@dataclass
class Assignment:
    """Most likely grid point per frame with the achieved log-likelihood."""

    grid: LatentGrid
    theta_idx: np.ndarray
    diameter_idx: np.ndarray
    shift_x_idx: np.ndarray
    shift_y_idx: np.ndarray
    log_likelihood: np.ndarray

    def __post_init__(self):
        n = self.theta_idx.size
        for name in ("diameter_idx", "shift_x_idx", "shift_y_idx", "log_likelihood"):
            if getattr(self, name).size != n:
                raise ValueError("assignment arrays must have equal length")
        if not np.all(np.isfinite(self.log_likelihood)):
            raise ValueError("assignment log-likelihood must be finite")

    @property
    def n_frames(self) -> int:
        return self.theta_idx.size

    def values(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Assigned (theta, diameter, tx, ty) value arrays."""
        return (self.grid.thetas[self.theta_idx], self.grid.diameters[self.diameter_idx],
                self.grid.shifts_x[self.shift_x_idx], self.grid.shifts_y[self.shift_y_idx])


@dataclass
class PixelObservations:
    """Per-pixel view of the dataset under some latent assignment.

    One entry per (frame, detector pixel) pair binned to this model
    pixel: the photon count, the reference amplitude at the detector
    pixel (in photon units) and the reference phase-ramp angle.
    """

    counts: np.ndarray
    ref_amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        self.ref_amplitude = np.asarray(self.ref_amplitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if not (self.counts.shape == self.ref_amplitude.shape == self.phase.shape):
            raise ValueError("observation arrays must have equal length")
        if np.any(self.counts < 0):
            raise ValueError("photon counts must be >= 0")
        if not (np.all(np.isfinite(self.ref_amplitude)) and np.all(np.isfinite(self.phase))):
            raise ValueError("non-finite observation values")

    @property
    def n_obs(self) -> int:
        return self.counts.size


@dataclass(frozen=True)
class PatternSearchConfig:
    """3x3 stencil search: move to the best improving point, else halve.

    ``init_step=None`` starts at the incumbent magnitude (1.0 when the
    incumbent is zero); ``tol=None`` stops at 1e-3 of the initial step.
    """

    init_step: float | None = None
    shrink: float = 0.5
    tol: float | None = None
    max_iter: int = 200

    def __post_init__(self):
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must be in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.init_step is not None and self.tol is not None and not self.init_step > self.tol > 0:
            raise ValueError("need init_step > tol > 0")


@dataclass
class MaxLPConfig:
    """Knobs of the reconstruction loop."""

    pattern: PatternSearchConfig = field(default_factory=PatternSearchConfig)
    n_min: int = 10                    # observations below which a pixel is unreliable
    phi_min: float = np.pi / 4         # minimum circular spread of the phase ramp
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class MaxLPResult:
    model: ComplexModel
    assignment: Assignment
    history: list[dict]


# ---------------------------------------------------------------------------
# likelihood evaluation
# ---------------------------------------------------------------------------

def poisson_log_likelihood(intensity: np.ndarray, indices: np.ndarray,
                           counts: np.ndarray) -> float:
    """Poisson log-likelihood sum(K log I) - sum(I), constants dropped.

    ``intensity`` holds the predicted means of every observed pixel (the
    -sum I term runs over all of them); ``indices``/``counts`` give the
    photon-carrying subset.  Zero intensities under a photon are clamped
    to a tiny floor so the result stays finite.
    """
    i_at = intensity[indices]
    bad = i_at <= 0.0
    if np.any(bad):
        log.warning("clamping %d zero intensities under observed photons", int(bad.sum()))
        i_at = np.maximum(i_at, _LOG_CLAMP)
    return float(np.dot(counts, np.log(i_at)) - intensity.sum())


def frame_log_likelihood(frame: SparseFrame, model: ComplexModel, latent: LatentParams,
                         geom: DetectorGeometry, ref: SphereReference | None) -> float:
    """Log-likelihood of one frame under one latent hypothesis.

    Renders the frame and evaluates the photon term sparsely over the
    occupied pixels; the intensity term runs over all GOOD pixels.
    """
    img = render_frame(model, geom, latent, ref).ravel()
    flat = geom.good_indices()
    idx, cnt = frame.indices_counts()
    pos = np.searchsorted(flat, idx)
    if np.any(pos >= flat.size) or np.any(flat[np.minimum(pos, flat.size - 1)] != idx):
        raise ValueError("frame contains photons outside the GOOD region")
    return poisson_log_likelihood(img[flat], pos, cnt.astype(np.float64))


def _good_pixel_tables(geom: DetectorGeometry):
    flat = geom.good_indices()
    q = geom.q.reshape(-1, 2)[flat]
    q_mag = np.hypot(q[:, 0], q[:, 1])
    return flat, q, q_mag


def _dataset_csr(dataset: SparseDataset, flat_good: np.ndarray):
    """Per-frame photon counts as CSR rows over GOOD-pixel positions."""
    lut = np.full(dataset.geometry.n_pixels, -1, dtype=np.int64)
    lut[flat_good] = np.arange(flat_good.size)
    cols, vals, ptr = [], [], [0]
    for fr in dataset.frames:
        idx, cnt = fr.indices_counts()
        pos = lut[idx]
        if np.any(pos < 0):
            raise ValueError("dataset frame has photons outside the GOOD region")
        cols.append(pos)
        vals.append(cnt.astype(np.float64))
        ptr.append(ptr[-1] + pos.size)
    cols = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.empty(0)
    return np.asarray(ptr, dtype=np.int64), cols, vals


def _reference_amplitude_table(grid: LatentGrid, with_reference: bool, ref: SphereReference,
                               q_mag: np.ndarray, sqrt_scale: float) -> np.ndarray:
    """(n_diameters, n_good) reference amplitudes in photon units."""
    if not with_reference:
        return np.zeros((grid.diameters.size, q_mag.size))
    return np.stack([
        sqrt_scale * sphere_ft(q_mag, SphereReference(d, ref.contrast))
        for d in grid.diameters
    ])


def assign_latents(dataset: SparseDataset, model: ComplexModel, grid: LatentGrid,
                   geom: DetectorGeometry, ref: SphereReference, *,
                   threads: int = 1) -> Assignment:
    """Most likely latent grid point per frame (hard assignment).

    The exact Cartesian argmax of :func:`frame_log_likelihood` over the
    grid.  Per orientation the log intensities of all (diameter, shift)
    hypotheses are tabulated once; the photon term then reduces to a
    dense matrix product against the frame count rows, and the intensity
    term is frame independent.
    """
    flat, q, q_mag = _good_pixel_tables(geom)
    n_good = flat.size
    sqrt_scale = float(np.sqrt(model.scale))
    n_frames = dataset.n_frames

    s_tab = _reference_amplitude_table(grid, dataset.with_reference, ref, q_mag, sqrt_scale)
    n_d = grid.diameters.size
    n_tx, n_ty = grid.shifts_x.size, grid.shifts_y.size
    n_t = n_tx * n_ty
    n_dt = n_d * n_t

    # phase-ramp tables per shift hypothesis, flattened (tx outer, ty inner)
    tx = np.repeat(grid.shifts_x, n_ty)
    ty = np.tile(grid.shifts_y, n_tx)
    phase = 2.0 * np.pi * (q[:, 0][None, :] * tx[:, None] + q[:, 1][None, :] * ty[:, None])
    cos_t = np.cos(phase)
    sin_t = np.sin(phase)

    ptr, cols, vals = _dataset_csr(dataset, flat)
    chunks = [(lo, min(lo + _CHUNK_FRAMES, n_frames)) for lo in range(0, n_frames, _CHUNK_FRAMES)]

    best_val = np.full(n_frames, -np.inf)
    best_flat = np.zeros(n_frames, dtype=np.int64)

    s_t = s_tab.T                     # (n_good, n_d)
    s2_t = s_t**2

    def run_chunk(bounds, table, sum_i, theta_base):
        lo, hi = bounds
        k = np.zeros((hi - lo, n_good))
        for r, f in enumerate(range(lo, hi)):
            sl = slice(ptr[f], ptr[f + 1])
            k[r, cols[sl]] = vals[sl]
        qv = k @ table
        qv -= sum_i[None, :]
        m = np.argmax(qv, axis=1)
        v = qv[np.arange(hi - lo), m]
        rows = slice(lo, hi)
        upd = v > best_val[rows]
        bv = best_val[rows]
        bf = best_flat[rows]
        bv[upd] = v[upd]
        bf[upd] = theta_base + m[upd]

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for i_th, theta in enumerate(grid.thetas):
            amp = sqrt_scale * sample_rotated(model, geom, float(theta), flat)
            u = cos_t * amp.real[None, :] + sin_t * amp.imag[None, :]     # (n_t, n_good)
            aa = amp.real**2 + amp.imag**2
            table = aa[:, None, None] + s2_t[:, :, None] + 2.0 * s_t[:, :, None] * u.T[:, None, :]
            table = table.reshape(n_good, n_dt)
            sum_i = table.sum(axis=0)
            np.maximum(table, _LOG_CLAMP, out=table)
            np.log(table, out=table)
            base = i_th * n_dt
            if pool is None:
                for b in chunks:
                    run_chunk(b, table, sum_i, base)
            else:
                list(pool.map(lambda b: run_chunk(b, table, sum_i, base), chunks))
    finally:
        if pool is not None:
            pool.shutdown()

    it, rem = np.divmod(best_flat, n_dt)
    id_, rem = np.divmod(rem, n_t)
    ix, iy = np.divmod(rem, n_ty)
    return Assignment(grid, it, id_, ix, iy, best_val)


# ---------------------------------------------------------------------------
# per-pixel pattern search
# ---------------------------------------------------------------------------

_STENCIL = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
                    dtype=np.float64)


def _search_block(f0: np.ndarray, n_all: np.ndarray, c2: np.ndarray,
                  sr: np.ndarray, si: np.ndarray, pptr: np.ndarray,
                  k_obs: np.ndarray, s_obs: np.ndarray, cphi: np.ndarray,
                  sphi: np.ndarray, cfg: PatternSearchConfig) -> np.ndarray:
    """Vectorized pattern search over a block of independent pixels.

    The objective splits into the photon term over the K > 0 observations
    and a closed-form intensity term built from the per-pixel aggregates
    n = #observations, c2 = sum s^2 and (sr, si) = sum s exp(1j phi).
    """
    n_pix = f0.size
    seg_len = np.diff(pptr)
    fr = f0.real.copy()
    fi = f0.imag.copy()

    mag = np.abs(f0)
    if cfg.init_step is None:
        h = np.where(mag > 0.0, mag, 1.0)
    else:
        h = np.full(n_pix, float(cfg.init_step))
    tol = np.full(n_pix, cfg.tol) if cfg.tol is not None else 1e-3 * h

    sc = s_obs * cphi
    ss = s_obs * sphi

    def photon_term(xr, xi, pix_of_obs, n_active):
        ar = xr[pix_of_obs] + sc
        ai = xi[pix_of_obs] + ss
        i_d = ar * ar + ai * ai
        np.maximum(i_d, _LOG_CLAMP, out=i_d)
        np.log(i_d, out=i_d)
        i_d *= k_obs
        return np.bincount(pix_of_obs, weights=i_d, minlength=n_active)

    def objective(xr, xi, pix_of_obs, sel):
        t2 = n_all[sel] * (xr * xr + xi * xi) + c2[sel] + 2.0 * (xr * sr[sel] + xi * si[sel])
        return photon_term(xr, xi, pix_of_obs, xr.size) - t2

    # active-subset bookkeeping: sel maps active slot -> original pixel
    sel = np.arange(n_pix)
    pix_of_obs = np.repeat(np.arange(n_pix), seg_len)
    fr_a, fi_a, h_a, tol_a = fr.copy(), fi.copy(), h.copy(), tol.copy()
    q_inc = objective(fr_a, fi_a, pix_of_obs, sel)
    out_r, out_i = fr.copy(), fi.copy()

    def compact(keep):
        nonlocal sel, fr_a, fi_a, h_a, tol_a, q_inc, pix_of_obs
        nonlocal k_obs, sc, ss, seg_len
        out_r[sel[~keep]] = fr_a[~keep]
        out_i[sel[~keep]] = fi_a[~keep]
        obs_keep = keep[pix_of_obs]
        k_obs = k_obs[obs_keep]
        sc = sc[obs_keep]
        ss = ss[obs_keep]
        seg_len = seg_len[keep]
        pix_of_obs = np.repeat(np.arange(int(keep.sum())), seg_len)
        sel = sel[keep]
        fr_a, fi_a = fr_a[keep], fi_a[keep]
        h_a, tol_a, q_inc = h_a[keep], tol_a[keep], q_inc[keep]

    seg_len = seg_len.copy()
    k_obs, sc, ss = k_obs.copy(), sc.copy(), ss.copy()

    alive = h_a >= tol_a
    if not np.all(alive):
        compact(alive)

    for _ in range(cfg.max_iter):
        if sel.size == 0:
            break
        best_q = np.full(sel.size, -np.inf)
        best_dir = np.zeros(sel.size, dtype=np.int64)
        for j, (dr, di) in enumerate(_STENCIL):
            qc = objective(fr_a + dr * h_a, fi_a + di * h_a, pix_of_obs, sel)
            better = qc > best_q
            best_q[better] = qc[better]
            best_dir[better] = j
        improved = best_q > q_inc
        fr_a[improved] += _STENCIL[best_dir[improved], 0] * h_a[improved]
        fi_a[improved] += _STENCIL[best_dir[improved], 1] * h_a[improved]
        q_inc[improved] = best_q[improved]
        h_a[~improved] *= cfg.shrink
        alive = h_a >= tol_a
        if not np.all(alive):
            compact(alive)

    out_r[sel] = fr_a
    out_i[sel] = fi_a
    return out_r + 1j * out_i


def pixel_pattern_search(obs: PixelObservations, init: complex,
                         cfg: PatternSearchConfig | None = None) -> complex:
    """Pattern-search maximizer of the single-pixel Poisson likelihood.

    Polls a 3x3 stencil of step h around the incumbent in the complex
    plane, moves to the best strictly improving point, otherwise shrinks
    h, and stops once h < tol or ``max_iter`` polls have run.  An empty
    observation list returns ``init`` unchanged; the result never has a
    lower objective than ``init``.
    """
    cfg = cfg or PatternSearchConfig()
    if obs.n_obs == 0:
        return complex(init)
    n, c2, sr, si, pptr, k, s, cp, sp = _observation_aggregates(obs)
    res = _search_block(np.array([init], dtype=np.complex128), n, c2, sr, si,
                        pptr, k, s, cp, sp, cfg)
    return complex(res[0])


def _observation_aggregates(obs: PixelObservations):
    n = np.array([float(obs.n_obs)])
    c2 = np.array([float(np.sum(obs.ref_amplitude**2))])
    sr = np.array([float(np.sum(obs.ref_amplitude * np.cos(obs.phase)))])
    si = np.array([float(np.sum(obs.ref_amplitude * np.sin(obs.phase)))])
    occ = obs.counts > 0
    k = obs.counts[occ]
    s = obs.ref_amplitude[occ]
    ph = obs.phase[occ]
    pptr = np.array([0, k.size], dtype=np.int64)
    return n, c2, sr, si, pptr, k, s, np.cos(ph), np.sin(ph)


def pixel_log_likelihood(obs: PixelObservations, f: complex) -> float:
    """Single-pixel objective sum_d [K_d log I_d - I_d] at amplitude f."""
    amp_r = f.real + obs.ref_amplitude * np.cos(obs.phase)
    amp_i = f.imag + obs.ref_amplitude * np.sin(obs.phase)
    i_d = amp_r**2 + amp_i**2
    return float(np.dot(obs.counts, np.log(np.maximum(i_d, _LOG_CLAMP))) - i_d.sum())


# ---------------------------------------------------------------------------
# model update
# ---------------------------------------------------------------------------

def _bin_observations(dataset: SparseDataset, assignment: Assignment,
                      geom: DetectorGeometry, ref: SphereReference, sqrt_scale: float):
    """Bin every (frame, GOOD pixel) pair to its model pixel.

    Returns per-model-pixel aggregates over all observations (count,
    sum s^2, sum s e^{i phi}, sum e^{i phi}) and the photon-carrying
    observations as pixel-sorted arrays.
    """
    flat, q, q_mag = _good_pixel_tables(geom)
    n, n_pix = geom.side_px, geom.n_pixels
    c = geom.center
    grid = assignment.grid

    s_tab = _reference_amplitude_table(grid, dataset.with_reference, ref, q_mag, sqrt_scale)
    lut = np.full(n_pix, -1, dtype=np.int64)
    lut[flat] = np.arange(flat.size)

    n_obs = np.zeros(n_pix)
    c2 = np.zeros(n_pix)
    s_re = np.zeros(n_pix)
    s_im = np.zeros(n_pix)
    p_re = np.zeros(n_pix)
    p_im = np.zeros(n_pix)
    ph_m, ph_k, ph_s, ph_phi = [], [], [], []

    thetas, _, txs, tys = assignment.values()
    for f, frame in enumerate(dataset.frames):
        qr = rotate_coord(q, -float(thetas[f]))
        mi = np.rint(c + n * qr[:, 0]).astype(np.int64)
        mj = np.rint(c + n * qr[:, 1]).astype(np.int64)
        np.clip(mi, 0, n - 1, out=mi)
        np.clip(mj, 0, n - 1, out=mj)
        m = mi * n + mj
        s = s_tab[assignment.diameter_idx[f]]
        phi = 2.0 * np.pi * (q[:, 0] * txs[f] + q[:, 1] * tys[f])
        cp = np.cos(phi)
        sp = np.sin(phi)
        n_obs += np.bincount(m, minlength=n_pix)
        c2 += np.bincount(m, weights=s * s, minlength=n_pix)
        s_re += np.bincount(m, weights=s * cp, minlength=n_pix)
        s_im += np.bincount(m, weights=s * sp, minlength=n_pix)
        p_re += np.bincount(m, weights=cp, minlength=n_pix)
        p_im += np.bincount(m, weights=sp, minlength=n_pix)

        idx, cnt = frame.indices_counts()
        pos = lut[idx]
        ph_m.append(m[pos])
        ph_k.append(cnt.astype(np.float64))
        ph_s.append(s[pos])
        ph_phi.append(phi[pos])

    m_all = np.concatenate(ph_m)
    order = np.argsort(m_all, kind="stable")
    m_all = m_all[order]
    k_all = np.concatenate(ph_k)[order]
    s_all = np.concatenate(ph_s)[order]
    phi_all = np.concatenate(ph_phi)[order]
    pptr = np.zeros(n_pix + 1, dtype=np.int64)
    pptr[1:] = np.cumsum(np.bincount(m_all, minlength=n_pix))
    return (n_obs, c2, s_re, s_im, p_re, p_im), (pptr, m_all, k_all, s_all, phi_all)


def update_model(dataset: SparseDataset, assignment: Assignment, geom: DetectorGeometry,
                 ref: SphereReference, prev_model: ComplexModel,
                 cfg: MaxLPConfig | None = None) -> ComplexModel:
    """Independent per-pixel likelihood maximization given the assignment.

    Every model pixel is re-fitted with a pattern search initialized at
    the previous model value.  A pixel is flagged unreliable when it
    collected fewer than ``n_min`` observations or the circular spread of
    its phase-ramp angles stays below ``phi_min`` (the phase is then
    poorly constrained by the data).
    """
    cfg = cfg or MaxLPConfig()
    if assignment.n_frames != dataset.n_frames:
        raise ValueError("assignment does not cover the dataset")
    sqrt_scale = float(np.sqrt(prev_model.scale))
    n_pix = geom.n_pixels

    (n_obs, c2, s_re, s_im, p_re, p_im), (pptr, _m, k_all, s_all, phi_all) = \
        _bin_observations(dataset, assignment, geom, ref, sqrt_scale)

    f0 = prev_model.grid.ravel() * sqrt_scale
    cphi = np.cos(phi_all)
    sphi = np.sin(phi_all)

    blocks = [(lo, min(lo + _PIXEL_BLOCK, n_pix)) for lo in range(0, n_pix, _PIXEL_BLOCK)]
    out = np.empty(n_pix, dtype=np.complex128)

    def run_block(bounds):
        lo, hi = bounds
        olo, ohi = pptr[lo], pptr[hi]
        out[lo:hi] = _search_block(
            f0[lo:hi], n_obs[lo:hi], c2[lo:hi], s_re[lo:hi], s_im[lo:hi],
            pptr[lo:hi + 1] - olo, k_all[olo:ohi], s_all[olo:ohi],
            cphi[olo:ohi], sphi[olo:ohi], cfg.pattern)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(run_block, blocks))
    else:
        for b in blocks:
            run_block(b)

    # circular spread of the phase-ramp angles: sqrt(-2 ln R)
    with np.errstate(divide="ignore", invalid="ignore"):
        resultant = np.hypot(p_re, p_im) / np.maximum(n_obs, 1.0)
        spread = np.sqrt(-2.0 * np.log(np.clip(resultant, 1e-12, 1.0)))
    reliable = (n_obs >= cfg.n_min) & (spread >= cfg.phi_min)

    grid = (out / sqrt_scale).reshape(geom.side_px, geom.side_px)
    return ComplexModel(grid, reliable.reshape(geom.side_px, geom.side_px), prev_model.scale)


def maxlp_reconstruct(dataset: SparseDataset, grid: LatentGrid, geom: DetectorGeometry,
                      ref: SphereReference, n_iter: int, seed: int,
                      cfg: MaxLPConfig | None = None,
                      initial_model: ComplexModel | None = None,
                      callback=None) -> MaxLPResult:
    """Alternate latent assignment and per-pixel model updates.

    Starts from complex Gaussian noise whose mean square amplitude
    matches the mean photon count per pixel per frame, then runs
    ``n_iter`` rounds of assignment plus update.  Deterministic for a
    fixed seed.  ``callback(iteration, model, assignment, history)`` runs
    after every iteration (checkpointing hook).
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    cfg = cfg or MaxLPConfig()
    n_good = geom.n_good

    if initial_model is None:
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        mean_k = dataset.total_photons() / (dataset.n_frames * n_good)
        sigma = np.sqrt(mean_k / 2.0) / np.sqrt(dataset.scale)
        noise = rng.normal(0.0, sigma, size=(geom.side_px, geom.side_px, 2))
        model = ComplexModel(noise[..., 0] + 1j * noise[..., 1], None, dataset.scale)
    else:
        model = initial_model

    history: list[dict] = []
    assignment = None
    for it in range(n_iter):
        assignment = assign_latents(dataset, model, grid, geom, ref, threads=cfg.threads)
        new_model = update_model(dataset, assignment, geom, ref, model, cfg)
        rms = float(np.sqrt(np.mean(np.abs(new_model.grid - model.grid) ** 2)))
        history.append({
            "iteration": it,
            "total_log_likelihood": float(assignment.log_likelihood.sum()),
            "rms_model_change": rms,
        })
        log.info("iteration %d: logL=%.6g rms_change=%.4g", it,
                 history[-1]["total_log_likelihood"], rms)
        model = new_model
        if callback is not None:
            callback(it, model, assignment, history)
    return MaxLPResult(model, assignment, history)


# ---------------------------------------------------------------------------
# file output
# ---------------------------------------------------------------------------

def save_model(model: ComplexModel, stem: str | Path, *, extra_meta: dict | None = None) -> None:
    """Raw complex grid (interleaved little-endian float64 re, im), a
    one-byte-per-pixel reliability map and a JSON metadata sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    model.grid.astype("<c16").tofile(stem.with_suffix(".cpx"))
    model.reliable.astype(np.uint8).tofile(stem.with_suffix(".rel"))
    meta = {"side_px": model.side_px, "scale": model.scale, "dtype": "<c16"}
    if extra_meta:
        meta.update(extra_meta)
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_model(stem: str | Path) -> ComplexModel:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    n = meta["side_px"]
    grid = np.fromfile(stem.with_suffix(".cpx"), dtype="<c16").reshape(n, n)
    reliable = np.fromfile(stem.with_suffix(".rel"), dtype=np.uint8).reshape(n, n).astype(bool)
    return ComplexModel(grid, reliable, meta.get("scale", 1.0))


def assignment_records(assignment: Assignment) -> list[LatentRecord]:
    """Assignment as sidecar-schema records (state column left empty)."""
    th, d, tx, ty = assignment.values()
    return [LatentRecord(i, float(th[i]), float(d[i]), float(tx[i]), float(ty[i]), "")
            for i in range(assignment.n_frames)]


def write_assignment_csv(assignment: Assignment, path: str | Path) -> None:
    from .simulate import write_latents_csv

    write_latents_csv(assignment_records(assignment), path)
