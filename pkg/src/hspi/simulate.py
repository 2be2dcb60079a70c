"""Dataset simulation: latent draws, Poisson sampling and sparse files.

Each frame draws its own latent parameters, renders the composite
intensity, Poisson-samples photon counts on the GOOD pixels and stores
them sparsely (pixels with exactly one photon are listed separately from
multi-photon pixels).  Frame RNGs are seeded as ``seed XOR frame_index``
with a counter-based generator, so the output is independent of how
frames are scheduled.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .forward import ComplexModel, SphereReference, render_frame
from .geometry import DetectorGeometry
from .latent import LatentConfig, LatentParams
from .objects import density_to_model

__all__ = [
    "SparseFrame",
    "SparseDataset",
    "LatentRecord",
    "sample_latents",
    "calibrate_scale",
    "poisson_sample",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "write_latents_csv",
    "read_latents_csv",
]

_MAGIC = b"HSPI"
_VERSION = 1


@dataclass
class SparseFrame:
    """Photon records of one frame.

    ``one_indices`` lists flat pixel indices holding exactly one photon;
    ``multi_indices``/``multi_counts`` hold pixels with two or more.
    Index arrays are sorted and disjoint.
    """

    one_indices: np.ndarray
    multi_indices: np.ndarray
    multi_counts: np.ndarray

    def __post_init__(self):
        self.one_indices = np.asarray(self.one_indices, dtype=np.uint32)
        self.multi_indices = np.asarray(self.multi_indices, dtype=np.uint32)
        self.multi_counts = np.asarray(self.multi_counts, dtype=np.int32)
        if self.multi_indices.shape != self.multi_counts.shape:
            raise ValueError("multi indices/counts length mismatch")

    @property
    def n_photons(self) -> int:
        return int(self.one_indices.size + self.multi_counts.sum())

    def counts(self, n_pixels: int) -> np.ndarray:
        """Dense count vector over the full pixel grid."""
        k = np.zeros(n_pixels, dtype=np.int64)
        k[self.one_indices] = 1
        k[self.multi_indices] = self.multi_counts
        return k

    def indices_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """All occupied pixel indices with their counts, index-sorted."""
        idx = np.concatenate([self.one_indices.astype(np.int64),
                              self.multi_indices.astype(np.int64)])
        cnt = np.concatenate([np.ones(self.one_indices.size, dtype=np.int64),
                              self.multi_counts.astype(np.int64)])
        order = np.argsort(idx, kind="stable")
        return idx[order], cnt[order]


@dataclass
class SparseDataset:
    """A stack of sparse frames plus everything needed to interpret them."""

    geometry: DetectorGeometry
    frames: list[SparseFrame]
    ref: SphereReference
    latent_config: LatentConfig
    mean_photons_target: float
    seed: int
    scale: float
    with_reference: bool = True

    def __post_init__(self):
        if not self.frames:
            raise ValueError("dataset must contain at least one frame")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def total_photons(self) -> int:
        return sum(f.n_photons for f in self.frames)

    def metadata(self) -> dict:
        return {
            "format": "hspi-sparse",
            "version": _VERSION,
            "geometry": self.geometry.to_dict(),
            "n_frames": self.n_frames,
            "reference": {"diameter_px": self.ref.diameter_px, "contrast": self.ref.contrast},
            "latent_config": self.latent_config.to_dict(),
            "mean_photons_target": self.mean_photons_target,
            "seed": self.seed,
            "scale": self.scale,
            "with_reference": self.with_reference,
        }


@dataclass(frozen=True)
class LatentRecord:
    """Ground-truth sidecar row for one frame."""

    frame: int
    theta: float
    diameter_px: float
    tx_px: float
    ty_px: float
    state: str = ""


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    """Counter-based per-frame generator, schedule independent."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed) ^ np.uint64(frame_index)))


def sample_latents(rng: np.random.Generator, config: LatentConfig) -> LatentParams:
    """Draw one set of latents: theta uniform, diameter and shift normal.

    The diameter draw is redrawn while non-positive, which is vanishingly
    rare for the default sigma/mu ratio.
    """
    theta = rng.uniform(0.0, 2.0 * np.pi)
    d = rng.normal(config.mu_diameter_px, config.sigma_diameter_px)
    while d <= 0.0:
        d = rng.normal(config.mu_diameter_px, config.sigma_diameter_px)
    shift = rng.normal(0.0, config.sigma_shift_px, size=2)
    return LatentParams(theta, float(d), (float(shift[0]), float(shift[1])))


def calibrate_scale(model: ComplexModel, geom: DetectorGeometry, ref: SphereReference | None,
                    latent_config: LatentConfig, target_photons: float,
                    n_probe: int = 16, seed: int = 0) -> float:
    """Fluence factor making the mean rendered frame sum equal the target.

    Averages the total GOOD-pixel intensity over ``n_probe`` latent draws
    at unit scale and returns ``target_photons`` divided by that mean.
    """
    if target_photons <= 0:
        raise ValueError("target_photons must be > 0")
    if n_probe < 1:
        raise ValueError("n_probe must be >= 1")
    probe = ComplexModel(model.grid, model.reliable, 1.0)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    total = 0.0
    for _ in range(n_probe):
        latent = sample_latents(rng, latent_config)
        total += render_frame(probe, geom, latent, ref).sum()
    mean = total / n_probe
    if mean <= 0.0:
        raise ValueError("probe frames have zero total intensity; cannot calibrate")
    return target_photons / mean


def poisson_sample(intensity: np.ndarray, geom: DetectorGeometry,
                   rng: np.random.Generator) -> SparseFrame:
    """Independent Poisson draw on every GOOD pixel, sparsely encoded."""
    if np.any(intensity < 0):
        raise ValueError("negative intensity passed to the Poisson sampler")
    flat = geom.good_indices()
    lam = intensity.reshape(-1)[flat]
    counts = rng.poisson(lam)
    occupied = counts > 0
    idx = flat[occupied]
    k = counts[occupied]
    ones = k == 1
    return SparseFrame(idx[ones], idx[~ones], k[~ones])


def generate_dataset(source, geom: DetectorGeometry, ref: SphereReference,
                     latent_config: LatentConfig, n_frames: int, target_photons: float,
                     seed: int, with_reference: bool = True,
                     n_probe: int = 32) -> tuple[SparseDataset, list[LatentRecord]]:
    """Simulate a sparse dataset together with its ground-truth sidecar.

    ``source`` is either a fixed :class:`DensityGrid` or a callable
    ``f(rng) -> (DensityGrid, state_label)`` producing one realization per
    frame (heterogeneous targets).  ``with_reference=False`` drops the
    reference term from the rendered intensity; the photon budget is
    calibrated per arm so both reach ``target_photons`` on average.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    varying = callable(source)
    used_ref = ref if with_reference else None

    # calibrate the fluence factor on probe frames drawn from a dedicated stream
    probe_rng = np.random.Generator(np.random.Philox(key=np.uint64(seed) ^ np.uint64(0xC0FFEE)))
    total = 0.0
    for _ in range(n_probe):
        density, _state = source(probe_rng) if varying else (source, "")
        model = density_to_model(density, geom, scale=1.0)
        latent = sample_latents(probe_rng, latent_config)
        total += render_frame(model, geom, latent, used_ref).sum()
    mean = total / n_probe
    if mean <= 0.0:
        raise ValueError("probe frames have zero total intensity; cannot calibrate")
    scale = target_photons / mean

    frames: list[SparseFrame] = []
    records: list[LatentRecord] = []
    fixed_model = None if varying else density_to_model(source, geom, scale=scale)
    for i in range(n_frames):
        rng = frame_rng(seed, i)
        if varying:
            density, state = source(rng)
            model = density_to_model(density, geom, scale=scale)
        else:
            model, state = fixed_model, ""
        latent = sample_latents(rng, latent_config)
        img = render_frame(model, geom, latent, used_ref)
        frames.append(poisson_sample(img, geom, rng))
        records.append(LatentRecord(i, latent.theta, latent.diameter_px,
                                    latent.shift_px[0], latent.shift_px[1], state))

    ds = SparseDataset(geom, frames, ref, latent_config, float(target_photons),
                       seed, float(scale), with_reference)
    return ds, records


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def write_dataset(dataset: SparseDataset, path: str | Path) -> None:
    """Binary sparse-frame file plus JSON metadata sidecar.

    Layout (little endian): magic ``HSPI``, u16 version, u32 n_frames,
    u32 n_pixels, then per frame u32 n_ones, u32 n_multi, the one-photon
    indices (u32), the multi-photon indices (u32) and counts (i32).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_pixels = dataset.geometry.n_pixels
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HII", _VERSION, dataset.n_frames, n_pixels))
        for fr in dataset.frames:
            fh.write(struct.pack("<II", fr.one_indices.size, fr.multi_indices.size))
            fh.write(fr.one_indices.astype("<u4").tobytes())
            fh.write(fr.multi_indices.astype("<u4").tobytes())
            fh.write(fr.multi_counts.astype("<i4").tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(dataset.metadata(), indent=2))


def read_dataset(path: str | Path) -> SparseDataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    geom = DetectorGeometry.from_dict(meta["geometry"])
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a sparse dataset file")
        version, n_frames, n_pixels = struct.unpack("<HII", fh.read(10))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        if n_pixels != geom.n_pixels:
            raise ValueError(f"{path}: pixel count disagrees with metadata geometry")
        frames = []
        for _ in range(n_frames):
            n_ones, n_multi = struct.unpack("<II", fh.read(8))
            ones = np.frombuffer(fh.read(4 * n_ones), dtype="<u4")
            multi = np.frombuffer(fh.read(4 * n_multi), dtype="<u4")
            counts = np.frombuffer(fh.read(4 * n_multi), dtype="<i4")
            frames.append(SparseFrame(ones, multi, counts))
    if n_frames != meta["n_frames"]:
        raise ValueError(f"{path}: frame count disagrees with metadata")
    return SparseDataset(
        geometry=geom,
        frames=frames,
        ref=SphereReference(**meta["reference"]),
        latent_config=LatentConfig.from_dict(meta["latent_config"]),
        mean_photons_target=meta["mean_photons_target"],
        seed=meta["seed"],
        scale=meta["scale"],
        with_reference=meta["with_reference"],
    )


_CSV_FIELDS = ["frame", "theta_rad", "diameter_px", "tx_px", "ty_px", "state"]


def write_latents_csv(records: Sequence[LatentRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CSV_FIELDS)
        for r in records:
            w.writerow([r.frame, repr(float(r.theta)), repr(float(r.diameter_px)),
                        repr(float(r.tx_px)), repr(float(r.ty_px)), r.state])


def read_latents_csv(path: str | Path) -> list[LatentRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _CSV_FIELDS:
            raise ValueError(f"{path}: unexpected latent sidecar columns {reader.fieldnames}")
        for row in reader:
            records.append(LatentRecord(int(row["frame"]), float(row["theta_rad"]),
                                        float(row["diameter_px"]), float(row["tx_px"]),
                                        float(row["ty_px"]), row["state"]))
    return records
