"""Holographic single particle imaging: simulation and reconstruction.

A target object conjugated to a strongly scattering spherical reference
is imaged one diffraction pattern at a time with unknown per-frame
orientation, reference diameter and reference shift.  This package
simulates such sparse Poisson datasets and recovers the target's complex
Fourier transform by maximum-likelihood estimation, with iterative phase
retrieval for the poorly constrained pixels, a conventional
intensity-based reconstruction baseline, and quantitative evaluation.
"""

from .geometry import DetectorGeometry, PixelClass, build_detector, rotate_coord
from .forward import (ComplexModel, SphereReference, composite_intensity, render_frame,
                      sphere_ft)
from .latent import LatentConfig, LatentParams
from .objects import (DensityGrid, HeteroMode, TargetSpec, average_structure,
                      density_to_model, heterogeneous_variant, load_density, make_subunit,
                      random_blob_object, save_density)
from .simulate import (LatentRecord, SparseDataset, SparseFrame, calibrate_scale,
                       generate_dataset, poisson_sample, read_dataset, read_latents_csv,
                       sample_latents, write_dataset, write_latents_csv)
from .maxlp import (Assignment, LatentGrid, MaxLPConfig, MaxLPResult, PatternSearchConfig,
                    PixelObservations, assign_latents, frame_log_likelihood, load_model,
                    maxlp_reconstruct, pixel_log_likelihood, pixel_pattern_search,
                    save_model, update_model, write_assignment_csv)
from .phasing import SupportMask, PhaseFillResult, difference_map, estimate_support
from .baseline import BaselineResult, IntensityModel, baseline_reconstruct, emc_intensity
from .metrics import (AlignResult, FrcCurve, LatentErrorStats, align_global, frc,
                      latent_errors, resolution_at_half)

__version__ = "0.1.0"
