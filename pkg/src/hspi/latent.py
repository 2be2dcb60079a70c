"""Per-frame hidden variables of the composite-object forward model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LatentParams", "LatentConfig"]


@dataclass(frozen=True)
class LatentParams:
    """In-plane orientation, reference diameter and reference shift.

    ``shift_px`` is the shift entering the detector-frame phase ramp
    ``exp(2*pi*1j * q . t)``; it is expressed in pixels.
    """

    theta: float
    diameter_px: float
    shift_px: tuple[float, float]

    def __post_init__(self):
        if self.diameter_px <= 0:
            raise ValueError(f"diameter_px must be > 0, got {self.diameter_px}")


@dataclass(frozen=True)
class LatentConfig:
    """Distribution parameters for drawing per-frame latents.

    theta ~ U[0, 2*pi); diameter ~ N(mu, sigma^2) truncated at > 0;
    each shift component ~ N(0, sigma_shift^2).
    """

    mu_diameter_px: float = 7.0
    sigma_diameter_px: float = 0.5
    sigma_shift_px: float = 1.0

    def __post_init__(self):
        if self.mu_diameter_px <= 0:
            raise ValueError("mu_diameter_px must be > 0")
        if self.sigma_diameter_px < 0 or self.sigma_shift_px < 0:
            raise ValueError("sigmas must be >= 0")

    def to_dict(self) -> dict:
        return {
            "mu_diameter_px": self.mu_diameter_px,
            "sigma_diameter_px": self.sigma_diameter_px,
            "sigma_shift_px": self.sigma_shift_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentConfig":
        return cls(**d)


def rotation_matrix(theta: float) -> np.ndarray:
    ct, st = np.cos(theta), np.sin(theta)
    return np.array([[ct, -st], [st, ct]])
