"""Run configuration: one TOML file drives a full experiment.

Every pipeline stage reads its section from the same file, so a complete
multi-arm comparison is reproducible from a single artifact.  Unknown
sections or keys are rejected; ``seed`` is mandatory.  Paths are
resolved relative to the config file location.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .forward import SphereReference
from .geometry import DetectorGeometry, build_detector
from .latent import LatentConfig
from .maxlp import LatentGrid, MaxLPConfig, PatternSearchConfig
from .objects import TargetSpec

__all__ = ["ConfigError", "RunConfig", "load_config", "dump_config"]


class ConfigError(Exception):
    """Invalid or missing configuration."""


_DEFAULTS: dict[str, dict] = {
    "geometry": {
        "side_px": 185,
        "aperture_radius_px": 92.5,
        "hole_radius_px": 4.0,
    },
    "object": {
        "n_blobs": 12,
        "blob_radius_min_px": 2.0,
        "blob_radius_max_px": 4.0,
        "extent_px": 17.5,
        "density": 4.0,
        "mode": "homogeneous",
        "subunit_radius_px": 1.4,
        "subunit_density": 6.0,
        "two_state_offset_px": [8.0, 0.0],
        "continuous_sigma_px": 0.5,
    },
    "reference": {
        "contrast": 11.0,
        "mu_diameter_px": 7.0,
        "sigma_diameter_px": 0.5,
    },
    "simulate": {
        "n_frames": 10000,
        "target_photons": 2000.0,
        "sigma_shift_px": 1.0,
        "with_reference": True,
        "n_probe": 32,
    },
    "latent_grid": {
        "theta_step_deg": 2.0,
        "theta_max_deg": 180.0,
        "diameter_halfwidth_sigmas": 2.0,
        "diameter_step_px": 0.5,
        "shift_max_px": 2.0,
        "shift_step_px": 1.0,
    },
    "maxlp": {
        "n_iter": 10,
        "n_min": 10,
        "phi_min_deg": 45.0,
        "pattern_max_iter": 200,
        "pattern_shrink": 0.5,
    },
    "phase": {
        "beta": 0.7,
        "n_iter": 500,
        "q_band_lo_frac": 0.15,
        "q_band_hi_frac": 0.5,
        "threshold_frac": 0.05,
    },
    "baseline": {
        "n_iter": 30,
    },
    "metrics": {
        "ring_width_px": 1.0,
    },
}

_TOP_LEVEL_KEYS = {"seed", "output_dir"}
_OBJECT_MODES = ("homogeneous", "two_state", "continuous")


@dataclass
class RunConfig:
    """Fully resolved configuration with typed accessors per module."""

    seed: int
    output_dir: Path
    sections: dict = field(repr=False, default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def geometry(self) -> DetectorGeometry:
        g = self.sections["geometry"]
        try:
            return build_detector(g["side_px"], g["aperture_radius_px"], g["hole_radius_px"])
        except ValueError as exc:
            raise ConfigError(f"[geometry] {exc}") from exc

    def reference(self) -> SphereReference:
        r = self.sections["reference"]
        return SphereReference(r["mu_diameter_px"], r["contrast"])

    def latent_config(self) -> LatentConfig:
        r = self.sections["reference"]
        s = self.sections["simulate"]
        return LatentConfig(r["mu_diameter_px"], r["sigma_diameter_px"], s["sigma_shift_px"])

    def target_spec(self) -> TargetSpec:
        o = self.sections["object"]
        g = self.sections["geometry"]
        try:
            return TargetSpec(
                side_px=g["side_px"],
                n_blobs=o["n_blobs"],
                blob_radius_px=(o["blob_radius_min_px"], o["blob_radius_max_px"]),
                extent_px=o["extent_px"],
                density=o["density"],
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(f"[object] {exc}") from exc

    def latent_grid(self) -> LatentGrid:
        lg = self.sections["latent_grid"]
        return LatentGrid.default(
            self.latent_config(),
            theta_step_deg=lg["theta_step_deg"],
            theta_max_deg=lg["theta_max_deg"],
            diameter_halfwidth_sigmas=lg["diameter_halfwidth_sigmas"],
            diameter_step_px=lg["diameter_step_px"],
            shift_max_px=lg["shift_max_px"],
            shift_step_px=lg["shift_step_px"],
        )

    def maxlp_config(self, threads: int = 1) -> MaxLPConfig:
        m = self.sections["maxlp"]
        pattern = PatternSearchConfig(shrink=m["pattern_shrink"], max_iter=m["pattern_max_iter"])
        return MaxLPConfig(pattern=pattern, n_min=m["n_min"],
                           phi_min=np.deg2rad(m["phi_min_deg"]), threads=threads)

    def q_band(self) -> tuple[float, float]:
        p = self.sections["phase"]
        return (p["q_band_lo_frac"] * 0.5, p["q_band_hi_frac"] * 0.5)


def _merge_section(name: str, user: dict) -> dict:
    defaults = _DEFAULTS[name]
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    out = dict(defaults)
    for key, value in user.items():
        ref = defaults[key]
        if isinstance(ref, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{name}] {key} must be a boolean")
        elif isinstance(ref, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"[{name}] {key} must be an integer")
        elif isinstance(ref, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{name}] {key} must be a number")
            value = float(value)
        elif isinstance(ref, str):
            if not isinstance(value, str):
                raise ConfigError(f"[{name}] {key} must be a string")
        elif isinstance(ref, list):
            if not isinstance(value, list) or len(value) != len(ref):
                raise ConfigError(f"[{name}] {key} must be a list of length {len(ref)}")
        out[key] = value
    return out


def load_config(path: str | Path, *, seed_override: int | None = None,
                out_override: str | Path | None = None) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    unknown = set(raw) - _TOP_LEVEL_KEYS - set(_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None:
        raise ConfigError("config must set a top-level 'seed'")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("'seed' must be an integer")

    sections = {}
    for name in _DEFAULTS:
        user = raw.get(name, {})
        if not isinstance(user, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _merge_section(name, user)

    mode = sections["object"]["mode"]
    if mode not in _OBJECT_MODES:
        raise ConfigError(f"[object] mode must be one of {_OBJECT_MODES}, got {mode!r}")
    if sections["maxlp"]["n_iter"] < 1:
        raise ConfigError("[maxlp] n_iter must be >= 1")
    if sections["simulate"]["n_frames"] < 1:
        raise ConfigError("[simulate] n_frames must be >= 1")
    if sections["simulate"]["target_photons"] <= 0:
        raise ConfigError("[simulate] target_photons must be > 0")
    if not 0 <= sections["phase"]["q_band_lo_frac"] < sections["phase"]["q_band_hi_frac"] <= 1:
        raise ConfigError("[phase] need 0 <= q_band_lo_frac < q_band_hi_frac <= 1")

    if out_override is not None:
        out_dir = Path(out_override).resolve()
    else:
        out_dir = Path(raw.get("output_dir", "out"))
        if not out_dir.is_absolute():
            out_dir = path.parent / out_dir
        out_dir = out_dir.resolve()
    return RunConfig(seed=int(seed), output_dir=out_dir, sections=sections)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def dump_config(cfg: RunConfig) -> str:
    """Resolved effective configuration as TOML text."""
    lines = [f"seed = {cfg.seed}", f'output_dir = "{cfg.output_dir}"', ""]
    for name, section in cfg.sections.items():
        lines.append(f"[{name}]")
        for key, value in section.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)
