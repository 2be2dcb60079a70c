"""Shared fixtures: a small detector and datasets reused across modules."""

import numpy as np
import pytest

import hspi
from hspi.latent import LatentConfig
from hspi.simulate import generate_dataset


@pytest.fixture(scope="session")
def small_geom():
    return hspi.build_detector(65, 32.5, 2.0)


@pytest.fixture(scope="session")
def small_object():
    spec = hspi.TargetSpec(side_px=65, n_blobs=8, blob_radius_px=(1.5, 3.0),
                           extent_px=9.0, density=6.0, seed=0)
    return hspi.random_blob_object(spec)


@pytest.fixture(scope="session")
def reference():
    return hspi.SphereReference(7.0, 11.0)


@pytest.fixture(scope="session")
def latent_config():
    return LatentConfig()


@pytest.fixture(scope="session")
def small_dataset(small_object, small_geom, reference, latent_config):
    """600 frames at 1e4 photons/frame on the 65 px detector."""
    ds, records = generate_dataset(small_object, small_geom, reference, latent_config,
                                   n_frames=600, target_photons=1e4, seed=11)
    return ds, records


@pytest.fixture(scope="session")
def truth_model(small_object, small_geom, small_dataset):
    ds, _ = small_dataset
    return hspi.density_to_model(small_object, small_geom, scale=ds.scale)
