import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hspi
from hspi.geometry import PixelClass, build_detector, rotate_coord


def brute_force_counts(side, aperture, hole):
    """Independent oracle: classify every pixel with a plain double loop."""
    c = (side - 1) / 2
    good = holes = corner = 0
    for i in range(side):
        for j in range(side):
            r = np.hypot(i - c, j - c)
            if r < hole:
                holes += 1
            elif r >= aperture:
                corner += 1
            else:
                good += 1
    return good, holes, corner


def test_counts_match_brute_force_loop():
    geom = build_detector(185, 92.5, 4.0)
    good, holes, corner = brute_force_counts(185, 92.5, 4.0)
    assert geom.n_good == good
    assert geom.n_hole == holes
    assert geom.n_corner == corner


def test_counts_sum_to_total():
    geom = build_detector(185, 92.5, 4.0)
    assert geom.n_good + geom.n_hole + geom.n_corner == 185 * 185


def test_minimal_detector_center_pixel():
    geom = build_detector(3, 1.5, 0.0)
    assert geom.mask[1, 1] == PixelClass.GOOD
    assert geom.q[1, 1, 0] == 0.0 and geom.q[1, 1, 1] == 0.0


def test_hole_and_corner_classification():
    geom = build_detector(185, 92.5, 4.0)
    assert geom.mask[92, 92] == PixelClass.HOLE
    assert geom.mask[0, 0] == PixelClass.CORNER


def test_mask_is_centrosymmetric():
    geom = build_detector(65, 32.5, 2.0)
    assert np.array_equal(geom.mask, geom.mask[::-1, ::-1])


@pytest.mark.parametrize("side,aperture,hole", [(4, 2.0, 0.5), (2, 1.0, 0.0), (1, 0.5, 0.0)])
def test_even_or_tiny_side_rejected(side, aperture, hole):
    with pytest.raises(ValueError):
        build_detector(side, aperture, hole)


def test_inconsistent_radii_rejected():
    with pytest.raises(ValueError):
        build_detector(65, 10.0, 10.0)
    with pytest.raises(ValueError):
        build_detector(65, 10.0, 12.0)
    with pytest.raises(ValueError):
        build_detector(65, 40.0, 2.0)  # aperture beyond the array


def test_rotate_quarter_turn():
    out = rotate_coord(np.array([1.0, 0.0]), np.pi / 2)
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)


def test_rotate_identity():
    q = np.array([0.3, -0.7])
    np.testing.assert_array_equal(rotate_coord(q, 0.0), q)


def test_rotate_matches_matrix_product():
    # oracle: explicit 2x2 rotation matrix application
    theta = 0.7
    q = np.array([0.3, -0.4])
    mat = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    np.testing.assert_allclose(rotate_coord(q, theta), mat @ q, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-10, 10))
def test_rotate_roundtrip_and_norm(qx, qy, theta):
    q = np.array([qx, qy])
    back = rotate_coord(rotate_coord(q, theta), -theta)
    np.testing.assert_allclose(back, q, atol=1e-12)
    assert abs(np.hypot(*rotate_coord(q, theta)) - np.hypot(qx, qy)) < 1e-12


def test_geometry_roundtrip_through_dict():
    geom = build_detector(65, 32.5, 2.0)
    geom2 = hspi.DetectorGeometry.from_dict(geom.to_dict())
    assert np.array_equal(geom.mask, geom2.mask)
    assert np.array_equal(geom.q, geom2.q)
