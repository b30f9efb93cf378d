import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invrender.errors import ValidationError
from invrender.grid import EnvironmentMap, direction_grid

from oracles import cell_direction, cell_solid_angle


def test_default_grid_covers_sphere():
    g = direction_grid(18, 36)
    assert g.directions.shape == (18, 36, 3)
    assert abs(g.solid_angles.sum() - 4 * math.pi) < 1e-9
    assert np.max(np.abs(np.linalg.norm(g.directions, axis=-1) - 1.0)) < 1e-12


def test_single_cell_grid_is_whole_sphere():
    g = direction_grid(1, 1)
    assert g.directions.shape == (1, 1, 3)
    assert g.solid_angles[0, 0] == pytest.approx(4 * math.pi, abs=1e-12)
    # theta = pi/2, phi = pi
    np.testing.assert_allclose(g.directions[0, 0], [-1.0, 0.0, 0.0], atol=1e-15)


def test_first_cell_matches_spherical_formula():
    g = direction_grid(18, 36)
    theta = phi = math.pi / 36
    expected = [math.sin(theta) * math.cos(phi), math.cos(theta), math.sin(theta) * math.sin(phi)]
    np.testing.assert_allclose(g.directions[0, 0], expected, atol=1e-15)


def test_every_cell_matches_oracle():
    g = direction_grid(18, 36)
    for r in range(18):
        assert g.solid_angles[r, 0] == pytest.approx(cell_solid_angle(r, 18, 36), abs=1e-15)
        for c in range(36):
            np.testing.assert_allclose(g.directions[r, c], cell_direction(r, c, 18, 36), atol=1e-15)


@pytest.mark.parametrize("rows,cols", [(0, 36), (18, 0), (-1, 2)])
def test_rejects_nonpositive_dimensions(rows, cols):
    with pytest.raises(ValidationError):
        direction_grid(rows, cols)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(1, 128))
def test_any_grid_sums_to_four_pi(rows, cols):
    g = direction_grid(rows, cols)
    assert abs(g.solid_angles.sum() - 4 * math.pi) < 1e-9
    assert np.all(g.solid_angles > 0)


def test_env_map_validation():
    EnvironmentMap.zeros().validate()
    with pytest.raises(ValidationError):
        EnvironmentMap(-np.ones((18, 36, 3))).validate()
    with pytest.raises(ValidationError):
        EnvironmentMap(np.full((18, 36, 3), np.nan)).validate()
    with pytest.raises(ValidationError):
        EnvironmentMap(np.zeros((18, 36)))
