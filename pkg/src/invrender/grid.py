"""Equirectangular direction grid and the environment-map container.

Coordinates are camera space: x right, y up, z towards the viewer. Row ``r``
of an ``R x C`` map covers polar angle ``[pi*r/R, pi*(r+1)/R]`` measured from
+y (row 0 is the ceiling), column ``c`` covers azimuth
``[2*pi*c/C, 2*pi*(c+1)/C]`` measured from +x towards +z. A cell direction is
evaluated at the cell centre::

    d = (sin(theta) cos(phi), cos(theta), sin(theta) sin(phi))
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from invrender.errors import ShapeError, ValidationError

ENV_ROWS = 18
ENV_COLS = 36


@dataclass(frozen=True)
class DirectionGrid:
    directions: np.ndarray  # (rows, cols, 3)
    solid_angles: np.ndarray  # (rows, cols)

    @property
    def shape(self):
        return self.solid_angles.shape

    def flat_directions(self):
        return self.directions.reshape(-1, 3)

    def weights(self, weighting):
        """Per-cell shading weight, flattened: ones or solid angles."""
        if weighting == "literal_sum":
            return np.ones(self.solid_angles.size)
        if weighting == "solid_angle":
            return self.solid_angles.reshape(-1)
        raise ValidationError(f"unknown weighting {weighting!r}")


@lru_cache(maxsize=16)
def direction_grid(rows=ENV_ROWS, cols=ENV_COLS):
    if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 1:
        raise ValidationError(f"grid dimensions must be positive integers, got {rows}x{cols}")
    rows, cols = int(rows), int(cols)
    theta_edges = np.pi * np.arange(rows + 1) / rows
    dphi = 2.0 * np.pi / cols
    theta = np.pi * (np.arange(rows) + 0.5) / rows
    phi = dphi * (np.arange(cols) + 0.5)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack(
        [np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)], axis=-1
    )
    band = np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:])
    omega = np.repeat((band * dphi)[:, None], cols, axis=1)
    dirs.setflags(write=False)
    omega.setflags(write=False)
    return DirectionGrid(dirs, omega)


@dataclass
class EnvironmentMap:
    """Nonnegative HDR radiance on an equirectangular grid, shape ``(R, C, 3)``."""

    radiance: np.ndarray
    grid: DirectionGrid = field(init=False, repr=False)

    def __post_init__(self):
        rad = np.asarray(self.radiance, dtype=np.float64)
        if rad.ndim != 3 or rad.shape[2] != 3:
            raise ShapeError(f"environment radiance must be (R, C, 3), got {rad.shape}")
        self.radiance = rad
        self.grid = direction_grid(rad.shape[0], rad.shape[1])

    @property
    def shape(self):
        return self.radiance.shape

    @classmethod
    def zeros(cls, rows=ENV_ROWS, cols=ENV_COLS):
        return cls(np.zeros((rows, cols, 3)))

    def validate(self):
        if not np.all(np.isfinite(self.radiance)):
            raise ValidationError("environment radiance contains non-finite values")
        if np.any(self.radiance < 0):
            raise ValidationError("environment radiance must be nonnegative")
        return self

    def weighted_flat(self, weighting):
        """Radiance with the per-cell weight folded in, shape ``(K, 3)``."""
        w = self.grid.weights(weighting)
        return self.radiance.reshape(-1, 3) * w[:, None]
