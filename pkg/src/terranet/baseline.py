"""Single-scale Top-Hat ground filter on a rasterized DSM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .evaluation import TerrainRaster


@dataclass
class MorphConfig:
    cell_size: float = 1.0
    window_radius: int = 15  # cells; square window of side 2r + 1
    height_threshold: float = 0.5
    fill: str = "nearest-ground"

    def __post_init__(self):
        if not self.cell_size > 0 or self.window_radius < 1 or not self.height_threshold > 0:
            raise ValueError(f"cell_size, window_radius and height_threshold must be positive: {self}")
        if self.fill != "nearest-ground":
            raise ValueError(f"unsupported fill method {self.fill!r}")


def _erode(values, valid, size):
    v = np.where(valid, values, np.inf)
    return ndimage.minimum_filter(v, size=size, mode="constant", cval=np.inf)


def _dilate(values, valid, size):
    v = np.where(valid, values, -np.inf)
    return ndimage.maximum_filter(v, size=size, mode="constant", cval=-np.inf)


def grayscale_opening(raster: TerrainRaster, window_radius: int) -> TerrainRaster:
    """Windowed min then windowed max over a (2r+1)^2 square; nodata cells are
    ignored by both passes and stay nodata."""
    valid = raster.valid
    if not valid.any():
        raise ValueError("raster has no valid cells")
    size = 2 * int(window_radius) + 1
    opened = _dilate(_erode(raster.values, valid, size), valid, size)
    return raster.with_values(np.where(valid, opened, raster.nodata))


def _nearest_ground_fill(values, ground, targets):
    """For every target cell, the value of the closest ground cell; ties go to
    the first ground cell in row-major order."""
    g_rc = np.argwhere(ground)  # row-major order
    t_rc = np.argwhere(targets)
    if len(t_rc) == 0:
        return values.copy()
    tree = cKDTree(g_rc)
    dist, _ = tree.query(t_rc)
    out = values.copy()
    for (r, c), d in zip(t_rc, dist):
        ties = tree.query_ball_point((r, c), d + 1e-9)
        gi = min(ties)
        out[r, c] = values[g_rc[gi][0], g_rc[gi][1]]
    return out


def tophat_dtm(dsm: TerrainRaster, config: MorphConfig) -> tuple[TerrainRaster, TerrainRaster]:
    """Ground mask (1 ground, 0 object, nodata) and the filled DTM raster."""
    valid = dsm.valid
    opened = grayscale_opening(dsm, config.window_radius)
    ground = valid & (dsm.values - opened.values <= config.height_threshold)
    if not ground.any():
        raise ValueError("no ground cells found; raise height_threshold or window_radius")
    filled = _nearest_ground_fill(dsm.values, ground, valid & ~ground)
    # a fill value from higher ground must not lift the cell above its own surface
    dtm = np.where(valid, np.minimum(filled, dsm.values), dsm.nodata)
    mask = np.where(valid, ground.astype(np.float64), dsm.nodata)
    return dsm.with_values(mask), dsm.with_values(dtm)
