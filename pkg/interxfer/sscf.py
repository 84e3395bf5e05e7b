"""Surface and spatial correspondence through the learned template field.

A point p of an object is carried into template space as R p + v.  Two
points on different objects correspond when their template images are
close: a source surface point maps to the target surface point with the
nearest template image, and a source agent point maps to the lattice point
around the target whose template image is nearest.

Every cloud is handled in its own centred frame (the frame its code was
computed in).  Positions returned by `correspond_spatial` are put back into
the target's shape frame by adding `target.center`.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from interxfer.geomkit import grid_spacing, lattice_bounds, nearest, sample_grid
from interxfer.rdif import template_points
from interxfer.util import GeometryError

logger = logging.getLogger(__name__)


@dataclass
class TemplateGrid:
    """Lattice around a target cloud and the template image of every lattice point."""

    points: np.ndarray
    images: np.ndarray
    bounds: tuple
    resolution: int

    @property
    def spacing(self):
        return grid_spacing(self.bounds, self.resolution)


@dataclass
class Correspondence:
    """Corresponded target surface indices and spatial positions.

    `surface[j]` is the target surface index matched to source object point j;
    `spatial[i]` is the lattice position matched to source agent point i.  The
    residuals are template-space distances to the chosen candidates.
    """

    surface: np.ndarray
    spatial: np.ndarray
    residual_surface: np.ndarray
    residual_spatial: np.ndarray
    spatial_index: np.ndarray
    grid_spacing: float

    def corresponded_object(self, target):
        """O^st: target surface positions (shape frame) in source object order."""
        return target.points[self.surface] + target.center


def to_template(points, code, params):
    """Template images R p + v of points given in the code's frame."""
    points = np.asarray(points, dtype=float)
    images = template_points(points.reshape(-1, 3), code, params)
    return images.reshape(points.shape)


def correspond_surface(source, code_s, target, code_t, params):
    """Target surface index nearest in template space to every source surface point."""
    if len(target) == 0:
        raise GeometryError("target cloud is empty")
    source_images = to_template(source.points, code_s, params)
    target_images = to_template(target.points, code_t, params)
    index, residual = nearest(source_images, target_images, return_distance=True)
    logger.debug(
        "surface correspondence: %d points, mean residual %.3g",
        len(index),
        float(residual.mean()) if len(residual) else 0.0,
    )
    return index, residual


def template_grid(target, code_t, resolution, params, cache=None, key=None):
    """Lattice over 1.2x the target's bounding box and its template images.

    With a `cache.TemplateCache` and key, the images are read from or written
    to disk.
    """
    bounds = lattice_bounds(target.points)
    points = sample_grid(bounds, resolution)

    def compute():
        return to_template(points, code_t, params)

    if (cache is not None) and (key is not None):
        images = cache.get(key, compute)
    else:
        images = compute()
    return TemplateGrid(points=points, images=images, bounds=bounds, resolution=resolution)


def correspond_spatial(agent_points, source, code_s, grid, params):
    """Lattice position around the target matched to every source agent point.

    `agent_points` are in the source shape frame; the returned positions are
    in the target's centred frame (add `target.center` for its shape frame).
    """
    agent_points = np.asarray(agent_points, dtype=float).reshape(-1, 3)
    images = to_template(agent_points - source.center, code_s, params)
    index, residual = nearest(images, grid.images, return_distance=True)
    return grid.points[index], index, residual


def correspond_frames(
    source, code_s, agent_frames, target, code_t, resolution, params, cache=None, key=None
):
    """Correspondences of several agent configurations sharing one source and target.

    Surface matches and the target lattice are computed once.
    """
    assert resolution >= 2, "grid resolution must be at least 2"
    surface, residual_surface = correspond_surface(source, code_s, target, code_t, params)
    grid = template_grid(target, code_t, resolution, params, cache=cache, key=key)
    logger.info(
        "correspondence: %d surface points, lattice %d^3 (spacing %.4f)",
        len(surface),
        resolution,
        grid.spacing,
    )
    result = []
    for agent_points in agent_frames:
        spatial, spatial_index, residual_spatial = correspond_spatial(
            agent_points, source, code_s, grid, params
        )
        result.append(
            Correspondence(
                surface=surface,
                spatial=spatial + target.center,
                residual_surface=residual_surface,
                residual_spatial=residual_spatial,
                spatial_index=spatial_index,
                grid_spacing=grid.spacing,
            )
        )
    return result


def correspond(source, code_s, agent_points, target, code_t, resolution, params, cache=None, key=None):
    """Surface and spatial correspondence of one source interaction to a target."""
    return correspond_frames(
        source, code_s, [agent_points], target, code_t, resolution, params, cache, key
    )[0]


def correspondence_table(corr):
    """One row per corresponded point, for debugging dumps."""
    surface = pd.DataFrame(
        {
            "kind": "surface",
            "index": np.arange(len(corr.surface)),
            "target": corr.surface,
            "x": np.nan,
            "y": np.nan,
            "z": np.nan,
            "residual": corr.residual_surface,
        }
    )
    spatial = pd.DataFrame(
        {
            "kind": "spatial",
            "index": np.arange(len(corr.spatial)),
            "target": corr.spatial_index,
            "x": corr.spatial[:, 0],
            "y": corr.spatial[:, 1],
            "z": corr.spatial[:, 2],
            "residual": corr.residual_spatial,
        }
    )
    return pd.concat([surface, spatial], ignore_index=True)


def write_correspondence(path, corr):
    correspondence_table(corr).to_csv(path, index=False)
