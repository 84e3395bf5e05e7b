"""Penetration, intersection volume and contact IoU of posed agents.

Depth is the largest distance that an object point reaches inside the agent.
Volume is counted on the cell centres of a lattice over the overlap of the
two bounding boxes.  Contact is a set of agent point indices close to the
object surface; source and transferred agents share their sampling, so the
two sets can be compared index by index.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from interxfer.agentkit import agent_bounds, agent_sdf
from interxfer.util import ShapeMismatchError

logger = logging.getLogger(__name__)

# Contact thresholds in normalized units per family.
CONTACT_THRESHOLD = {"mug": 0.02, "chair": 0.02}

DEFAULT_VOXEL_RES = 64

# Report columns in display order.
COLUMNS = {"depth": "Dep.", "volume": "Vol.", "iou": "IoU", "time": "Time"}


class EvalReport(BaseModel):
    """Metrics of one transferred interaction."""

    model_config = ConfigDict(extra="forbid")

    # Method or configuration the interaction came from.
    method: str = "full"

    # Name of the run (target shape id, frame, ...).
    name: str = ""

    depth: float = Field(ge=0)

    volume: float = Field(ge=0)

    # Percent.
    iou: float = Field(ge=0, le=100)

    threshold: float

    voxel_res: int

    # Wall-clock seconds of the transfer.
    time: float = 0.0


def _overlap_box(first, second):
    low = np.maximum(first[0], second[0])
    high = np.minimum(first[1], second[1])
    return low, high


def cell_centres(bbox, resolution):
    """Centres of a resolution^3 lattice of cells and the volume of one cell."""
    low, high = (np.asarray(b, dtype=float) for b in bbox)
    step = (high - low) / resolution
    axes = [low[k] + step[k] * (np.arange(resolution) + 0.5) for k in range(3)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1), float(np.prod(step))


def penetration_metrics(agent, state, shape, voxel_res=DEFAULT_VOXEL_RES, object_points=None):
    """(depth, volume) of the agent posed at `state` against an object.

    `shape` is anything with `sdf(points)` and `bounds()`, such as an
    `AnalyticShape` in the same frame as the agent.  Depth is taken over
    lattice cells inside the object plus any extra `object_points`.
    """
    assert voxel_res >= 8, "voxel resolution must be at least 8"
    low, high = _overlap_box(agent_bounds(agent, state), shape.bounds())
    depth, volume = 0.0, 0.0
    if np.all(high > low):
        centres, cell = cell_centres((low, high), voxel_res)
        inside_object = shape.sdf(centres) < 0
        inside_agent = agent_sdf(agent, state, centres[inside_object])
        both = inside_agent < 0
        volume = float(both.sum()) * cell
        if both.any():
            depth = float(-inside_agent[both].min())
    if object_points is not None and len(object_points):
        values = agent_sdf(agent, state, np.asarray(object_points, dtype=float).reshape(-1, 3))
        if (values < 0).any():
            depth = max(depth, float(-values.min()))
    return depth, volume


def contact_set(points, sdf, threshold):
    """Indices of points within `threshold` of the object surface.

    `sdf` is a callable or precomputed per-point distances.
    """
    values = sdf(points) if callable(sdf) else np.asarray(sdf, dtype=float)
    return set(np.flatnonzero(np.abs(values) <= threshold).tolist())


def contact_iou(source, target, threshold):
    """Contact IoU in percent of two (agent points, object sdf) pairs.

    Defined as 100 when neither agent touches the object.
    """
    if len(source[0]) != len(target[0]):
        raise ShapeMismatchError(
            f"point-count mismatch: {len(source[0])} source vs {len(target[0])} target agent points"
        )
    first = contact_set(*source, threshold)
    second = contact_set(*target, threshold)
    union = first | second
    if not union:
        return 100.0
    return 100.0 * len(first & second) / len(union)


def report_table(reports):
    """Per-report rows followed by a mean row per method."""
    if not reports:
        raise ValueError("no reports to summarize")
    rows = pd.DataFrame([r.model_dump() for r in reports])
    means = rows.groupby("method", sort=False)[list(COLUMNS)].mean().reset_index()
    means["name"] = "mean"
    table = pd.concat([rows, means], ignore_index=True)
    return table[["method", "name", *COLUMNS]].rename(columns=COLUMNS)


def write_report(reports, path):
    """Write an aligned text table and the same rows as CSV beside it.

    `path` names either file; the other gets the same stem with `.txt` or `.csv`.
    """
    table = report_table(reports)
    path = Path(path)
    text_path = path.with_suffix(".txt") if path.suffix == ".csv" else path
    with open(text_path, "w") as writer:
        writer.write(table.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n")
    table.to_csv(text_path.with_suffix(".csv"), index=False)
    logger.info("wrote %d reports to %s", len(reports), text_path)
    return table
