"""Utilities."""

import json
import logging
import os
import re
from pathlib import Path

# Number of digits to use in shape identifiers.
WIDTH = 2

# Environment variable that overrides the default output root.
OUT_ENV = "INTERXFER_OUT"
DEFAULT_OUT = "out"

# Categories with a procedural shape family.
FAMILIES = ("mug", "chair")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# --------------------------------------------------------------------------------------
# Errors
# --------------------------------------------------------------------------------------


class InterxferError(Exception):
    """Base class for all errors raised on bad data or failed computation."""


class UsageError(InterxferError):
    """Bad command-line usage or configuration."""


class ShapeMismatchError(InterxferError):
    """Arrays or parameter collections that must be congruent are not."""


class NonFiniteError(InterxferError):
    """NaN or Inf found while evaluating a program."""

    def __init__(self, node, message=None):
        self.node = node
        super().__init__(message or f"non-finite value at {node}")


class GeometryError(InterxferError):
    """Degenerate geometry: bad shape parameters, failed sampling, failed Delaunay."""


class DataFileError(InterxferError):
    """A JSON data file is unreadable or lacks required fields."""


class CheckpointError(InterxferError):
    """Unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint is truncated or damaged."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture does not match the expected one."""


class TrainingDivergedError(InterxferError):
    """Training loss became non-finite; carries the last good parameters."""

    def __init__(self, epoch, last_good):
        self.epoch = epoch
        self.last_good = last_good
        super().__init__(f"training diverged at epoch {epoch}")


class TransferDivergedError(InterxferError):
    """Transfer loss became non-finite; carries the last valid iterate."""

    def __init__(self, iteration, last_valid):
        self.iteration = iteration
        self.last_valid = last_valid
        super().__init__(f"transfer diverged at iteration {iteration}")


# --------------------------------------------------------------------------------------
# Logging
# --------------------------------------------------------------------------------------


def setup_logging(verbosity=0):
    """Configure the package logger: 0 = WARNING, 1 = INFO, 2+ = DEBUG."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logger = logging.getLogger("interxfer")
    logger.setLevel(level)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    return logger


# --------------------------------------------------------------------------------------
# Names and paths
# --------------------------------------------------------------------------------------


def shape_id(family, seed):
    """Identifier of a generated shape, e.g. `mug_07`."""
    return f"{family}_{str(seed).zfill(WIDTH)}"


def parse_shape_id(text):
    """Split `mug_07` into ("mug", 7)."""
    match = re.fullmatch(r"([a-z]+)_(\d+)", text)
    if (match is None) or (match.group(1) not in FAMILIES):
        raise UsageError(f"not a shape identifier: {text}")
    return match.group(1), int(match.group(2))


def output_root(requested=None):
    """Where outputs go: explicit request, then environment, then default."""
    if requested:
        return Path(requested)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def filename_shape(out_dir, sid):
    """Where to store a shape's primitive list."""
    return Path(out_dir, f"{sid}-shape.json")


def filename_samples(out_dir, sid):
    """Where to store a shape's surface samples."""
    return Path(out_dir, f"{sid}-surface.ply")


def filename_checkpoint(out_dir, category):
    """Where to store a trained field."""
    return Path(out_dir, f"{category}.ckpt")


def filename_loss_log(out_dir, stem):
    """Where to store per-epoch or per-iteration losses."""
    return Path(out_dir, f"{stem}-losses.csv")


def filename_poses(out_dir):
    """Where to store transferred agent poses."""
    return Path(out_dir, "poses.json")


def filename_posed_agent(out_dir, frame):
    """Where to store one frame of the posed agent."""
    return Path(out_dir, f"agent-{str(frame).zfill(3)}.ply")


def filename_correspondence(out_dir):
    """Where to store a correspondence dump."""
    return Path(out_dir, "correspondence.csv")


def filename_manifest(out_dir):
    """Where to store the run manifest."""
    return Path(out_dir, "manifest.json")


def write_json(path, data):
    """Save a JSON document with stable key order."""
    with open(path, "w") as writer:
        json.dump(data, writer, indent=2, sort_keys=True)


def read_json(path):
    """Load a JSON document."""
    with open(path, "r") as reader:
        try:
            return json.load(reader)
        except json.JSONDecodeError as exc:
            raise DataFileError(f"{path} is not valid JSON: {exc}") from exc
