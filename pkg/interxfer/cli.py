"""Command-line driver: generate shapes, train a field, transfer, evaluate, export.

Run `python -m interxfer.cli <command> --help` for options.  Every command
accepts `--parameters file.json` holding a flat JSON object; explicit flags
override values from the file.  Outputs go under `--out` (or
`$INTERXFER_OUT`, or `./out`) together with a `manifest.json` recording the
configuration, seed and library versions.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import pydantic
import scipy
import torch
from pydantic import BaseModel, ConfigDict

import interxfer
from interxfer import agentkit, evalkit, geomkit, rdif, sscf, ssco
from interxfer.agentkit import AgentState
from interxfer.cache import TemplateCache, template_key
from interxfer.util import (
    FAMILIES,
    DataFileError,
    InterxferError,
    ShapeMismatchError,
    TrainingDivergedError,
    UsageError,
    filename_checkpoint,
    filename_correspondence,
    filename_loss_log,
    filename_manifest,
    filename_posed_agent,
    filename_poses,
    filename_samples,
    filename_shape,
    output_root,
    parse_shape_id,
    read_json,
    setup_logging,
    shape_id,
    write_json,
)

logger = logging.getLogger(__name__)

# Scales the trained field has seen during augmentation.
SCALE_RANGE = (0.75, 1.25)

# Surface samples used for depth checks in `eval`.
EVAL_SURFACE_SAMPLES = 2048


class RunConfig(BaseModel):
    """Run-level settings shared by the commands."""

    model_config = ConfigDict(extra="forbid")

    command: str

    out: str

    seed: int = 0

    # Shape family for gen-data and train.
    category: str = "mug"

    # Shapes to generate or train on, and held-out shapes for evaluation.
    shapes: int = 20

    holdout: int = 5

    # Directory of gen-data outputs to train on instead of regenerating.
    data: Optional[str] = None

    # Surface samples per object.
    samples: int = 2048

    # Edge resolution of the spatial correspondence lattice.
    resolution: int = 48

    checkpoint: Optional[str] = None

    # Built-in demo name or pose file.
    source: Optional[str] = None

    # Target shape id such as `mug_07`.
    target: Optional[str] = None

    ablation: str = "full"

    target_scale: float = 1.0

    target_rotation_seed: Optional[int] = None

    # Synthetic sequence: number of frames and joint jitter in radians.
    frames: int = 1

    jitter: float = 0.0

    cache_dir: Optional[str] = None

    # eval: transferred poses, metric settings and report label.
    poses: Optional[str] = None

    threshold: Optional[float] = None

    voxel_res: int = evalkit.DEFAULT_VOXEL_RES

    method: Optional[str] = None

    # export: artifact to convert and output format.
    input: Optional[str] = None

    format: str = "ply"


# Command-specific records whose fields may also appear in a parameter file.
SECTIONS = {"train": rdif.TrainConfig, "transfer": ssco.TransferConfig}


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting."""

    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------------------
# Demo sources
# --------------------------------------------------------------------------------------


def demo_grasp():
    """Gripper holding the body of `mug_00` from the side, fingers curled around it."""
    shape = geomkit.generate_shape("mug", seed=0)
    body = shape.primitives[0]
    radius = body.size[0]
    center = np.array(body.center)
    state = AgentState(
        rotvec=np.zeros(3),
        translation=center + np.array([-0.1, -(radius + 0.075), 0.0]),
        theta=np.tile([0.6, 0.8], 3),
    )
    return "gripper", shape_id("mug", 0), state


def demo_sit():
    """Sitter on the seat of `chair_00`, back against the backrest, thighs forward."""
    shape = geomkit.generate_shape("chair", seed=0)
    seat, back = shape.primitives[0], shape.primitives[1]
    seat_top = seat.center[2] + seat.size[2]
    back_front = back.center[1] + back.size[1]
    agent = agentkit.sitter()
    torso, thigh = agent.links[0], agent.links[1]
    theta = np.zeros(agent.n_joints)
    theta[0:4] = [np.pi / 2, -np.pi / 2, np.pi / 2, -np.pi / 2]
    state = AgentState(
        rotvec=np.zeros(3),
        translation=np.array(
            [
                seat.center[0],
                back_front + torso.radius + 0.01,
                seat_top + thigh.radius + torso.half_length,
            ]
        ),
        theta=theta,
    )
    return "sitter", shape_id("chair", 0), state


DEMOS = {"demo_grasp": demo_grasp, "demo_sit": demo_sit}


def load_source(run):
    """(agent, source shape id, frames, document) for a demo name or pose file."""
    if run.source in DEMOS:
        name, sid, state = DEMOS[run.source]()
        frames = _jittered(state, run.frames, run.jitter, run.seed)
        doc = {"object": sid, "scale": 1.0, "rotation_seed": None}
    elif run.source and Path(run.source).exists():
        name, frames, doc = agentkit.read_poses(run.source)
        if "object" not in doc:
            raise UsageError(f"{run.source} does not name its object")
        sid = doc["object"]
    else:
        raise UsageError(f"unknown source {run.source}; use {sorted(DEMOS)} or a pose file")
    return agentkit.load_agent(name), sid, frames, doc


def _jittered(state, count, jitter, seed):
    """`count` frames of `state` with independent Gaussian joint jitter."""
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(count):
        frame = state.copy()
        if jitter > 0:
            frame.theta = frame.theta + rng.normal(0.0, jitter, size=frame.theta.shape)
        frames.append(frame)
    return frames


def posed_object(sid, scale=1.0, rotation_seed=None):
    """Generated shape for an id, optionally rotated and uniformly scaled."""
    family, seed = parse_shape_id(sid)
    shape = geomkit.generate_shape(family, seed=seed)
    rotation = None if rotation_seed is None else geomkit.random_rotation(rotation_seed)
    if (rotation is not None) or (scale != 1.0):
        shape = shape.transformed(rotation=rotation, scale=scale)
    return shape


# --------------------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------------------


def gen_data(run, section):
    """Write shape descriptions and labelled surface samples."""
    out = _out_dir(run)
    for index in range(run.shapes):
        seed = run.seed + index
        sid = shape_id(run.category, seed)
        shape = geomkit.generate_shape(run.category, seed=seed)
        cloud = geomkit.sample_surface(shape, run.samples, seed)
        write_json(filename_shape(out, sid), shape.model_dump(mode="json"))
        geomkit.write_ply(
            filename_samples(out, sid), cloud.points + cloud.center, cloud.normals, cloud.labels
        )
        logger.info("generated %s", sid)
    return {"shapes": run.shapes}


def _training_shapes(run):
    if run.data:
        paths = sorted(Path(run.data).glob(f"{run.category}_*-shape.json"))
        if len(paths) < 2:
            raise UsageError(f"need at least two {run.category} shapes in {run.data}")
        return [geomkit.AnalyticShape.model_validate(read_json(p)) for p in paths]
    return [
        geomkit.generate_shape(run.category, seed=run.seed + index)
        for index in range(run.shapes)
    ]


def train(run, section):
    """Fit a field to a family and write the checkpoint and loss log."""
    out = _out_dir(run)
    dataset = _training_shapes(run)
    holdout = [
        geomkit.sample_surface(
            geomkit.generate_shape(run.category, seed=run.seed + len(dataset) + k),
            run.samples,
            run.seed + len(dataset) + k,
        )
        for k in range(run.holdout)
    ]
    try:
        params, log = rdif.train(dataset, section, holdout)
    except TrainingDivergedError as exc:
        path = filename_checkpoint(out, f"{run.category}-diverged")
        rdif.save_checkpoint(path, exc.last_good)
        logger.error("training diverged at epoch %d; last good parameters in %s", exc.epoch, path)
        raise
    rdif.save_checkpoint(filename_checkpoint(out, run.category), params)
    log.to_csv(filename_loss_log(out, "train"), index=False)
    return {"final_loss": float(log["loss"].iloc[-1])}


def transfer(run, section):
    """Carry a source interaction onto a target shape."""
    for name in ("checkpoint", "target"):
        if getattr(run, name) is None:
            raise UsageError(f"transfer needs --{name}")
    out = _out_dir(run)
    if not (SCALE_RANGE[0] <= run.target_scale <= SCALE_RANGE[1]):
        logger.warning("target scale %g is outside the trained range %s", run.target_scale, SCALE_RANGE)
    params = rdif.load_checkpoint(run.checkpoint)
    agent, source_id, frames, source_doc = load_source(run)
    started = time.perf_counter()

    source_shape = posed_object(
        source_id, source_doc.get("scale", 1.0), source_doc.get("rotation_seed")
    )
    target_shape = posed_object(run.target, run.target_scale, run.target_rotation_seed)
    source_cloud = geomkit.sample_surface(source_shape, run.samples, run.seed)
    target_cloud = geomkit.sample_surface(target_shape, run.samples, run.seed)
    code_s = rdif.encode(source_cloud, params)
    code_t = rdif.encode(target_cloud, params)

    cache, key = None, None
    if run.cache_dir:
        cache = TemplateCache(run.cache_dir)
        key = template_key(Path(run.checkpoint).read_bytes(), target_cloud.points, run.resolution)
    posed = [agentkit.forward_kinematics(agent, s).positions for s in frames]
    matches = sscf.correspond_frames(
        source_cloud, code_s, posed, target_cloud, code_t, run.resolution, params, cache, key
    )
    problems = [
        ssco.make_problem(agent, state, source_cloud, corr, target_cloud)
        for state, corr in zip(frames, matches)
    ]
    if len(problems) == 1:
        result, trace = ssco.transfer_single(problems[0], config=section)
        states = [result]
    else:
        states, trace = ssco.transfer_sequence(problems, section)
    elapsed = time.perf_counter() - started

    extra = {
        "object": run.target,
        "scale": run.target_scale,
        "rotation_seed": run.target_rotation_seed,
        "source": run.source,
        "method": run.method or run.ablation,
        "time": elapsed,
    }
    agentkit.write_poses(filename_poses(out), agent.name, states, extra)
    agentkit.write_poses(
        Path(out, "source-poses.json"),
        agent.name,
        frames,
        {"object": source_id, "scale": source_doc.get("scale", 1.0), "rotation_seed": source_doc.get("rotation_seed")},
    )
    for index, state in enumerate(states):
        agentkit.write_posed_agent(filename_posed_agent(out, index), agent, state)
    trace.to_csv(filename_loss_log(out, "transfer"), index=False)
    sscf.write_correspondence(filename_correspondence(out), matches[0])
    geomkit.write_ply(
        filename_samples(out, run.target),
        target_cloud.points + target_cloud.center,
        target_cloud.normals,
        target_cloud.labels,
    )
    logger.info("transferred %d frame(s) in %.2fs", len(states), elapsed)
    return {"frames": len(states), "time": elapsed, "final_loss": float(trace["L_total"].iloc[-1])}


def evaluate(run, section):
    """Compare transferred poses with their source poses."""
    for name in ("source", "poses"):
        if getattr(run, name) is None:
            raise UsageError(f"eval needs --{name}")
    out = _out_dir(run)
    source_name, source_frames, source_doc = agentkit.read_poses(run.source)
    target_name, target_frames, target_doc = agentkit.read_poses(run.poses)
    source_agent = agentkit.load_agent(source_name)
    target_agent = agentkit.load_agent(target_name)
    if source_agent.n_points != target_agent.n_points:
        raise ShapeMismatchError(
            f"point-count mismatch: {source_name} has {source_agent.n_points} points, "
            f"{target_name} has {target_agent.n_points}"
        )
    if len(source_frames) != len(target_frames):
        raise ShapeMismatchError(
            f"frame-count mismatch: {len(source_frames)} source vs {len(target_frames)} target"
        )
    for path, doc in ((run.source, source_doc), (run.poses, target_doc)):
        if "object" not in doc:
            raise DataFileError(f"{path} does not name its object")
    source_shape = posed_object(
        source_doc["object"], source_doc.get("scale", 1.0), source_doc.get("rotation_seed")
    )
    target_shape = posed_object(
        target_doc["object"], target_doc.get("scale", 1.0), target_doc.get("rotation_seed")
    )
    family, _ = parse_shape_id(target_doc["object"])
    threshold = run.threshold if run.threshold is not None else evalkit.CONTACT_THRESHOLD[family]
    cloud = geomkit.sample_surface(target_shape, EVAL_SURFACE_SAMPLES, run.seed)
    surface = cloud.points + cloud.center

    reports = []
    for index, (before, after) in enumerate(zip(source_frames, target_frames)):
        depth, volume = evalkit.penetration_metrics(
            target_agent, after, target_shape, run.voxel_res, surface
        )
        iou = evalkit.contact_iou(
            (agentkit.forward_kinematics(source_agent, before).positions, source_shape.sdf),
            (agentkit.forward_kinematics(target_agent, after).positions, target_shape.sdf),
            threshold,
        )
        reports.append(
            evalkit.EvalReport(
                method=run.method or target_doc.get("method", "full"),
                name=f"{target_doc['object']}#{index}",
                depth=depth,
                volume=volume,
                iou=iou,
                threshold=threshold,
                voxel_res=run.voxel_res,
                time=target_doc.get("time", 0.0) / len(target_frames),
            )
        )
    table = evalkit.write_report(reports, Path(out, "report.txt"))
    print(table.to_string(index=False))
    return {"reports": len(reports)}


def export(run, section):
    """Convert a pose file or shape description into PLY or OBJ files."""
    if run.input is None:
        raise UsageError("export needs --input")
    if run.format not in ("ply", "obj"):
        raise UsageError(f"unknown export format {run.format}")
    out = _out_dir(run)
    doc = read_json(run.input)
    stem = Path(run.input).stem
    written = []
    if "frames" in doc:
        agent = agentkit.load_agent(doc["agent"])
        for index, frame in enumerate(doc["frames"]):
            posed = agentkit.forward_kinematics(agent, AgentState.from_dict(frame))
            path = Path(out, f"{stem}-{str(index).zfill(3)}.{run.format}")
            _write_points(path, run.format, posed.positions, posed.normals, posed.links)
            written.append(path)
    elif "primitives" in doc:
        shape = geomkit.AnalyticShape.model_validate(doc)
        cloud = geomkit.sample_surface(shape, run.samples, run.seed)
        path = Path(out, f"{stem}.{run.format}")
        _write_points(path, run.format, cloud.points + cloud.center, cloud.normals, cloud.labels)
        written.append(path)
    else:
        raise UsageError(f"{run.input} is neither a pose file nor a shape description")
    return {"written": [str(p) for p in written]}


def _write_points(path, fmt, points, normals, labels):
    if fmt == "ply":
        geomkit.write_ply(path, points, normals, labels)
    else:
        geomkit.write_obj(path, points)


HANDLERS = {
    "gen-data": gen_data,
    "train": train,
    "transfer": transfer,
    "eval": evaluate,
    "export": export,
}


# --------------------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------------------


def _out_dir(run):
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def versions():
    return {
        "interxfer": interxfer.__version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_manifest(run, section, summary):
    manifest = {
        "command": run.command,
        "run": run.model_dump(mode="json"),
        "config": None if section is None else section.model_dump(mode="json"),
        "seed": run.seed,
        "summary": summary,
        "versions": versions(),
    }
    write_json(filename_manifest(run.out), manifest)


def build_config(options):
    """Merge the parameter file with explicit flags (flags win) and validate."""
    command = options.command
    values = {}
    if options.parameters:
        path = Path(options.parameters)
        if not path.exists():
            raise UsageError(f"parameter file {path} does not exist")
        try:
            loaded = read_json(path)
        except DataFileError as exc:
            raise UsageError(str(exc)) from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"parameter file {path} must hold a JSON object")
        values.update(loaded)
    flags = {k: v for k, v in vars(options).items() if k not in ("parameters", "verbose")}
    values.update({k: v for k, v in flags.items() if v is not None})
    values["out"] = str(output_root(values.get("out")))

    run_fields = set(RunConfig.model_fields)
    record = SECTIONS.get(command)
    section_fields = set(record.model_fields) if record else set()
    unknown = set(values) - run_fields - section_fields
    if unknown:
        raise UsageError(f"unknown parameter(s) for {command}: {', '.join(sorted(unknown))}")
    try:
        run = RunConfig(**{k: v for k, v in values.items() if k in run_fields})
        section_values = {k: v for k, v in values.items() if k in section_fields}
        if command == "train":
            section_values.setdefault("seed", run.seed)
            section = record(**section_values)
        elif command == "transfer":
            section = ssco.TransferConfig.preset(run.ablation, **section_values)
        else:
            section = None
    except pydantic.ValidationError as exc:
        raise UsageError(str(exc)) from exc
    if run.category not in FAMILIES:
        raise UsageError(f"unknown category {run.category}; choose from {FAMILIES}")
    for name in ("checkpoint", "input", "data"):
        value = getattr(run, name)
        if value is not None and not Path(value).exists():
            raise UsageError(f"{name} {value} does not exist")
    if command == "eval":
        for name in ("source", "poses"):
            value = getattr(run, name)
            if value is not None and not Path(value).exists():
                raise UsageError(f"{name} {value} does not exist")
    return run, section


def parse_args(argv):
    """Get command-line arguments."""
    parser = _Parser(prog="interxfer", description="Interaction transfer toolkit.")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)
    commands.required = True

    def command(name, help):
        sub = commands.add_parser(name, help=help)
        sub.add_argument("--parameters", type=str, default=None, help="JSON parameter file")
        sub.add_argument("--out", type=str, default=None, help="output directory")
        sub.add_argument("--seed", type=int, default=None, help="RNG seed")
        sub.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
        return sub

    sub = command("gen-data", "generate procedural shapes and surface samples")
    sub.add_argument("--category", type=str, default=None, help="mug or chair")
    sub.add_argument("--shapes", type=int, default=None, help="number of shapes")
    sub.add_argument("--samples", type=int, default=None, help="surface samples per shape")

    sub = command("train", "train a field for one category")
    sub.add_argument("--category", type=str, default=None, help="mug or chair")
    sub.add_argument("--shapes", type=int, default=None, help="number of training shapes")
    sub.add_argument("--holdout", type=int, default=None, help="held-out shapes")
    sub.add_argument("--data", type=str, default=None, help="gen-data output directory")
    sub.add_argument("--epochs", type=int, default=None, help="training epochs")
    sub.add_argument("--samples", type=int, default=None, help="held-out surface samples")

    sub = command("transfer", "transfer an interaction to a target shape")
    sub.add_argument("--checkpoint", type=str, default=None, help="trained field")
    sub.add_argument("--source", type=str, default=None, help="demo name or pose file")
    sub.add_argument("--target", type=str, default=None, help="target shape id, e.g. mug_07")
    sub.add_argument("--resolution", type=int, default=None, help="lattice edge resolution")
    sub.add_argument("--samples", type=int, default=None, help="surface samples per object")
    sub.add_argument("--ablation", type=str, default=None, help=f"one of {sorted(ssco.ABLATIONS)}")
    sub.add_argument("--target-scale", dest="target_scale", type=float, default=None)
    sub.add_argument("--target-rotation-seed", dest="target_rotation_seed", type=int, default=None)
    sub.add_argument("--frames", type=int, default=None, help="synthetic sequence length")
    sub.add_argument("--jitter", type=float, default=None, help="sequence joint jitter (radians)")
    sub.add_argument("--cache-dir", dest="cache_dir", type=str, default=None)
    sub.add_argument("--method", type=str, default=None, help="label recorded for eval")

    sub = command("eval", "evaluate transferred poses")
    sub.add_argument("--source", type=str, default=None, help="source pose file")
    sub.add_argument("--poses", type=str, default=None, help="transferred pose file")
    sub.add_argument("--threshold", type=float, default=None, help="contact threshold")
    sub.add_argument("--voxel-res", dest="voxel_res", type=int, default=None)
    sub.add_argument("--method", type=str, default=None, help="report label")

    sub = command("export", "convert pose files or shapes to PLY/OBJ")
    sub.add_argument("--input", type=str, default=None, help="pose file or shape JSON")
    sub.add_argument("--format", type=str, default=None, help="ply or obj")
    sub.add_argument("--samples", type=int, default=None, help="surface samples for shapes")

    return parser.parse_args(argv)


def run(argv):
    """Run one command; returns the process exit code."""
    try:
        options = parse_args(argv)
        setup_logging(options.verbose)
        config, section = build_config(options)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return 0 if not exc.code else 1
    try:
        summary = HANDLERS[config.command](config, section)
        write_manifest(config, section, summary)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (InterxferError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KeyError, ValueError) as exc:
        # Malformed data that got past the loaders, e.g. a shape file failing validation.
        print(f"error: bad input data: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    """Main driver."""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
