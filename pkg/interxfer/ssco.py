"""Constrained pose optimization that carries an interaction to a new object.

The agent's rigid transform and joint angles are optimized against three
terms:

*   spatial: posed agent points should sit on their corresponded positions;
*   surface: the Laplacian coordinates of the posed agent points, computed
    against the corresponded object points, should match the source
    coordinates rotated by the change in each point's normal;
*   penetration: target object points that end up inside the agent pull the
    nearest agent point towards them.

Every step is a clipped gradient step followed by projection of the joint
angles into a box around the source angles.  Sequences are optimized in
overlapping windows with an extra penalty on frame-to-frame joint changes.
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, field_validator

from interxfer import diffcore
from interxfer.agentkit import (
    AgentDef,
    AgentState,
    agent_sdf,
    clamp_joints,
    forward_kinematics,
    posed_tensors,
)
from interxfer.diffcore import DTYPE, ParamSet
from interxfer.geomkit import rotations_aligning
from interxfer.ssir import InteractionGraph, build_interaction_graph, laplacian_tensor
from interxfer.util import NonFiniteError, ShapeMismatchError, TransferDivergedError, UsageError

logger = logging.getLogger(__name__)

STATE_FIELDS = ("rotvec", "translation", "theta")

# Loss-weight presets for ablation runs.
ABLATIONS = {
    "full": {},
    "spatial_only": {"w_surface": 0.0, "w_pen": 0.0},
    "surface_only": {"w_spatial": 0.0, "w_pen": 0.0},
    "no_pen": {"w_pen": 0.0},
    "no_surface": {"w_surface": 0.0},
}


class TransferConfig(BaseModel):
    """Loss weights, step schedule and sequence windowing."""

    model_config = ConfigDict(extra="forbid")

    # Weights of the spatial, surface, penetration and smoothness terms.
    w_spatial: float = 1.0

    w_surface: float = 1.0

    w_pen: float = 1.0

    w_smooth: float = 0.01

    # Largest joint deviation from the source angles, in degrees.
    gamma_deg: float = 10.0

    # Step size, halved every `lr_halve_every` iterations.
    lr: float = 0.01

    lr_halve_every: int = 10

    # Gradient norm limit, per frame.
    clip_norm: float = 0.01

    max_iterations: int = 100

    # Stop when the total loss changes by less than this.
    tol: float = 1e-4

    # Frames per window and frames between window starts.
    window: int = 12

    stride: int = 6

    @field_validator("w_spatial", "w_surface", "w_pen", "w_smooth", "gamma_deg", "tol")
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("lr", "clip_norm")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("lr_halve_every", "max_iterations", "window", "stride")
    @classmethod
    def _at_least_one(cls, value):
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @property
    def gamma(self):
        return float(np.deg2rad(self.gamma_deg))

    @classmethod
    def preset(cls, name, **overrides):
        """Config with an ablation preset's weights, then `overrides`."""
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name}; choose from {sorted(ABLATIONS)}")
        return cls(**{**ABLATIONS[name], **overrides})


@dataclass
class TransferProblem:
    """One frame: source pose, frozen interaction graph and corresponded targets.

    All positions are in the target's shape frame except the graph, which was
    built in the source's.
    """

    agent: AgentDef
    source_state: AgentState
    graph: InteractionGraph

    # a^st, one per agent point.
    spatial_target: np.ndarray

    # o^st, one per source object point.
    object_target: np.ndarray

    # Target object points tested for penetration.
    target_points: np.ndarray

    def __post_init__(self):
        if len(self.spatial_target) != self.graph.n_agent:
            raise ShapeMismatchError("spatial correspondence does not match agent points")
        if len(self.object_target) != self.graph.n_object:
            raise ShapeMismatchError("surface correspondence does not match object points")
        if self.agent.n_points != self.graph.n_agent:
            raise ShapeMismatchError("agent definition does not match the graph")


@dataclass
class Selections:
    """Per-evaluation selections held constant under differentiation."""

    # Rotation taking each source agent normal to its current normal.
    rotations: torch.Tensor

    # Target object points currently inside the agent.
    interior: torch.Tensor


def make_problem(agent, source_state, source_object, correspondence, target):
    """Freeze the source interaction and attach a correspondence to a target.

    `source_object` is the source surface cloud; its shape-frame positions
    are `points + center`.
    """
    posed = forward_kinematics(agent, source_state)
    graph = build_interaction_graph(
        source_object.points + source_object.center, posed.positions, posed.normals
    )
    return TransferProblem(
        agent=agent,
        source_state=source_state.copy(),
        graph=graph,
        spatial_target=np.asarray(correspondence.spatial, dtype=float),
        object_target=correspondence.corresponded_object(target),
        target_points=target.points + target.center,
    )


def initial_state(problem):
    """Source state with the translation moved by the mean offset a^st - a^s."""
    posed = forward_kinematics(problem.agent, problem.source_state)
    state = problem.source_state.copy()
    state.translation = state.translation + (problem.spatial_target - posed.positions).mean(axis=0)
    return state


def select(problem, state):
    """Normal-alignment rotations and interior object points at `state`."""
    posed = forward_kinematics(problem.agent, state)
    rotations = rotations_aligning(problem.graph.source_normals, posed.normals)
    inside = agent_sdf(problem.agent, state, problem.target_points) < 0
    return Selections(
        rotations=torch.as_tensor(rotations, dtype=DTYPE),
        interior=torch.as_tensor(problem.target_points[inside], dtype=DTYPE),
    )


# --------------------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------------------


def frame_terms(problem, selections, rotvec, translation, theta, config):
    """Loss components of one frame as scalar tensors."""
    positions, _ = posed_tensors(problem.agent, rotvec, translation, theta)
    target = torch.as_tensor(problem.spatial_target, dtype=DTYPE)
    spatial = ((positions - target) ** 2).sum()

    laplacian = laplacian_tensor(problem.graph, positions, problem.object_target)
    delta = torch.as_tensor(problem.graph.delta, dtype=DTYPE)
    expected = torch.einsum("nij,nj->ni", selections.rotations, delta)
    surface = ((laplacian - expected) ** 2).sum()

    if len(selections.interior):
        gaps = ((selections.interior[:, None, :] - positions[None]) ** 2).sum(-1)
        pen = gaps.min(dim=1).values.sum()
    else:
        pen = torch.zeros((), dtype=DTYPE)

    total = config.w_spatial * spatial + config.w_surface * surface + config.w_pen * pen
    return {"L_spatial": spatial, "L_surface": surface, "L_pen": pen, "L_total": total}


def window_terms(entries, problems, selections, config):
    """Summed frame terms plus the joint smoothness term over a window."""
    sums = {"L_spatial": 0.0, "L_surface": 0.0, "L_pen": 0.0, "L_total": 0.0}
    for k, (problem, chosen) in enumerate(zip(problems, selections)):
        terms = frame_terms(problem, chosen, *_frame_entries(entries, k), config)
        for name, value in terms.items():
            sums[name] = sums[name] + diffcore.checked(f"frame {k} {name}", value)
    smooth = torch.zeros((), dtype=DTYPE)
    for k in range(1, len(problems)):
        step = entries[f"{k}.theta"] - entries[f"{k - 1}.theta"]
        smooth = smooth + (step * step).sum()
    sums["L_smooth"] = smooth
    sums["L_total"] = sums["L_total"] + config.w_smooth * smooth
    return sums


def loss_program(problems, config):
    """diffcore program over packed window states; inputs are the selections."""

    def program(entries, selections):
        return window_terms(entries, problems, selections, config)["L_total"]

    return program


def transfer_loss(state, problem, config):
    """Loss components of one frame at `state`, with selections taken at `state`."""
    chosen = select(problem, state)
    entries = pack_states([state])
    with torch.no_grad():
        terms = frame_terms(problem, chosen, *_frame_entries(entries, 0), config)
    values = {name: float(value) for name, value in terms.items()}
    for name, value in values.items():
        if not np.isfinite(value):
            raise NonFiniteError(name, f"{name} is not finite")
    return values


def pack_states(states):
    """ParamSet with entries `<frame>.rotvec`, `<frame>.translation`, `<frame>.theta`."""
    entries = {}
    for k, state in enumerate(states):
        for name in STATE_FIELDS:
            entries[f"{k}.{name}"] = getattr(state, name)
    return ParamSet(entries)


def unpack_states(params, count):
    return [
        AgentState(*(params[f"{k}.{name}"].numpy() for name in STATE_FIELDS))
        for k in range(count)
    ]


def _frame_entries(entries, k):
    return tuple(entries[f"{k}.{name}"] for name in STATE_FIELDS)


# --------------------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------------------


def _project(params, problems, config):
    """Clamp every frame's joints into the box around its source angles."""
    entries = dict(params.items())
    for k, problem in enumerate(problems):
        name = f"{k}.theta"
        entries[name] = torch.as_tensor(
            clamp_joints(entries[name].numpy(), problem.source_state.theta, config.gamma),
            dtype=DTYPE,
        )
    return ParamSet(entries)


def _clip_per_frame(grads, count, max_norm):
    clipped = {}
    for k in range(count):
        frame = ParamSet({f"{k}.{n}": grads[f"{k}.{n}"] for n in STATE_FIELDS})
        clipped.update(dict(diffcore.clip_grads(frame, max_norm).items()))
    return ParamSet(clipped)


def _objective(params, problems, config):
    """Frame-mean loss components with selections refreshed at `params`."""
    states = unpack_states(params, len(problems))
    selections = [select(p, s) for p, s in zip(problems, states)]
    with torch.no_grad():
        terms = window_terms(dict(params.items()), problems, selections, config)
    values = {name: float(value) / len(problems) for name, value in terms.items()}
    return values, selections


def _optimize(problems, inits, config, label=0):
    """Projected descent of one window of frames; returns (states, trace rows)."""
    count = len(problems)
    program = loss_program(problems, config)
    params = _project(pack_states(inits), problems, config)
    try:
        current, selections = _objective(params, problems, config)
    except NonFiniteError as exc:
        raise TransferDivergedError(0, unpack_states(params, count)) from exc
    rows = [dict(window=label, iteration=0, lr=0.0, step=0.0, accepted=True, **current)]

    for iteration in range(config.max_iterations):
        lr = diffcore.halving_schedule(config.lr, iteration, config.lr_halve_every)
        try:
            result = diffcore.eval_and_grad(program, params, selections)
        except NonFiniteError as exc:
            logger.error("non-finite transfer loss at iteration %d (%s)", iteration, exc.node)
            raise TransferDivergedError(iteration, unpack_states(params, count)) from exc
        grads = _clip_per_frame(result.grads, count, config.clip_norm)

        # One retry at half the step if the loss goes up.
        accepted, step = False, 0.0
        for trial in (lr, lr / 2):
            try:
                moved = ParamSet({n: v - trial * grads[n] for n, v in params.items()})
                candidate = _project(moved, problems, config)
                values, chosen = _objective(candidate, problems, config)
            except NonFiniteError as exc:
                raise TransferDivergedError(iteration, unpack_states(params, count)) from exc
            if values["L_total"] <= current["L_total"]:
                accepted, step = True, trial
                break

        change = 0.0
        if accepted:
            change = current["L_total"] - values["L_total"]
            params, selections, current = candidate, chosen, values
        rows.append(
            dict(window=label, iteration=iteration + 1, lr=lr, step=step, accepted=accepted, **current)
        )
        logger.debug(
            "iteration %d lr %.4g step %.4g loss %.6g", iteration + 1, lr, step, current["L_total"]
        )
        if abs(change) < config.tol:
            break

    logger.info(
        "window %d: %d iterations, loss %.6g -> %.6g",
        label,
        len(rows) - 1,
        rows[0]["L_total"],
        current["L_total"],
    )
    return unpack_states(params, count), rows


def transfer_single(problem, init=None, config=None):
    """Optimize one frame; returns the final state and a per-iteration loss trace."""
    config = config or TransferConfig()
    init = initial_state(problem) if init is None else init
    states, rows = _optimize([problem], [init], config)
    return states[0], pd.DataFrame(rows)


def window_starts(count, window, stride):
    """First frame of each window; the last window is clamped to end at the last frame."""
    assert window >= 1 and stride >= 1, "window and stride must be at least 1"
    if count <= window:
        return [0]
    starts = list(range(0, count - window + 1, stride))
    if starts[-1] + window < count:
        starts.append(count - window)
    return starts


def transfer_sequence(problems: List[TransferProblem], config=None, inits=None):
    """Optimize a sequence in overlapping windows; later windows overwrite earlier ones.

    Returns the per-frame states and the concatenated loss trace.
    """
    config = config or TransferConfig()
    if not problems:
        raise UsageError("cannot transfer an empty sequence")
    agent = problems[0].agent
    if any(p.agent.model_dump() != agent.model_dump() for p in problems):
        raise ShapeMismatchError("all frames must share one agent definition")
    inits = inits or [initial_state(p) for p in problems]
    window = min(config.window, len(problems))
    results, rows = [None] * len(problems), []
    for label, start in enumerate(window_starts(len(problems), window, config.stride)):
        frames = slice(start, start + window)
        states, trace = _optimize(problems[frames], inits[frames], config, label)
        results[frames] = states
        rows.extend(dict(row, first_frame=start) for row in trace)
    return results, pd.DataFrame(rows)


def joint_roughness(states):
    """Mean |theta_k - theta_{k-1}| over consecutive frames."""
    if len(states) < 2:
        return 0.0
    theta = np.stack([s.theta for s in states])
    return float(np.linalg.norm(np.diff(theta, axis=0), axis=1).mean())
