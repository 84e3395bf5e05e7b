"""Articulated capsule agents.

An agent is a tree of links.  Each link has a fixed offset from its parent's
frame, an optional hinge about a unit axis in its own frame, and a capsule
lying along its local z axis.  The agent's surface is a fixed set of capsule
samples per link, so point order is the same for every pose.

Forward kinematics is written with torch so the transfer optimizer can
differentiate posed points with respect to the rigid transform and the joint
angles.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.spatial.transform import Rotation

from interxfer.diffcore import DTYPE
from interxfer.geomkit import capsule_samples, write_ply
from interxfer.util import DataFileError, ShapeMismatchError, read_json, write_json

logger = logging.getLogger(__name__)

# Default per-joint change allowed during transfer (radians).
GAMMA_DEFAULT = np.deg2rad(10.0)

# Below this squared angle, axis-angle maps use their Taylor expansions.
SMALL_ANGLE2 = 1e-12


class LinkDef(BaseModel):
    """One rigid link of an agent."""

    model_config = ConfigDict(extra="forbid")

    # Human-readable link name.
    name: str

    # Index of the parent link (-1 for the root).
    parent: int

    # Joint position in the parent frame (world frame of the rigid transform for the root).
    offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    # Fixed rotation from the parent frame, as an axis-angle vector.
    offset_rotvec: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    # Hinge axis in the link frame; None for a rigid attachment.
    hinge: Optional[Tuple[float, float, float]] = None

    # Capsule radius and half length (along the link's z axis).
    radius: float

    half_length: float

    # Capsule centre in the link frame.
    capsule_center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    # Number of surface samples on this link.
    samples: int

    @field_validator("hinge")
    @classmethod
    def _unit_hinge(cls, value):
        if (value is not None) and abs(np.linalg.norm(value) - 1) > 1e-6:
            raise ValueError("hinge axis must have unit length")
        return value

    @model_validator(mode="after")
    def _positive(self):
        if (self.radius <= 0) or (self.half_length <= 0) or (self.samples < 1):
            raise ValueError(f"link {self.name}: sizes and sample count must be positive")
        return self


class AgentDef(BaseModel):
    """A tree of capsule links rooted at link 0."""

    model_config = ConfigDict(extra="forbid")

    # Preset or file name.
    name: str

    links: List[LinkDef]

    # Seed for the per-link surface samples.
    seed: int = 0

    @model_validator(mode="after")
    def _tree(self):
        if not self.links or self.links[0].parent != -1:
            raise ValueError("link 0 must be the root")
        for index, link in enumerate(self.links[1:], start=1):
            if not (0 <= link.parent < index):
                raise ValueError(f"link {link.name}: parent must precede it")
        return self

    @property
    def n_joints(self):
        return sum(link.hinge is not None for link in self.links)

    @cached_property
    def joint_of_link(self):
        """Joint index per link, or -1 for rigid links."""
        joints, count = [], 0
        for link in self.links:
            joints.append(count if link.hinge is not None else -1)
            count += link.hinge is not None
        return joints

    @cached_property
    def local_samples(self):
        """Link-frame surface points, normals and owning link, generated once."""
        rng = np.random.default_rng(self.seed)
        points, normals, owner = [], [], []
        for index, link in enumerate(self.links):
            local = capsule_samples(link.radius, link.half_length, link.samples, rng)
            along = np.clip(local[:, 2], -link.half_length, link.half_length)
            radial = local - np.stack([np.zeros_like(along)] * 2 + [along], axis=1)
            normals.append(radial / np.linalg.norm(radial, axis=1, keepdims=True))
            points.append(local + np.array(link.capsule_center))
            owner.append(np.full(link.samples, index))
        return np.concatenate(points), np.concatenate(normals), np.concatenate(owner)

    @property
    def n_points(self):
        return sum(link.samples for link in self.links)


@dataclass
class AgentState:
    """Rigid transform (axis-angle rotation, translation) and joint angles."""

    rotvec: np.ndarray
    translation: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.rotvec = np.asarray(self.rotvec, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)

    @classmethod
    def zero(cls, agent):
        return cls(np.zeros(3), np.zeros(3), np.zeros(agent.n_joints))

    def copy(self):
        return AgentState(self.rotvec.copy(), self.translation.copy(), self.theta.copy())

    def to_dict(self):
        return {
            "rotvec": self.rotvec.tolist(),
            "translation": self.translation.tolist(),
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["rotvec"], data["translation"], data["theta"])


@dataclass
class AgentPoints:
    """Posed surface points, their normals and owning links."""

    positions: np.ndarray
    normals: np.ndarray
    links: np.ndarray


# --------------------------------------------------------------------------------------
# Kinematics
# --------------------------------------------------------------------------------------


def check_state(agent, state):
    if len(state.theta) != agent.n_joints:
        raise ShapeMismatchError(
            f"agent {agent.name} has {agent.n_joints} joints, state has {len(state.theta)}"
        )
    if not (
        np.isfinite(state.rotvec).all()
        and np.isfinite(state.translation).all()
        and np.isfinite(state.theta).all()
    ):
        raise ShapeMismatchError("agent state has non-finite entries")


def _skew(v):
    zero = torch.zeros((), dtype=v.dtype)
    return torch.stack(
        [
            torch.stack([zero, -v[2], v[1]]),
            torch.stack([v[2], zero, -v[0]]),
            torch.stack([-v[1], v[0], zero]),
        ]
    )


def rotvec_matrix(rotvec):
    """Rodrigues map of an axis-angle tensor, differentiable at zero."""
    angle2 = (rotvec * rotvec).sum()
    small = angle2 < SMALL_ANGLE2
    safe2 = torch.where(small, torch.ones_like(angle2), angle2)
    angle = torch.sqrt(safe2)
    a = torch.where(small, 1 - angle2 / 6, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - angle2 / 24, (1 - torch.cos(angle)) / safe2)
    k = _skew(rotvec)
    return torch.eye(3, dtype=rotvec.dtype) + a * k + b * (k @ k)


def hinge_matrix(axis, angle):
    """Rotation by `angle` about a fixed unit axis."""
    k = _skew(torch.as_tensor(axis, dtype=DTYPE))
    return torch.eye(3, dtype=DTYPE) + torch.sin(angle) * k + (1 - torch.cos(angle)) * (k @ k)


def link_frames(agent, rotvec, translation, theta):
    """World rotation and origin of every link, as tensors."""
    frames = []
    root_rotation = rotvec_matrix(rotvec)
    for index, link in enumerate(agent.links):
        offset_rotation = torch.as_tensor(
            Rotation.from_rotvec(link.offset_rotvec).as_matrix(), dtype=DTYPE
        )
        offset = torch.as_tensor(link.offset, dtype=DTYPE)
        if link.parent < 0:
            parent_rotation, parent_origin = root_rotation, translation
        else:
            parent_rotation, parent_origin = frames[link.parent]
        rotation = parent_rotation @ offset_rotation
        origin = parent_rotation @ offset + parent_origin
        joint = agent.joint_of_link[index]
        if joint >= 0:
            rotation = rotation @ hinge_matrix(link.hinge, theta[joint])
        frames.append((rotation, origin))
    return frames


def posed_tensors(agent, rotvec, translation, theta):
    """Posed surface positions and normals as differentiable tensors."""
    points, normals, owner = agent.local_samples
    frames = link_frames(agent, rotvec, translation, theta)
    positions, rotated = [], []
    for index, (rotation, origin) in enumerate(frames):
        mask = owner == index
        local = torch.as_tensor(points[mask], dtype=DTYPE)
        local_normals = torch.as_tensor(normals[mask], dtype=DTYPE)
        positions.append(local @ rotation.T + origin)
        rotated.append(local_normals @ rotation.T)
    return torch.cat(positions), torch.cat(rotated)


def state_tensors(state):
    return (
        torch.as_tensor(state.rotvec, dtype=DTYPE),
        torch.as_tensor(state.translation, dtype=DTYPE),
        torch.as_tensor(state.theta, dtype=DTYPE),
    )


def forward_kinematics(agent, state):
    """Posed agent surface for `state`."""
    check_state(agent, state)
    with torch.no_grad():
        positions, normals = posed_tensors(agent, *state_tensors(state))
    return AgentPoints(positions.numpy(), normals.numpy(), agent.local_samples[2].copy())


def capsule_segments(agent, state):
    """World endpoints of every link's capsule axis, shape (links, 2, 3)."""
    check_state(agent, state)
    with torch.no_grad():
        frames = link_frames(agent, *state_tensors(state))
    segments = []
    for link, (rotation, origin) in zip(agent.links, frames):
        rotation, origin = rotation.numpy(), origin.numpy()
        center = rotation @ np.array(link.capsule_center) + origin
        half = link.half_length * rotation[:, 2]
        segments.append([center - half, center + half])
    return np.array(segments)


def agent_sdf(agent, state, p):
    """Signed distance to the union of the agent's capsules (min over links)."""
    points = np.asarray(p, dtype=float).reshape(-1, 3)
    segments = capsule_segments(agent, state)
    radii = np.array([link.radius for link in agent.links])
    start, end = segments[:, 0], segments[:, 1]
    axis = end - start
    rel = points[:, None, :] - start[None, :, :]
    t = np.clip((rel * axis).sum(-1) / (axis * axis).sum(-1), 0.0, 1.0)
    closest = start[None] + t[..., None] * axis[None]
    dist = np.linalg.norm(points[:, None, :] - closest, axis=-1) - radii[None]
    values = dist.min(axis=1)
    return float(values[0]) if np.ndim(p) == 1 else values


def agent_bounds(agent, state):
    """Axis-aligned bounding box of the posed capsules."""
    segments = capsule_segments(agent, state)
    radii = np.array([link.radius for link in agent.links])[:, None]
    low = np.minimum(segments[:, 0], segments[:, 1]) - radii
    high = np.maximum(segments[:, 0], segments[:, 1]) + radii
    return low.min(axis=0), high.max(axis=0)


def clamp_joints(theta, theta_src, gamma=GAMMA_DEFAULT):
    """Project joint angles into the box theta_src +/- gamma."""
    theta = np.asarray(theta, dtype=float)
    theta_src = np.asarray(theta_src, dtype=float)
    if theta.shape != theta_src.shape:
        raise ShapeMismatchError("joint arrays differ in length")
    assert gamma >= 0, "joint limit must be non-negative"
    return np.clip(theta, theta_src - gamma, theta_src + gamma)


# --------------------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------------------


def gripper():
    """Palm with three two-segment fingers (6 joints, 600 points)."""
    # Fingers leave the palm along +x and curl about the palm's vertical axis.
    sideways = (0.0, np.pi / 2, 0.0)
    links = [
        LinkDef(name="palm", parent=-1, radius=0.07, half_length=0.15, samples=150)
    ]
    for k, height in enumerate((-0.12, 0.0, 0.12)):
        links.append(
            LinkDef(
                name=f"finger{k}_proximal",
                parent=0,
                offset=(0.06, 0.0, height),
                offset_rotvec=sideways,
                hinge=(-1.0, 0.0, 0.0),
                radius=0.03,
                half_length=0.08,
                capsule_center=(0.0, 0.0, 0.08),
                samples=75,
            )
        )
        links.append(
            LinkDef(
                name=f"finger{k}_distal",
                parent=len(links) - 1,
                offset=(0.0, 0.0, 0.16),
                hinge=(-1.0, 0.0, 0.0),
                radius=0.028,
                half_length=0.07,
                capsule_center=(0.0, 0.0, 0.07),
                samples=75,
            )
        )
    return AgentDef(name="gripper", links=links)


def sitter():
    """Torso with two legs and two arms, two hinges each (8 joints, 900 points)."""
    links = [
        LinkDef(name="torso", parent=-1, radius=0.1, half_length=0.2, samples=180)
    ]
    limbs = (
        ("leg", (0.08, 0.0, -0.2), 0.06, 0.2),
        ("arm", (0.15, 0.0, 0.15), 0.045, 0.13),
    )
    for kind, (x, y, z), radius, half in limbs:
        for side, sign in (("left", 1.0), ("right", -1.0)):
            links.append(
                LinkDef(
                    name=f"{side}_{kind}_upper",
                    parent=0,
                    offset=(sign * x, y, z),
                    hinge=(1.0, 0.0, 0.0),
                    radius=radius,
                    half_length=half,
                    capsule_center=(0.0, 0.0, -half),
                    samples=90,
                )
            )
            links.append(
                LinkDef(
                    name=f"{side}_{kind}_lower",
                    parent=len(links) - 1,
                    offset=(0.0, 0.0, -2 * half),
                    hinge=(1.0, 0.0, 0.0),
                    radius=0.9 * radius,
                    half_length=half,
                    capsule_center=(0.0, 0.0, -half),
                    samples=90,
                )
            )
    return AgentDef(name="sitter", links=links)


PRESETS = {"gripper": gripper, "sitter": sitter}


def load_agent(name_or_path):
    """Bundled preset by name, or an agent definition from a JSON file."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    return AgentDef.model_validate(read_json(name_or_path))


def save_agent(path, agent):
    write_json(path, agent.model_dump())


# --------------------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------------------


def write_poses(path, agent_name, states, extra=None):
    """Save a sequence of poses as JSON."""
    data = {"agent": agent_name, "frames": [s.to_dict() for s in states]}
    data.update(extra or {})
    write_json(path, data)


def read_poses(path):
    """Load a pose file: returns (agent name, states, full document)."""
    data = read_json(path)
    if not isinstance(data, dict) or "agent" not in data or "frames" not in data:
        raise DataFileError(f"{path} is not a pose file (needs \"agent\" and \"frames\")")
    if not data["frames"]:
        raise DataFileError(f"{path} holds no frames")
    try:
        frames = [AgentState.from_dict(f) for f in data["frames"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFileError(f"{path} has a malformed frame: {exc!r}") from exc
    return data["agent"], frames, data


def write_posed_agent(path, agent, state):
    """Posed surface points as PLY, labelled by link."""
    posed = forward_kinematics(agent, state)
    write_ply(path, posed.positions, posed.normals, posed.links)
