"""Analytic shapes, sampling, Delaunay graphs, rotations and nearest neighbours.

Shapes are unions of signed primitives (sphere, box, cylinder, capsule,
torus).  The union's SDF is the pointwise minimum of the primitives' SDFs,
which is exact outside the shape and a conservative pseudo-distance inside
overlapping primitives.  Shapes are centred and scaled so their bounding box
fits the unit box [-0.5, 0.5]^3.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.spatial import Delaunay, QhullError, cKDTree
from scipy.spatial.transform import Rotation

from interxfer.util import GeometryError, ShapeMismatchError

logger = logging.getLogger(__name__)

# Part labels carried by primitives and surface samples.
LABELS = ("part", "body", "handle", "seat", "back", "leg", "armrest")

# Number of size parameters per primitive kind.
SIZE_COUNTS = {"sphere": 1, "box": 3, "cylinder": 2, "capsule": 2, "torus": 2}

# Surface samples must lie this close to the zero level set.
SURFACE_TOL = 1e-4

# Step for finite-difference SDF gradients.
GRADIENT_STEP = 1e-6

# Rounds of rejection sampling before giving up on a shape.
MAX_SAMPLING_ROUNDS = 50

# Delaunay degeneracy handling.
JITTER = 1e-6
MAX_JITTER_RETRIES = 3
FLAT_VOLUME = 1e-14

# Relative slack when collecting references tied with the nearest one.
TIE_TOL = 1e-12

# Lattice around a target object is its bounding box scaled by this factor.
LATTICE_MARGIN = 1.2

PLY_FORMAT = "%.9g"


# --------------------------------------------------------------------------------------
# Shapes
# --------------------------------------------------------------------------------------


class Primitive(BaseModel):
    """One signed primitive in a shape.

    Sizes: sphere (radius,), box (half x, half y, half z), cylinder (radius,
    half height), capsule (radius, half length), torus (major radius, minor
    radius).  Cylinders, capsules and tori are built around the local z axis.
    """

    model_config = ConfigDict(extra="forbid")

    # Kind of primitive.
    kind: Literal["sphere", "box", "cylinder", "capsule", "torus"]

    # Centre in shape coordinates.
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    # Rows of the local-to-shape rotation matrix.
    rotation: Tuple[
        Tuple[float, float, float],
        Tuple[float, float, float],
        Tuple[float, float, float],
    ] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    # Size parameters (see class docstring).
    size: Tuple[float, ...]

    # Part label, one of `LABELS`.
    label: str = "part"

    @field_validator("label")
    @classmethod
    def _known_label(cls, value):
        if value not in LABELS:
            raise ValueError(f"unknown part label {value}")
        return value

    @model_validator(mode="after")
    def _check_size(self):
        if len(self.size) != SIZE_COUNTS[self.kind]:
            raise ValueError(f"{self.kind} needs {SIZE_COUNTS[self.kind]} sizes")
        if min(self.size) <= 0:
            raise ValueError(f"degenerate {self.kind}: sizes must be positive")
        return self

    def matrix(self):
        return np.array(self.rotation, dtype=float)

    def to_local(self, points):
        """Map shape-space points into the primitive's frame."""
        return (np.asarray(points, dtype=float) - np.array(self.center)) @ self.matrix()

    def sdf(self, points):
        """Exact signed distance of each point to this primitive."""
        return _primitive_sdf(self.kind, self.size, self.to_local(points))

    def half_extents(self):
        """Conservative half extents of the axis-aligned bounding box."""
        s = self.size
        if self.kind == "sphere":
            local = (s[0], s[0], s[0])
        elif self.kind == "box":
            local = s
        elif self.kind == "cylinder":
            local = (s[0], s[0], s[1])
        elif self.kind == "capsule":
            local = (s[0], s[0], s[1] + s[0])
        else:
            local = (s[0] + s[1], s[0] + s[1], s[1])
        return np.abs(self.matrix()) @ np.array(local, dtype=float)

    def area(self):
        s = self.size
        if self.kind == "sphere":
            return 4 * np.pi * s[0] ** 2
        if self.kind == "box":
            return 8 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2])
        if self.kind == "cylinder":
            return 4 * np.pi * s[0] * s[1] + 2 * np.pi * s[0] ** 2
        if self.kind == "capsule":
            return 4 * np.pi * s[0] * s[1] + 4 * np.pi * s[0] ** 2
        return 4 * np.pi**2 * s[0] * s[1]

    def transformed(self, rotation=None, scale=1.0, offset=None):
        """Primitive after x -> scale * rotation @ x + offset."""
        rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        offset = np.zeros(3) if offset is None else np.asarray(offset, dtype=float)
        center = scale * rotation @ np.array(self.center) + offset
        matrix = rotation @ self.matrix()
        return Primitive(
            kind=self.kind,
            center=tuple(float(c) for c in center),
            rotation=tuple(tuple(float(x) for x in row) for row in matrix),
            size=tuple(float(scale * x) for x in self.size),
            label=self.label,
        )


class AnalyticShape(BaseModel):
    """Union of primitives; the SDF is the pointwise minimum."""

    model_config = ConfigDict(extra="forbid")

    # Primitives in the union.
    primitives: List[Primitive]

    # Family and parameters the shape was generated from, if any.
    family: Optional[str] = None

    params: dict = {}

    seed: Optional[int] = None

    @field_validator("primitives")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("a shape needs at least one primitive")
        return value

    def primitive_sdfs(self, points):
        """Signed distance to each primitive, shape (primitives, points)."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.stack([p.sdf(points) for p in self.primitives])

    def sdf(self, points):
        return self.primitive_sdfs(points).min(axis=0)

    def labels_at(self, points):
        """Label index of the primitive closest to each point."""
        owner = self.primitive_sdfs(points).argmin(axis=0)
        codes = np.array([LABELS.index(p.label) for p in self.primitives])
        return codes[owner]

    def bounds(self):
        """Axis-aligned bounding box as (low, high)."""
        centers = np.array([p.center for p in self.primitives])
        halves = np.array([p.half_extents() for p in self.primitives])
        return (centers - halves).min(axis=0), (centers + halves).max(axis=0)

    def transformed(self, rotation=None, scale=1.0, offset=None):
        return self.model_copy(
            update={
                "primitives": [
                    p.transformed(rotation, scale, offset) for p in self.primitives
                ]
            }
        )

    def translated(self, offset):
        return self.transformed(offset=offset)


def sdf_analytic(shape, p):
    """Signed distance of one point (or an array of points) to `shape`."""
    values = shape.sdf(np.asarray(p, dtype=float).reshape(-1, 3))
    return float(values[0]) if np.ndim(p) == 1 else values


def sdf_gradient(shape, points, step=GRADIENT_STEP):
    """Central-difference gradient of the shape SDF."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    grads = np.empty_like(points)
    for axis in range(3):
        delta = np.zeros(3)
        delta[axis] = step
        grads[:, axis] = (shape.sdf(points + delta) - shape.sdf(points - delta)) / (
            2 * step
        )
    return grads


def _primitive_sdf(kind, size, q):
    """SDF of a primitive in its own frame."""
    if kind == "sphere":
        return np.linalg.norm(q, axis=1) - size[0]
    if kind == "box":
        return _box_sdf(q, np.array(size))
    if kind == "cylinder":
        radial = np.linalg.norm(q[:, :2], axis=1)
        flat = np.stack([radial, q[:, 2]], axis=1)
        return _box_sdf(flat, np.array(size))
    if kind == "capsule":
        closest = np.clip(q[:, 2], -size[1], size[1])
        offset = q.copy()
        offset[:, 2] -= closest
        return np.linalg.norm(offset, axis=1) - size[0]
    ring = np.linalg.norm(q[:, :2], axis=1) - size[0]
    return np.hypot(ring, q[:, 2]) - size[1]


def _box_sdf(q, half):
    """SDF of an axis-aligned box in any dimension."""
    d = np.abs(q) - half
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(d.max(axis=1), 0.0)
    return outside + inside


# --------------------------------------------------------------------------------------
# Shape families
# --------------------------------------------------------------------------------------


class MugParams(BaseModel):
    """Mug family parameters; unset values are drawn from the seed."""

    model_config = ConfigDict(extra="forbid")

    # Body cylinder radius.
    body_radius: Optional[float] = None

    # Body height.
    height: Optional[float] = None

    # Whether the mug has a handle.
    handle: Optional[bool] = None

    # Handle ring radius and tube radius.
    handle_radius: Optional[float] = None

    handle_thickness: Optional[float] = None


class ChairParams(BaseModel):
    """Chair family parameters; unset values are drawn from the seed."""

    model_config = ConfigDict(extra="forbid")

    seat_width: Optional[float] = None

    seat_depth: Optional[float] = None

    seat_thickness: Optional[float] = None

    leg_height: Optional[float] = None

    leg_thickness: Optional[float] = None

    back_height: Optional[float] = None

    back_thickness: Optional[float] = None

    # Whether the chair has armrests.
    armrests: Optional[bool] = None

    # Armrest bar height above the seat.
    armrest_height: Optional[float] = None


MUG_RANGES = {
    "body_radius": (0.25, 0.45),
    "height": (0.5, 1.0),
    "handle_radius": (0.12, 0.25),
    "handle_thickness": (0.03, 0.06),
}

CHAIR_RANGES = {
    "seat_width": (0.8, 1.2),
    "seat_depth": (0.8, 1.2),
    "seat_thickness": (0.06, 0.12),
    "leg_height": (0.6, 1.0),
    "leg_thickness": (0.05, 0.1),
    "back_height": (0.6, 1.2),
    "back_thickness": (0.05, 0.1),
    "armrest_height": (0.2, 0.35),
}

# Probability that a drawn mug has a handle or a drawn chair has armrests.
HANDLE_PROB = 1.0
ARMREST_PROB = 0.5


def generate_shape(family, params=None, seed=0):
    """Build a normalized shape of the given family.

    Parameters left unset are drawn uniformly from the family ranges using
    `seed`, so (family, params, seed) fully determines the result.
    """
    rng = np.random.default_rng(seed)
    if family == "mug":
        record = _fill(MugParams.model_validate(params or {}), MUG_RANGES, rng)
        if record.handle is None:
            record.handle = bool(rng.random() < HANDLE_PROB)
        primitives = _mug_primitives(record)
    elif family == "chair":
        record = _fill(ChairParams.model_validate(params or {}), CHAIR_RANGES, rng)
        if record.armrests is None:
            record.armrests = bool(rng.random() < ARMREST_PROB)
        primitives = _chair_primitives(record)
    else:
        raise GeometryError(f"unknown shape family {family}")
    shape = AnalyticShape(
        primitives=primitives, family=family, params=record.model_dump(), seed=seed
    )
    return normalize(shape)


def normalize(shape):
    """Centre the bounding box at the origin and scale its longest side to 1."""
    low, high = shape.bounds()
    extent = float((high - low).max())
    if extent <= 0:
        raise GeometryError("shape has zero extent")
    scale = 1.0 / extent
    return shape.transformed(scale=scale, offset=-scale * (low + high) / 2)


def _fill(record, ranges, rng):
    """Draw missing values and check supplied ones against the family ranges."""
    for name, (low, high) in ranges.items():
        value = getattr(record, name)
        if value is None:
            setattr(record, name, float(rng.uniform(low, high)))
        elif not (low <= value <= high):
            raise GeometryError(f"{name}={value} outside [{low}, {high}]")
    return record


def _mug_primitives(m):
    """Solid cylinder body plus an optional torus handle in the xz plane."""
    prims = [
        Primitive(kind="cylinder", size=(m.body_radius, m.height / 2), label="body")
    ]
    if m.handle:
        # Ring axis along y, ring centre just outside the body wall.
        upright = ((1.0, 0.0, 0.0), (0.0, 0.0, -1.0), (0.0, 1.0, 0.0))
        prims.append(
            Primitive(
                kind="torus",
                center=(m.body_radius + 0.5 * m.handle_radius, 0.0, 0.0),
                rotation=upright,
                size=(m.handle_radius, m.handle_thickness),
                label="handle",
            )
        )
    return prims


def _chair_primitives(c):
    """Seat, back and four legs, plus optional armrests with front posts."""
    seat_top = c.leg_height + c.seat_thickness
    half_w, half_d = c.seat_width / 2, c.seat_depth / 2
    lt = c.leg_thickness / 2
    prims = [
        Primitive(
            kind="box",
            center=(0.0, 0.0, c.leg_height + c.seat_thickness / 2),
            size=(half_w, half_d, c.seat_thickness / 2),
            label="seat",
        ),
        Primitive(
            kind="box",
            center=(0.0, -half_d + c.back_thickness / 2, seat_top + c.back_height / 2),
            size=(half_w, c.back_thickness / 2, c.back_height / 2),
            label="back",
        ),
    ]
    for sx in (-1, 1):
        for sy in (-1, 1):
            prims.append(
                Primitive(
                    kind="box",
                    center=(sx * (half_w - lt), sy * (half_d - lt), c.leg_height / 2),
                    size=(lt, lt, c.leg_height / 2),
                    label="leg",
                )
            )
    if c.armrests:
        at = c.back_thickness / 2
        for sx in (-1, 1):
            x = sx * (half_w - at)
            prims.append(
                Primitive(
                    kind="box",
                    center=(x, 0.0, seat_top + c.armrest_height),
                    size=(at, half_d, at),
                    label="armrest",
                )
            )
            prims.append(
                Primitive(
                    kind="box",
                    center=(x, half_d - at, seat_top + c.armrest_height / 2),
                    size=(at, at, c.armrest_height / 2),
                    label="armrest",
                )
            )
    return prims


def armrest_centroid(shape):
    """Centre of the first armrest bar, or None if the shape has none."""
    for p in shape.primitives:
        if (p.label == "armrest") and (p.size[1] > p.size[2]):
            return np.array(p.center)
    return None


# --------------------------------------------------------------------------------------
# Point clouds
# --------------------------------------------------------------------------------------


@dataclass
class PointCloud:
    """Surface samples with unit normals.

    `center` is the centroid subtracted when the cloud was built, so
    `points + center` are the original shape-space positions.
    """

    points: np.ndarray
    normals: np.ndarray
    labels: Optional[np.ndarray] = None
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if self.points.shape != self.normals.shape:
            raise ShapeMismatchError("points and normals differ in length")
        if (self.labels is not None) and (len(self.labels) != len(self.points)):
            raise ShapeMismatchError("points and labels differ in length")
        lengths = np.linalg.norm(self.normals, axis=1)
        if len(lengths) and np.abs(lengths - 1).max() > 1e-6:
            raise GeometryError("normals must have unit length")

    @classmethod
    def centered(cls, points, normals, labels=None):
        """Cloud with its centroid moved to the origin; normals unchanged."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        center = points.mean(axis=0)
        return cls(points - center, normals, labels, center)

    def __len__(self):
        return len(self.points)

    def bounds(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def rotated(self, rotation):
        """Cloud rotated about the origin: O -> O R^T."""
        rotation = np.asarray(rotation, dtype=float)
        return PointCloud(
            self.points @ rotation.T,
            self.normals @ rotation.T,
            self.labels,
            rotation @ self.center,
        )

    def scaled(self, factor):
        return PointCloud(
            self.points * factor, self.normals, self.labels, self.center * factor
        )

    def subset(self, indices):
        labels = None if self.labels is None else self.labels[indices]
        return PointCloud(self.points[indices], self.normals[indices], labels, self.center)


def sample_surface(shape, n, seed=0):
    """Sample `n` points uniformly on the shape surface with normals and labels.

    Candidates are drawn on each primitive in proportion to its area and kept
    when no other primitive swallows them.  The result is centred; the shape
    must be translated by `-cloud.center` to share the cloud's frame.
    """
    assert n >= 1, "need at least one sample"
    rng = np.random.default_rng(seed)
    areas = np.array([p.area() for p in shape.primitives])
    weights = areas / areas.sum()
    kept, owners = [], []
    total = 0
    for _ in range(MAX_SAMPLING_ROUNDS):
        batch = max(2 * (n - total), 64)
        counts = rng.multinomial(batch, weights)
        for index, (prim, count) in enumerate(zip(shape.primitives, counts)):
            if count == 0:
                continue
            local = _sample_primitive(prim, count, rng)
            world = local @ prim.matrix().T + np.array(prim.center)
            ok = np.abs(shape.sdf(world)) < SURFACE_TOL
            kept.append(world[ok])
            owners.append(np.full(int(ok.sum()), index))
            total += int(ok.sum())
        if total >= n:
            break
    else:
        raise GeometryError(f"could not sample {n} surface points")
    # Candidates are grouped by primitive; shuffle before keeping the first n.
    order = rng.permutation(total)[:n]
    points = np.concatenate(kept)[order]
    owner = np.concatenate(owners)[order]
    normals = sdf_gradient(shape, points)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    codes = np.array([LABELS.index(p.label) for p in shape.primitives])
    return PointCloud.centered(points, normals, codes[owner])


def _sample_primitive(prim, count, rng):
    """Uniform samples on a primitive's surface in its local frame."""
    s = prim.size
    if prim.kind == "sphere":
        return s[0] * _unit_vectors(count, rng)
    if prim.kind == "box":
        half = np.array(s)
        face_areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        axes = rng.choice(3, size=count, p=face_areas / face_areas.sum())
        points = rng.uniform(-1, 1, size=(count, 3)) * half
        signs = rng.choice([-1.0, 1.0], size=count)
        points[np.arange(count), axes] = signs * half[axes]
        return points
    if prim.kind == "cylinder":
        radius, half_h = s
        side = 4 * np.pi * radius * half_h
        caps = 2 * np.pi * radius**2
        on_side = rng.random(count) < side / (side + caps)
        angle = rng.uniform(0, 2 * np.pi, count)
        rho = np.where(on_side, radius, radius * np.sqrt(rng.random(count)))
        z = np.where(
            on_side,
            rng.uniform(-half_h, half_h, count),
            rng.choice([-half_h, half_h], size=count),
        )
        return np.stack([rho * np.cos(angle), rho * np.sin(angle), z], axis=1)
    if prim.kind == "capsule":
        radius, half_l = s
        return capsule_samples(radius, half_l, count, rng)
    major, minor = s
    u = rng.uniform(0, 2 * np.pi, count)
    v = np.empty(count)
    filled = 0
    while filled < count:
        trial = rng.uniform(0, 2 * np.pi, count)
        accept = rng.random(count) < (major + minor * np.cos(trial)) / (major + minor)
        take = trial[accept][: count - filled]
        v[filled : filled + len(take)] = take
        filled += len(take)
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def capsule_samples(radius, half_length, count, rng):
    """Uniform samples on a z-aligned capsule centred at the origin."""
    side = 4 * np.pi * radius * half_length
    ends = 4 * np.pi * radius**2
    on_side = rng.random(count) < side / (side + ends)
    angle = rng.uniform(0, 2 * np.pi, count)
    tube = np.stack(
        [
            radius * np.cos(angle),
            radius * np.sin(angle),
            rng.uniform(-half_length, half_length, count),
        ],
        axis=1,
    )
    dirs = _unit_vectors(count, rng)
    caps = radius * dirs
    caps[:, 2] += np.where(dirs[:, 2] >= 0, half_length, -half_length)
    return np.where(on_side[:, None], tube, caps)


def _unit_vectors(count, rng):
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_uniform(bbox, n, rng):
    """`n` points drawn uniformly in an axis-aligned box."""
    low, high = (np.asarray(b, dtype=float) for b in bbox)
    return rng.uniform(low, high, size=(n, 3))


def lattice_bounds(points, factor=LATTICE_MARGIN):
    """Bounding box of `points` scaled by `factor` about its centre."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    low, high = points.min(axis=0), points.max(axis=0)
    middle, half = (low + high) / 2, factor * (high - low) / 2
    return middle - half, middle + half


def sample_grid(bbox, resolution):
    """Regular lattice of resolution^3 points spanning `bbox` inclusively."""
    assert resolution >= 2, "grid resolution must be at least 2"
    low, high = (np.asarray(b, dtype=float) for b in bbox)
    if np.any(high - low <= 0):
        raise GeometryError(f"degenerate bounding box {low} to {high}")
    axes = [np.linspace(low[k], high[k], resolution) for k in range(3)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def grid_spacing(bbox, resolution):
    """Largest lattice step along any axis."""
    low, high = (np.asarray(b, dtype=float) for b in bbox)
    return float(((high - low) / (resolution - 1)).max())


# --------------------------------------------------------------------------------------
# Delaunay graph
# --------------------------------------------------------------------------------------


@dataclass
class EdgeSet:
    """Undirected edges (sorted index pairs) with Euclidean lengths."""

    pairs: np.ndarray
    lengths: np.ndarray
    tetrahedra: Optional[np.ndarray] = None

    def as_set(self):
        return {(int(i), int(j)) for i, j in self.pairs}

    def __len__(self):
        return len(self.pairs)


def delaunay_edges(points, seed=0):
    """Edges of the 3D Delaunay tetrahedralization of `points`.

    If Qhull fails or returns flat tetrahedra or drops points, the points are
    jittered by uniform noise of magnitude `JITTER` and the construction is
    retried up to `MAX_JITTER_RETRIES` times.  Lengths use the original points.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 4:
        raise GeometryError(f"need at least 4 points, got {len(points)}")
    rng = np.random.default_rng(seed)
    scale = max(float(np.ptp(points, axis=0).max()), 1.0)
    work = points
    for attempt in range(MAX_JITTER_RETRIES + 1):
        tets = _tetrahedralize(work, scale)
        if tets is not None:
            break
        logger.debug("degenerate Delaunay input, jitter retry %d", attempt + 1)
        work = points + rng.uniform(-JITTER, JITTER, size=points.shape) * scale
    else:
        raise GeometryError("Delaunay tetrahedralization failed after jitter retries")
    if work is not points:
        # Jitter can leave slivers that are flat in the original coordinates.
        corners = points[tets]
        volumes = np.abs(np.linalg.det(corners[:, 1:] - corners[:, :1])) / 6
        tets = tets[volumes >= FLAT_VOLUME * scale**3]
    corners = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    pairs = np.concatenate([tets[:, [a, b]] for a, b in corners])
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    lengths = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    return EdgeSet(pairs=pairs, lengths=lengths, tetrahedra=tets)


def _tetrahedralize(points, scale):
    """Qhull tetrahedra, or None if the result is degenerate."""
    try:
        tri = Delaunay(points)
    except QhullError:
        return None
    if len(tri.coplanar):
        return None
    tets = tri.simplices
    corners = points[tets]
    edges = corners[:, 1:] - corners[:, :1]
    volumes = np.abs(np.linalg.det(edges)) / 6
    if volumes.min() < FLAT_VOLUME * scale**3:
        return None
    return tets


# --------------------------------------------------------------------------------------
# Rotations
# --------------------------------------------------------------------------------------


def rotations_aligning(a, b):
    """Minimal rotations taking each unit vector a[k] to b[k], shape (n, 3, 3).

    Antiparallel pairs rotate by pi about the lowest-index coordinate axis
    orthogonal to a[k] (or, if none is, about the axis of a[k]'s smallest
    component made orthogonal to a[k]).
    """
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if a.shape != b.shape:
        raise ShapeMismatchError("direction arrays differ in length")
    for name, v in (("a", a), ("b", b)):
        if np.abs(np.linalg.norm(v, axis=1) - 1).max(initial=0) > 1e-6:
            raise GeometryError(f"{name} must contain unit vectors")
    cross = np.cross(a, b)
    sine = np.linalg.norm(cross, axis=1)
    cosine = np.einsum("ij,ij->i", a, b)
    angle = np.arctan2(sine, cosine)
    axis = np.zeros_like(a)
    turning = sine > 1e-9
    axis[turning] = cross[turning] / sine[turning, None]
    flipped = (~turning) & (cosine < 0)
    for k in np.flatnonzero(flipped):
        axis[k] = _orthogonal_axis(a[k])
        angle[k] = np.pi
    angle[(~turning) & (cosine >= 0)] = 0.0
    return Rotation.from_rotvec(axis * angle[:, None]).as_matrix()


def _orthogonal_axis(a):
    exact = np.flatnonzero(np.abs(a) < 1e-12)
    if len(exact):
        axis = np.zeros(3)
        axis[exact[0]] = 1.0
        return axis
    axis = np.zeros(3)
    axis[np.argmin(np.abs(a))] = 1.0
    axis -= axis.dot(a) * a
    return axis / np.linalg.norm(axis)


def rotation_aligning(a, b):
    """Minimal rotation R with R a = b."""
    return rotations_aligning(a, b)[0]


def random_rotation(seed):
    """Uniformly distributed rotation matrix."""
    return Rotation.random(random_state=seed).as_matrix()


def is_rotation(matrix, tol=1e-6):
    matrix = np.asarray(matrix, dtype=float)
    return bool(
        np.abs(matrix.T @ matrix - np.eye(3)).max() < tol
        and abs(np.linalg.det(matrix) - 1) < tol
    )


# --------------------------------------------------------------------------------------
# Nearest neighbours
# --------------------------------------------------------------------------------------


def nearest(queries, reference, return_distance=False):
    """Index of the closest reference point to each query; ties go to the lowest index."""
    reference = np.asarray(reference, dtype=float).reshape(-1, 3)
    if len(reference) == 0:
        raise GeometryError("nearest-neighbour reference set is empty")
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    # Duplicates collapse onto their first occurrence.
    unique, first = np.unique(reference, axis=0, return_index=True)
    tree = cKDTree(unique)
    dist, idx = tree.query(queries, k=1)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    chosen = first[idx]
    # Every reference within the nearest distance competes for the lowest index.
    radius = dist * (1 + TIE_TOL) + TIE_TOL
    for q, ball in enumerate(tree.query_ball_point(queries, radius, return_sorted=False)):
        if len(ball) > 1:
            chosen[q] = first[ball].min()
    if return_distance:
        return chosen, dist
    return chosen


# --------------------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------------------


def write_ply(path, points, normals, labels=None):
    """ASCII PLY with x,y,z,nx,ny,nz and an optional integer label per vertex."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        *[f"property float {name}" for name in ("x", "y", "z", "nx", "ny", "nz")],
    ]
    if labels is not None:
        header.append("property int label")
    header.append("end_header")
    with open(path, "w") as writer:
        writer.write("\n".join(header) + "\n")
        for k in range(len(points)):
            values = [PLY_FORMAT % v for v in (*points[k], *normals[k])]
            if labels is not None:
                values.append(str(int(labels[k])))
            writer.write(" ".join(values) + "\n")


def read_ply(path):
    """Read a cloud written by `write_ply` (not re-centred)."""
    with open(path, "r") as reader:
        lines = reader.read().splitlines()
    if not lines or lines[0] != "ply":
        raise GeometryError(f"{path} is not an ASCII PLY file")
    end = lines.index("end_header")
    count = next(int(l.split()[2]) for l in lines[:end] if l.startswith("element vertex"))
    has_labels = "property int label" in lines[:end]
    rows = np.array(
        [[float(v) for v in l.split()] for l in lines[end + 1 : end + 1 + count]]
    ).reshape(-1, 7 if has_labels else 6)
    labels = rows[:, 6].astype(int) if has_labels else None
    return PointCloud(rows[:, :3], rows[:, 3:6], labels)


def write_obj(path, points):
    """Vertex-only OBJ."""
    with open(path, "w") as writer:
        for p in np.asarray(points, dtype=float).reshape(-1, 3):
            writer.write("v " + " ".join(PLY_FORMAT % v for v in p) + "\n")


def read_obj(path):
    """Vertex positions from an OBJ file."""
    with open(path, "r") as reader:
        rows = [
            [float(v) for v in line.split()[1:4]]
            for line in reader
            if line.startswith("v ")
        ]
    return np.array(rows, dtype=float).reshape(-1, 3)
