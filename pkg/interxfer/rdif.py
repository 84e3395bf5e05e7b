"""Rotated and deformed implicit field.

The field for one object is

    s(p) = T(R p + v) + ds,    (v, ds) = D(R p; code)

where the encoder maps the object's surface samples to rotation-equivariant
vector features F (K rows of 3D vectors), R is read off two feature rows by
Gram-Schmidt, and the shape code is F R^T, which does not change when the
input cloud is rotated.  D is a five-layer perceptron whose weights are
predicted from the code by a hypernetwork; T is a five-layer perceptron shared
by every shape of a category.

Parameters live in a `diffcore.ParamSet`; training evaluates the network
functionally over those parameters so the same reverse-mode and Adam code
serve training and pose optimization.
"""

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.spatial.transform import Rotation

from interxfer import diffcore
from interxfer.diffcore import DTYPE, OptimState, ParamSet, checked
from interxfer.geomkit import sample_surface, sample_uniform
from interxfer.util import (
    ArchitectureMismatchError,
    CheckpointCorruptError,
    CheckpointVersionError,
    GeometryError,
    NonFiniteError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

# Checkpoint layout: magic, version, descriptor length, descriptor, arrays, digest.
MAGIC = b"RDIFCKPT"
VERSION = 1
DIGEST_BYTES = 32

# Guard for vector-neuron projections and rotation extraction.
VN_EPS = 1e-12
DEGENERATE_NORM = 1e-8

# Uniform free-space samples are drawn in this cube around the centred object.
FREE_SPACE_HALF = 0.6

# Query points per forward pass at inference time.
CHUNK = 16384


class RdifArch(BaseModel):
    """Architecture descriptor, fixed when the parameters are created."""

    model_config = ConfigDict(extra="forbid")

    # Output channels of the three vector-neuron blocks before the head.
    encoder_widths: Tuple[int, int, int] = (64, 64, 64)

    # Feature rows K produced by the encoder head (code length 3K).
    code_rows: int = 64

    # Neighbours used for the encoder's local-offset input channel.
    neighbors: int = 16

    # Hidden width of each per-layer hypernetwork.
    hyper_hidden: int = 128

    # Width and layer count of the deformation decoder and the template.
    decoder_width: int = 128

    template_width: int = 128

    layers: int = 5

    # Sharpness of the softplus nonlinearity.
    softplus_beta: float = 100.0

    # Negative slope of the vector-neuron leaky rectifier.
    vn_slope: float = 0.2

    # Radius of the sphere the template starts as.
    init_radius: float = 0.3

    @field_validator("code_rows")
    @classmethod
    def _two_rows(cls, value):
        if value < 2:
            raise ValueError("rotation extraction needs at least two feature rows")
        return value


class TrainConfig(BaseModel):
    """Training schedule, loss weights and sampling budget."""

    model_config = ConfigDict(extra="forbid")

    arch: RdifArch = RdifArch()

    epochs: int = 500

    # Shapes per optimizer step.
    batch_shapes: int = 4

    # Samples prepared per shape.
    surface_samples: int = 2048

    free_samples: int = 2048

    # Fraction of free samples drawn near the surface instead of uniformly.
    near_surface_fraction: float = 0.0

    near_surface_sigma: float = 0.02

    # Points fed to the encoder and queried per shape per step.
    encoder_points: int = 1024

    surface_queries: int = 512

    free_queries: int = 512

    # Adam learning rate, halved every `lr_halve_every` epochs.
    lr: float = 1e-4

    lr_halve_every: int = 100

    # Weights of the normal, smoothness, correction and code terms.
    w_normal: float = 1e2

    w_smooth: float = 5.0

    w_correction: float = 1e2

    w_reg: float = 1e6

    # Weights of SDF regression, normal agreement, Eikonal and off-surface terms.
    sdf_weights: Tuple[float, float, float, float] = (3e3, 1e2, 5e1, 5e2)

    # Sharpness of the off-surface penalty.
    delta: float = 100.0

    # Augmentation.
    scale_range: Tuple[float, float] = (0.75, 1.25)

    rotate: bool = True

    seed: int = 0

    @field_validator("epochs", "batch_shapes", "lr_halve_every")
    @classmethod
    def _at_least_one(cls, value):
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @field_validator("w_normal", "w_smooth", "w_correction", "w_reg", "delta", "lr")
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("weights must be non-negative")
        return value

    @field_validator("sdf_weights")
    @classmethod
    def _non_negative_all(cls, value):
        if min(value) < 0:
            raise ValueError("weights must be non-negative")
        return value


# --------------------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------------------


class VNLinear(nn.Module):
    """Channel mixing of vector features; commutes with rotations."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, dtype=DTYPE))

    def forward(self, x):
        # x: (..., channels, 3)
        return torch.einsum("oc,...cd->...od", self.weight, x)


class VNLeakyReLU(nn.Module):
    """Leaky rectifier on the half-space defined by a learned direction."""

    def __init__(self, channels, slope):
        super().__init__()
        self.direction = VNLinear(channels, channels)
        self.slope = slope

    def forward(self, x):
        k = self.direction(x)
        dot = (x * k).sum(-1, keepdim=True)
        flipped = x - dot / ((k * k).sum(-1, keepdim=True) + VN_EPS) * k
        rectified = torch.where(dot >= 0, x, flipped)
        return self.slope * x + (1 - self.slope) * rectified


class VNBlock(nn.Module):
    def __init__(self, c_in, c_out, slope):
        super().__init__()
        self.linear = VNLinear(c_in, c_out)
        self.act = VNLeakyReLU(c_out, slope)

    def forward(self, x):
        return self.act(self.linear(x))


class Encoder(nn.Module):
    """Vector-neuron point encoder producing K equivariant feature rows."""

    def __init__(self, arch):
        super().__init__()
        w1, w2, w3 = arch.encoder_widths
        self.neighbors = arch.neighbors
        self.block1 = VNBlock(2, w1, arch.vn_slope)
        self.block2 = VNBlock(w1, w2, arch.vn_slope)
        self.block3 = VNBlock(2 * w2, w3, arch.vn_slope)
        self.head = VNLinear(w3, arch.code_rows)

    def forward(self, cloud):
        # cloud: (B, N, 3) -> features (B, K, 3)
        x = torch.stack([cloud, cloud - _neighbor_mean(cloud, self.neighbors)], dim=2)
        x = self.block2(self.block1(x))
        pooled = x.mean(dim=1, keepdim=True).expand_as(x)
        x = self.block3(torch.cat([x, pooled], dim=2))
        return self.head(x.mean(dim=1))


def _neighbor_mean(cloud, k):
    """Mean of each point's k nearest neighbours (itself excluded)."""
    k = min(k, cloud.shape[1] - 1)
    with torch.no_grad():
        dist = torch.cdist(cloud, cloud)
        idx = dist.topk(k + 1, dim=-1, largest=False).indices[..., 1:]
    batch = torch.arange(cloud.shape[0]).view(-1, 1, 1)
    return cloud[batch, idx].mean(dim=2)


class HyperLayer(nn.Module):
    """Predicts one target layer's weight and bias from the shape code.

    The output bias is a conventionally initialized target layer, so at the
    start every shape shares one decoder and the code only nudges it.
    """

    def __init__(self, code_dim, hidden, fan_in, fan_out):
        super().__init__()
        self.fan_in, self.fan_out = fan_in, fan_out
        self.hidden = nn.Linear(code_dim, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, fan_out * (fan_in + 1), dtype=DTYPE)

    def forward(self, code):
        flat = self.out(F.relu(self.hidden(code)))
        flat = flat.view(-1, self.fan_out, self.fan_in + 1)
        return flat[..., :-1], flat[..., -1]


class DeformDecoder(nn.Module):
    """Hypernetwork-conditioned perceptron mapping R p to (v, ds)."""

    def __init__(self, arch):
        super().__init__()
        code_dim = 3 * arch.code_rows
        dims = [3] + [arch.decoder_width] * (arch.layers - 1) + [4]
        self.beta = arch.softplus_beta
        self.hyper = nn.ModuleList(
            HyperLayer(code_dim, arch.hyper_hidden, dims[i], dims[i + 1])
            for i in range(len(dims) - 1)
        )

    def forward(self, points, code):
        x = points
        for index, hyper in enumerate(self.hyper):
            weight, bias = hyper(code)
            x = torch.baddbmm(bias.unsqueeze(1), x, weight.transpose(1, 2))
            if index < len(self.hyper) - 1:
                x = F.softplus(x, beta=self.beta)
        return x[..., :3], x[..., 3]


class TemplateField(nn.Module):
    """Category template SDF, geometrically initialized to a sphere."""

    def __init__(self, arch):
        super().__init__()
        dims = [3] + [arch.template_width] * (arch.layers - 1) + [1]
        self.beta = arch.softplus_beta
        self.linears = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=DTYPE) for i in range(len(dims) - 1)
        )

    def forward(self, points):
        x = points
        for index, linear in enumerate(self.linears):
            x = linear(x)
            if index < len(self.linears) - 1:
                x = F.softplus(x, beta=self.beta)
        return x[..., 0]


class RdifNetwork(nn.Module):
    """Encoder, deformation decoder and template field."""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = DeformDecoder(arch)
        self.template = TemplateField(arch)

    def forward(self, cloud, queries):
        """Code, rotation and field terms for `queries` (B, P, 3) of `cloud` (B, N, 3)."""
        features = self.encoder(cloud)
        rotation, _ = gram_schmidt(features)
        alpha = features @ rotation.transpose(1, 2)
        out = self.field(queries, alpha.flatten(1), rotation)
        out.update(features=features, alpha=alpha, rotation=rotation)
        return out

    def field(self, queries, code, rotation):
        p_bar = queries @ rotation.transpose(1, 2)
        v, ds = self.decoder(p_bar, code)
        p_tilde = p_bar + v
        template = self.template(p_tilde)
        return dict(p_bar=p_bar, v=v, ds=ds, p_tilde=p_tilde, template=template, s=template + ds)


def gram_schmidt(features):
    """Rotation (B, 3, 3) whose rows orthonormalize feature rows 0 and 1.

    Degenerate inputs (a near-zero first row, or parallel rows) fall back to
    the identity; the second return value flags them.
    """
    first, second = features[:, 0], features[:, 1]
    n1 = first.norm(dim=-1, keepdim=True)
    e1 = first / n1.clamp_min(DEGENERATE_NORM)
    ortho = second - (second * e1).sum(-1, keepdim=True) * e1
    n2 = ortho.norm(dim=-1, keepdim=True)
    e2 = ortho / n2.clamp_min(DEGENERATE_NORM)
    e3 = torch.cross(e1, e2, dim=-1)
    rotation = torch.stack([e1, e2, e3], dim=1)
    degenerate = ((n1 < DEGENERATE_NORM) | (n2 < DEGENERATE_NORM)).reshape(-1)
    eye = torch.eye(3, dtype=features.dtype).expand_as(rotation)
    rotation = torch.where(degenerate.view(-1, 1, 1), eye, rotation)
    return rotation, degenerate


def _initialize(net, arch, generator):
    """Deterministic initialization of every parameter."""
    for module in net.modules():
        if isinstance(module, VNLinear):
            fan_in = module.weight.shape[1]
            nn.init.uniform_(module.weight, -1 / np.sqrt(fan_in), 1 / np.sqrt(fan_in), generator=generator)
    for hyper in net.decoder.hyper:
        bound = 1 / np.sqrt(hyper.hidden.in_features)
        nn.init.uniform_(hyper.hidden.weight, -bound, bound, generator=generator)
        nn.init.zeros_(hyper.hidden.bias)
        nn.init.normal_(hyper.out.weight, 0.0, 1e-3 / np.sqrt(hyper.hidden.out_features), generator=generator)
        target = torch.empty(hyper.fan_out, hyper.fan_in + 1, dtype=DTYPE)
        nn.init.normal_(target[:, :-1], 0.0, np.sqrt(2 / hyper.fan_in), generator=generator)
        target[:, -1] = 0.0
        with torch.no_grad():
            hyper.out.bias.copy_(target.reshape(-1))
    # Output head: small deformation, zero correction.
    last = net.decoder.hyper[-1]
    with torch.no_grad():
        rows = last.out.weight.view(last.fan_out, last.fan_in + 1, -1)
        bias = last.out.bias.view(last.fan_out, last.fan_in + 1)
        bias[:3] *= 1e-2
        rows[3] = 0.0
        bias[3] = 0.0
    linears = net.template.linears
    for index, linear in enumerate(linears):
        if index == len(linears) - 1:
            nn.init.normal_(linear.weight, np.sqrt(np.pi) / np.sqrt(linear.in_features), 1e-5, generator=generator)
            nn.init.constant_(linear.bias, -arch.init_radius)
        else:
            nn.init.normal_(linear.weight, 0.0, np.sqrt(2) / np.sqrt(linear.out_features), generator=generator)
            nn.init.zeros_(linear.bias)


@dataclass
class RdifParams:
    """Architecture descriptor plus all network parameters."""

    arch: RdifArch
    weights: ParamSet
    _network: RdifNetwork = field(default=None, repr=False, compare=False)

    @classmethod
    def initial(cls, arch, seed=0):
        generator = torch.Generator().manual_seed(seed)
        net = RdifNetwork(arch).to(DTYPE)
        _initialize(net, arch, generator)
        weights = ParamSet({name: p.detach() for name, p in net.named_parameters()})
        return cls(arch=arch, weights=weights)

    def network(self):
        """Module loaded with these weights, for inference."""
        if self._network is None:
            net = RdifNetwork(self.arch).to(DTYPE)
            net.load_state_dict({name: t for name, t in self.weights.items()})
            net.eval()
            self._network = net
        return self._network


# --------------------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------------------


@dataclass
class ShapeCode:
    """Rotation-invariant code (K x 3) and alignment rotation of one object."""

    alpha: np.ndarray
    rotation: np.ndarray
    degenerate: bool = False

    def code_tensor(self):
        return torch.as_tensor(self.alpha.reshape(1, -1), dtype=DTYPE)

    def rotation_tensor(self):
        return torch.as_tensor(self.rotation[None], dtype=DTYPE)


@dataclass
class FieldEval:
    """Terms of s = T(R p + v) + ds for a batch of query points."""

    p_bar: np.ndarray
    v: np.ndarray
    delta_s: np.ndarray
    s: np.ndarray

    @property
    def p_tilde(self):
        return self.p_bar + self.v


def equivariant_features(cloud, params):
    """Encoder features F (K x 3) of a cloud of points."""
    points = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if len(points) < 3:
        raise GeometryError(f"encoder needs at least 3 points, got {len(points)}")
    with torch.no_grad():
        features = params.network().encoder(torch.as_tensor(points[None], dtype=DTYPE))
    return checked("encoder features", features)[0].numpy()


def extract_rotation(features):
    """Rotation from the first two feature rows, and a degeneracy flag."""
    features = torch.as_tensor(np.asarray(features, dtype=float)[None], dtype=DTYPE)
    if features.shape[1] < 2:
        raise GeometryError("rotation extraction needs at least two feature rows")
    rotation, degenerate = gram_schmidt(features)
    if bool(degenerate[0]):
        logger.warning("degenerate encoder features, using identity rotation")
    return rotation[0].numpy(), bool(degenerate[0])


def encode(cloud, params):
    """Shape code and alignment rotation of a surface cloud."""
    features = equivariant_features(cloud, params)
    rotation, degenerate = extract_rotation(features)
    return ShapeCode(alpha=features @ rotation.T, rotation=rotation, degenerate=degenerate)


def _field(points, code, params):
    """Field terms for many query points, in chunks."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    net = params.network()
    parts = []
    with torch.no_grad():
        for start in range(0, len(points), CHUNK):
            chunk = torch.as_tensor(points[None, start : start + CHUNK], dtype=DTYPE)
            out = net.field(chunk, code.code_tensor(), code.rotation_tensor())
            parts.append({k: checked(f"field:{k}", t)[0].numpy() for k, t in out.items()})
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def deform(p_bar, code, params):
    """Deformation v and correction ds at canonical points p_bar."""
    p_bar = np.asarray(p_bar, dtype=float).reshape(-1, 3)
    net = params.network()
    with torch.no_grad():
        v, ds = net.decoder(torch.as_tensor(p_bar[None], dtype=DTYPE), code.code_tensor())
    checked("deformation", v)
    checked("correction", ds)
    return v[0].numpy(), ds[0].numpy()


def sdf_query(points, code, params):
    """p_bar, v, ds and s for query points in the object's frame."""
    out = _field(points, code, params)
    return FieldEval(p_bar=out["p_bar"], v=out["v"], delta_s=out["ds"], s=out["s"])


def template_points(points, code, params):
    """Images R p + v of query points in the template field."""
    return _field(points, code, params)["p_tilde"]


def template_sdf(points, params):
    """T evaluated directly at template-space points."""
    with torch.no_grad():
        values = params.network().template(torch.as_tensor(np.asarray(points, dtype=float), dtype=DTYPE))
    return values.numpy()


# --------------------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------------------


@dataclass
class TrainBatch:
    """Samples for a batch of shapes, all in each shape's (augmented) frame."""

    cloud: torch.Tensor
    surface: torch.Tensor
    normals: torch.Tensor
    free: torch.Tensor
    free_sdf: torch.Tensor


@dataclass
class ShapeSamples:
    """Fixed per-shape training samples."""

    surface: np.ndarray
    normals: np.ndarray
    free: np.ndarray
    free_sdf: np.ndarray


def prepare_samples(shape, config, seed):
    """Surface samples with normals and free-space points with ground-truth SDF.

    Everything is expressed in the frame of the centred surface cloud.
    """
    rng = np.random.default_rng(seed)
    cloud = sample_surface(shape, config.surface_samples, seed)
    centred = shape.translated(-cloud.center)
    near = int(round(config.near_surface_fraction * config.free_samples))
    box = (np.full(3, -FREE_SPACE_HALF), np.full(3, FREE_SPACE_HALF))
    free = sample_uniform(box, config.free_samples - near, rng)
    if near:
        picks = rng.integers(0, len(cloud), near)
        jitter = rng.normal(0.0, config.near_surface_sigma, size=(near, 3))
        free = np.concatenate([free, cloud.points[picks] + jitter])
    return ShapeSamples(cloud.points, cloud.normals, free, centred.sdf(free))


def make_batch(samples, config, rng, augment=True):
    """Subsample and (optionally) randomly rotate and scale a group of shapes."""
    parts = {k: [] for k in ("cloud", "surface", "normals", "free", "free_sdf")}
    for item in samples:
        rotation, scale = np.eye(3), 1.0
        if augment:
            if config.rotate:
                rotation = Rotation.random(random_state=rng).as_matrix()
            scale = rng.uniform(*config.scale_range)
        enc = rng.choice(len(item.surface), min(config.encoder_points, len(item.surface)), replace=False)
        srf = rng.choice(len(item.surface), min(config.surface_queries, len(item.surface)), replace=False)
        fre = rng.choice(len(item.free), min(config.free_queries, len(item.free)), replace=False)
        parts["cloud"].append(scale * item.surface[enc] @ rotation.T)
        parts["surface"].append(scale * item.surface[srf] @ rotation.T)
        parts["normals"].append(item.normals[srf] @ rotation.T)
        parts["free"].append(scale * item.free[fre] @ rotation.T)
        parts["free_sdf"].append(scale * item.free_sdf[fre])
    return TrainBatch(**{k: torch.as_tensor(np.stack(v), dtype=DTYPE) for k, v in parts.items()})


def _spatial_grad(values, points):
    """d values / d points for a batch of scalar fields, kept on the tape."""
    (grad,) = torch.autograd.grad(
        values, points, grad_outputs=torch.ones_like(values), create_graph=True
    )
    return grad


def training_losses(batch, weights, arch, config):
    """All loss components for one batch as scalar tensors.

    `weights` maps parameter names to tensors (leaves or plain values).
    Spatial gradients are taken by reverse mode with respect to the query
    coordinates and stay differentiable with respect to the parameters.
    """
    net = _template_network(arch)
    n_surface = batch.surface.shape[1]
    queries = torch.cat([batch.surface, batch.free], dim=1).detach().requires_grad_(True)
    out = torch.func.functional_call(net, weights, (batch.cloud, queries))
    phi = checked("s", out["s"])
    grad_phi = _spatial_grad(phi, queries)
    target = torch.cat([torch.zeros_like(batch.surface[..., 0]), batch.free_sdf], dim=1)

    regression = (phi - target).abs().mean()
    normal_fit = (1 - F.cosine_similarity(grad_phi[:, :n_surface], batch.normals, dim=-1)).mean()
    eikonal = (grad_phi.norm(dim=-1) - 1).abs().mean()
    off_surface = torch.exp(-config.delta * phi[:, n_surface:].abs()).mean()
    a, b, c, d = config.sdf_weights
    l_sdf = a * regression + b * normal_fit + c * eikonal + d * off_surface

    grad_template = _spatial_grad(out["template"], out["p_tilde"])[:, :n_surface]
    rotated_normals = batch.normals @ out["rotation"].transpose(1, 2)
    l_normal = (1 - F.cosine_similarity(grad_template, rotated_normals, dim=-1)).mean()

    v = out["v"]
    l_smooth = sum(
        _spatial_grad(v[..., axis], queries).norm(dim=-1).mean() for axis in range(3)
    )
    l_c = out["ds"].abs().mean()
    l_reg = (out["alpha"] ** 2).mean()
    l_net = (
        l_sdf
        + config.w_normal * l_normal
        + config.w_smooth * l_smooth
        + config.w_correction * l_c
        + config.w_reg * l_reg
    )
    return dict(
        L_sdf=l_sdf, L_normal=l_normal, L_smooth=l_smooth, L_c=l_c, L_reg=l_reg, L_net=l_net
    )


_NETWORKS = {}


def _template_network(arch):
    """Parameter-free module skeleton used for functional evaluation."""
    key = arch.model_dump_json()
    if key not in _NETWORKS:
        _NETWORKS[key] = RdifNetwork(arch).to(DTYPE)
    return _NETWORKS[key]


def surface_error(params, clouds):
    """Mean |s| over the surface points of each cloud."""
    errors = []
    for cloud in clouds:
        code = encode(cloud, params)
        errors.append(np.abs(sdf_query(cloud.points, code, params).s).mean())
    return float(np.mean(errors))


def train(dataset, config, holdout=()):
    """Fit the field to a list of shapes.

    Returns the trained parameters and a per-epoch loss log.  A non-finite
    loss stops training with `TrainingDivergedError` carrying the last good
    parameters.
    """
    assert len(dataset) >= 2, "training needs at least two shapes"
    rng = np.random.default_rng(config.seed)
    samples = [
        prepare_samples(shape, config, config.seed + index)
        for index, shape in enumerate(dataset)
    ]
    params = RdifParams.initial(config.arch, config.seed)
    weights = params.weights
    state = OptimState.fresh(weights, config.lr)

    def program(leaves, batch):
        return training_losses(batch, leaves, config.arch, config)["L_net"]

    rows = []
    for epoch in range(config.epochs):
        lr = diffcore.halving_schedule(config.lr, epoch, config.lr_halve_every)
        order = rng.permutation(len(samples))
        totals = []
        for start in range(0, len(order), config.batch_shapes):
            batch = make_batch([samples[i] for i in order[start : start + config.batch_shapes]], config, rng)
            try:
                result = diffcore.eval_and_grad(program, weights, batch)
            except NonFiniteError as exc:
                logger.error("non-finite loss at epoch %d (%s)", epoch, exc.node)
                raise TrainingDivergedError(epoch, RdifParams(config.arch, weights)) from exc
            weights, state = diffcore.adam_step(weights, result.grads, state, lr)
            totals.append(result.value)
        parts = training_losses(batch, dict(weights.items()), config.arch, config)
        row = {"epoch": epoch, "lr": lr, "loss": float(np.mean(totals))}
        row.update({k: float(v.detach()) for k, v in parts.items()})
        rows.append(row)
        logger.info("epoch %d lr %.3g loss %.6g", epoch, lr, row["loss"])
    params = RdifParams(config.arch, weights)
    log = pd.DataFrame(rows)
    if holdout:
        error = surface_error(params, holdout)
        log["holdout_surface_error"] = error
        logger.info("held-out mean |s| %.6g", error)
    return params, log


# --------------------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------------------


def _descriptor(params):
    return {
        "arch": params.arch.model_dump(mode="json"),
        "names": params.weights.names(),
        "shapes": [list(s) for s in params.weights.shapes().values()],
    }


def save_checkpoint(path, params):
    """Write magic, version, JSON descriptor, little-endian float64 arrays, SHA-256."""
    header = json.dumps(_descriptor(params), sort_keys=True).encode("utf-8")
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<II", VERSION, len(header)))
    body.write(header)
    for name in params.weights.names():
        body.write(params.weights[name].numpy().astype("<f8").tobytes())
    data = body.getvalue()
    with open(path, "wb") as writer:
        writer.write(data + hashlib.sha256(data).digest())


def load_checkpoint(path, expected_arch=None):
    """Read a checkpoint written by `save_checkpoint`; nothing is returned on failure."""
    with open(path, "rb") as reader:
        raw = reader.read()
    fixed = len(MAGIC) + 8
    if len(raw) < fixed + DIGEST_BYTES or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path} is not a checkpoint")
    version, header_len = struct.unpack("<II", raw[len(MAGIC) : fixed])
    if version != VERSION:
        raise CheckpointVersionError(f"{path} has format version {version}, expected {VERSION}")
    data, digest = raw[:-DIGEST_BYTES], raw[-DIGEST_BYTES:]
    if hashlib.sha256(data).digest() != digest:
        raise CheckpointCorruptError(f"{path} is truncated or damaged")
    try:
        descriptor = json.loads(data[fixed : fixed + header_len].decode("utf-8"))
        arch = RdifArch.model_validate(descriptor["arch"])
    except (ValueError, KeyError) as exc:
        raise CheckpointCorruptError(f"{path} has an unreadable descriptor") from exc
    if (expected_arch is not None) and (arch != expected_arch):
        raise ArchitectureMismatchError(f"{path} was trained with a different architecture")
    offset = fixed + header_len
    entries = {}
    for name, shape in zip(descriptor["names"], descriptor["shapes"]):
        count = int(np.prod(shape))
        chunk = data[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointCorruptError(f"{path} ends inside parameter {name}")
        entries[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise CheckpointCorruptError(f"{path} has trailing bytes")
    params = RdifParams(arch, ParamSet(entries))
    expected = {n: tuple(p.shape) for n, p in _template_network(arch).named_parameters()}
    if params.weights.shapes() != expected:
        raise ArchitectureMismatchError(f"{path} parameters do not match its architecture")
    return params
