"""Reverse-mode evaluation of scalar loss programs and the optimizer steps that use it.

A *program* is any callable `program(params, inputs)` that takes a mapping from
names to float64 tensors plus constant data and returns a scalar tensor.  The
forward pass is recorded on torch's dynamic tape, so every operator torch
provides (affine maps, elementwise nonlinearities, norms, trigonometric and
rotation helpers, reductions) is available.  Nearest-neighbour selections are
made outside the tape and enter programs as constant index arrays.

Derivatives at non-smooth points (e.g. |x| at 0) are whatever torch's
subgradient convention gives and must not be relied on.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from interxfer.util import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# Adam moment coefficients and denominator guard.
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamSet:
    """Named flat collections of real scalars with fixed shapes."""

    def __init__(self, entries):
        self._entries = {}
        for name, value in entries.items():
            tensor = torch.as_tensor(value, dtype=DTYPE).detach().clone()
            if not bool(torch.isfinite(tensor).all()):
                raise NonFiniteError(name, f"parameter {name} is not finite")
            self._entries[name] = tensor

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def shapes(self):
        return {name: tuple(t.shape) for name, t in self._entries.items()}

    def congruent(self, other):
        """Same names with the same shapes."""
        return self.shapes() == other.shapes()

    def require_congruent(self, other):
        if not self.congruent(other):
            raise ShapeMismatchError(
                f"parameter sets differ: {self.shapes()} vs {other.shapes()}"
            )

    def numel(self):
        return sum(t.numel() for t in self._entries.values())

    def norm(self):
        """Global Euclidean norm over all entries."""
        total = sum(float((t * t).sum()) for t in self._entries.values())
        return float(np.sqrt(total))

    def map(self, func):
        """New set with `func` applied to every tensor."""
        return ParamSet({name: func(t) for name, t in self._entries.items()})

    def zeros_like(self):
        return self.map(torch.zeros_like)

    def as_leaves(self):
        """Fresh tensors that record gradients, keyed by name."""
        return {
            name: t.detach().clone().requires_grad_(True)
            for name, t in self._entries.items()
        }

    def to_numpy(self):
        return {name: t.numpy().copy() for name, t in self._entries.items()}

    def equal(self, other):
        """Bit-exact equality."""
        return self.congruent(other) and all(
            torch.equal(t, other[name]) for name, t in self._entries.items()
        )


@dataclass(frozen=True)
class GradResult:
    """Value of a program and its gradients with respect to every parameter."""

    value: float
    grads: ParamSet


@dataclass(frozen=True)
class OptimState:
    """Adam accumulators for one optimization loop."""

    # First and second moment estimates, congruent to the parameters.
    first: ParamSet

    second: ParamSet

    # Number of steps taken so far.
    step: int

    # Learning rate of the most recent step.
    lr: float

    @classmethod
    def fresh(cls, params, lr):
        return cls(first=params.zeros_like(), second=params.zeros_like(), step=0, lr=lr)


# --------------------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------------------


def checked(node, tensor):
    """Return `tensor`, raising if any entry is NaN or Inf.

    Programs wrap intermediate values with this so failures name the node
    where they first appear.
    """
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(node)
    return tensor


def eval_and_grad(program, params, inputs=None):
    """Evaluate `program` and its exact reverse-mode gradients."""
    leaves = params.as_leaves()
    value = program(leaves, inputs)
    if value.numel() != 1:
        raise ShapeMismatchError(
            f"program must return a scalar, got shape {tuple(value.shape)}"
        )
    checked("output", value)
    names = list(leaves)
    grads = torch.autograd.grad(
        value.reshape(()), [leaves[n] for n in names], allow_unused=True
    )
    result = {}
    for name, grad in zip(names, grads):
        grad = torch.zeros_like(leaves[name]) if grad is None else grad.detach()
        result[name] = checked(f"grad:{name}", grad)
    return GradResult(value=float(value.detach()), grads=ParamSet(result))


def evaluate(program, params, inputs=None):
    """Forward evaluation only; no parameter gradients are taken.

    Grad mode stays on so programs that differentiate with respect to their
    inputs (spatial gradients) still run.
    """
    with torch.enable_grad():
        value = program({name: t for name, t in params.items()}, inputs)
    return float(checked("output", value.detach()).reshape(()))


def finite_diff_check(program, params, eps, inputs=None, max_entries=None, seed=0):
    """Largest relative gap between analytic and central-difference gradients.

    The error for one scalar is |analytic - numeric| / max(1, |numeric|).  With
    `max_entries` set, a seeded random subset of scalars is checked.
    """
    assert eps > 0, "finite-difference step must be positive"
    analytic = eval_and_grad(program, params, inputs).grads
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        indices = np.arange(flat.numel())
        if (max_entries is not None) and (len(indices) > max_entries):
            indices = np.sort(rng.choice(indices, size=max_entries, replace=False))
        for k in indices:
            plus = _nudged(params, name, k, eps)
            minus = _nudged(params, name, k, -eps)
            numeric = (evaluate(program, plus, inputs) - evaluate(program, minus, inputs)) / (
                2 * eps
            )
            exact = float(analytic[name].reshape(-1)[k])
            worst = max(worst, abs(exact - numeric) / max(1.0, abs(numeric)))
    return worst


def _nudged(params, name, k, delta):
    """Copy of `params` with one scalar moved by `delta`."""
    entries = {n: t for n, t in params.items()}
    moved = entries[name].clone().reshape(-1)
    moved[k] += delta
    entries[name] = moved.reshape(entries[name].shape)
    return ParamSet(entries)


# --------------------------------------------------------------------------------------
# Optimizer steps
# --------------------------------------------------------------------------------------


def adam_step(params, grads, state, lr, betas=(BETA1, BETA2), eps=ADAM_EPS):
    """One bias-corrected Adam update."""
    assert lr > 0, "learning rate must be positive"
    params.require_congruent(grads)
    params.require_congruent(state.first)
    beta1, beta2 = betas
    step = state.step + 1
    first, second, updated = {}, {}, {}
    with torch.no_grad():
        for name, value in params.items():
            grad = grads[name]
            m = beta1 * state.first[name] + (1 - beta1) * grad
            v = beta2 * state.second[name] + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1**step)
            v_hat = v / (1 - beta2**step)
            first[name] = m
            second[name] = v
            updated[name] = value - lr * m_hat / (torch.sqrt(v_hat) + eps)
    new_state = OptimState(
        first=ParamSet(first), second=ParamSet(second), step=step, lr=lr
    )
    return ParamSet(updated), new_state


def clip_grads(grads, max_norm):
    """Scale gradients down so their global norm is at most `max_norm`."""
    assert max_norm > 0, "clip norm must be positive"
    norm = grads.norm()
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return grads.map(lambda g: g * scale)


def sgd_step_clipped(params, grads, lr, max_norm):
    """Plain gradient step after global-norm clipping."""
    assert lr > 0, "learning rate must be positive"
    params.require_congruent(grads)
    clipped = clip_grads(grads, max_norm)
    return ParamSet({name: value - lr * clipped[name] for name, value in params.items()})


def halving_schedule(initial, step, every):
    """Learning rate halved every `every` steps (steps count from 0)."""
    return initial * 0.5 ** (step // every)
