"""Differentiable-op primitives, finite-difference checking, deterministic RNG.

Only the fixed computation graphs of this package need gradients, so every
op is written as an explicit forward plus a backward that implements the
vector-Jacobian product at the forward point; there is no general autodiff
tape. All gradient math runs in float64 (descriptor storage on disk is
float32, see dataset.py).

Randomness comes from numpy's PCG64 generator. That algorithm is pinned
for the lifetime of this repo: identical seeds yield identical streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

Array = np.ndarray


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream (PCG64) for the given 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))


def as_vector(x) -> Array:
    """Validate and coerce to a finite 1-D float64 vector of dim >= 1."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    return v


def l2_normalize(v: Array) -> Array:
    """Scale ``v`` to unit Euclidean norm."""
    v = as_vector(v)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return v / norm


def l2_normalize_backward(v: Array, upstream: Array) -> Array:
    """VJP of l2_normalize: (g - (g . y) y) / ||v|| with y = v/||v||."""
    v = as_vector(v)
    g = np.asarray(upstream, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot normalize the zero vector")
    y = v / norm
    return (g - np.dot(g, y) * y) / norm


def euclidean(a: Array, b: Array) -> float:
    """Euclidean distance between two equal-dim vectors."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def euclidean_backward(a: Array, b: Array, upstream: float = 1.0) -> tuple[Array, Array]:
    """Gradients of euclidean(a, b) w.r.t. both arguments (a != b)."""
    a = as_vector(a)
    b = as_vector(b)
    d = float(np.linalg.norm(a - b))
    if d == 0.0:
        raise NumericError("euclidean distance gradient undefined at coincident points")
    g = upstream * (a - b) / d
    return g, -g


@dataclass
class DiffOp:
    """A forward function paired with its vector-Jacobian product.

    ``forward`` maps a list of float64 arrays to one output array (scalars
    are shape-() arrays); ``backward`` maps (inputs, upstream cotangent)
    to one gradient array per input, evaluated at the forward point.
    """

    name: str
    forward: Callable[[list[Array]], Array]
    backward: Callable[[list[Array], Array], list[Array]]


@dataclass
class FdReport:
    """Result of a finite-difference check of one DiffOp at one point."""

    max_rel_error: float
    per_parameter_errors: list[float]
    passed: bool
    tolerance: float


def fd_check(
    op: DiffOp,
    inputs: Sequence[Array],
    eps: float = 1e-5,
    tol: float = 1e-4,
    upstream: Array | None = None,
) -> FdReport:
    """Compare ``op.backward`` against central finite differences.

    Every scalar entry of every input is perturbed by +/- eps and the
    directional derivative (upstream . f) is differenced. The relative
    error denominator is max(1, |analytic|). Callers are responsible for
    choosing points away from non-differentiable regions (hinge
    boundaries, max ties, clamp edges) by more than ~1e-3.
    """
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    f0 = np.asarray(op.forward(xs), dtype=np.float64)
    if not np.all(np.isfinite(f0)):
        raise NumericError(f"{op.name}: non-finite forward value at check point")
    u = np.ones_like(f0) if upstream is None else np.asarray(upstream, dtype=np.float64)

    analytic = op.backward(xs, u)
    errors: list[float] = []
    for k, x in enumerate(xs):
        a_k = np.asarray(analytic[k], dtype=np.float64)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = np.asarray(op.forward(xs), dtype=np.float64)
            flat[j] = orig - eps
            f_minus = np.asarray(op.forward(xs), dtype=np.float64)
            flat[j] = orig
            if not (np.all(np.isfinite(f_plus)) and np.all(np.isfinite(f_minus))):
                raise NumericError(f"{op.name}: non-finite forward during differencing")
            numeric = float(np.sum(u * (f_plus - f_minus)) / (2.0 * eps))
            a = float(a_k.reshape(-1)[j])
            errors.append(abs(a - numeric) / max(1.0, abs(a)))
    max_err = max(errors) if errors else 0.0
    return FdReport(
        max_rel_error=max_err,
        per_parameter_errors=errors,
        passed=max_err <= tol,
        tolerance=tol,
    )
