"""Temporal aggregation of L frame descriptors into one sequence descriptor.

``seqgem`` applies generalized-mean pooling along the temporal axis of a
stack of frame descriptors, with a single learnable exponent p shared
across dimensions:

    out_j = ( (1/L) sum_i stack[i, j]^p )^(1/p)

p = 1 recovers average pooling; p -> inf approaches per-dimension max.
The output dimension equals the frame dimension for any stack length, and
the pooling is invariant to frame order. Average/max/concat baselines are
provided for comparison runs.

Fractional powers of negative inputs are undefined, so the default input
mode clamps entries to [clamp_eps, inf) before exponentiation; a signed
mode (sign(x) |x|^p inside, matching inverse outside) is available for
experimentation. For p > 20 the clamp-mode evaluation switches to
log-space to avoid overflow of x^p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

Array = np.ndarray

LOG_SPACE_P = 20.0


@dataclass
class SeqGemParams:
    """Learnable exponent plus input-domain handling for seqgem."""

    p: float = 3.0
    input_mode: str = "clamp"
    clamp_eps: float = 1e-6

    def __post_init__(self) -> None:
        if not self.p > 0:
            raise ValueError("seqgem exponent p must be positive")
        if self.input_mode not in ("clamp", "signed"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if not self.clamp_eps > 0:
            raise ValueError("clamp_eps must be positive")


def _check_stack(stack) -> Array:
    s = np.asarray(stack, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
        raise ValueError(f"frame stack must be a non-empty (L, D) array, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("frame stack contains non-finite entries")
    return s


def seqgem(stack, params: SeqGemParams = SeqGemParams()) -> Array:
    """Pool an (L, D) frame stack into a (D,) descriptor."""
    s = _check_stack(stack)
    p = params.p
    if params.input_mode == "clamp":
        y = np.maximum(s, params.clamp_eps)
        if p > LOG_SPACE_P:
            # log-space: out = exp((logsumexp_i(p ln y) - ln L) / p)
            logy = np.log(y)
            a = p * logy
            amax = a.max(axis=0)
            log_m = amax + np.log(np.exp(a - amax).sum(axis=0)) - np.log(s.shape[0])
            out = np.exp(log_m / p)
        else:
            out = (np.power(y, p).mean(axis=0)) ** (1.0 / p)
    else:
        t = np.abs(s)
        m = (np.sign(s) * np.power(t, p)).mean(axis=0)
        out = np.sign(m) * np.power(np.abs(m), 1.0 / p)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"seqgem overflow at p={p}")
    return out


def seqgem_backward(stack, params: SeqGemParams, upstream) -> tuple[Array, float]:
    """VJP of seqgem w.r.t. the frame stack and the exponent p.

    Clamped entries (x < clamp_eps) receive zero gradient (subgradient
    convention); a valid p-gradient additionally requires entries strictly
    above the clamp.
    """
    s = _check_stack(stack)
    u = np.asarray(upstream, dtype=np.float64)
    p = params.p
    L = s.shape[0]

    if params.input_mode == "clamp":
        y = np.maximum(s, params.clamp_eps)
        logy = np.log(y)
        if p > LOG_SPACE_P:
            a = p * logy
            amax = a.max(axis=0)
            w = np.exp(a - amax)
            wsum = w.sum(axis=0)
            log_m = amax + np.log(wsum) - np.log(L)
            log_out = log_m / p
            # d out_j / d y_ij = M^(1/p-1) y^(p-1) / L, in log-space
            grad_y = u * np.exp((p - 1.0) * (logy - log_out) - np.log(L))
            mean_logy = (w * logy).sum(axis=0) / wsum
            dout_dp = np.exp(log_out) * (-log_m / p**2 + mean_logy / p)
        else:
            yp = np.power(y, p)
            m = yp.mean(axis=0)
            out = m ** (1.0 / p)
            grad_y = u * (m ** (1.0 / p - 1.0)) * np.power(y, p - 1.0) / L
            dm_dp = (yp * logy).mean(axis=0)
            dout_dp = out * (-np.log(m) / p**2 + dm_dp / (p * m))
        grad_stack = np.where(s >= params.clamp_eps, grad_y, 0.0)
    else:
        t = np.abs(s)
        sign = np.sign(s)
        tp = np.power(t, p)
        m = (sign * tp).mean(axis=0)
        absm = np.abs(m)
        if np.any(absm == 0.0):
            raise NumericError("signed seqgem gradient undefined where the pooled mean is zero")
        grad_stack = u * (absm ** (1.0 / p - 1.0)) * np.power(t, p - 1.0) / L
        with np.errstate(divide="ignore"):
            logt = np.where(t > 0, np.log(np.maximum(t, 1e-300)), 0.0)
        dm_dp = (sign * tp * logt).mean(axis=0)
        out = np.sign(m) * absm ** (1.0 / p)
        # dout/dp = out * (-ln|m|/p^2 + m'/(p m)); the second term reduces
        # to |m|^(1/p-1) m' / p independent of sign(m).
        dout_dp = out * (-np.log(absm) / p**2) + absm ** (1.0 / p - 1.0) * dm_dp / p

    grad_p = float(np.sum(u * dout_dp))
    if not (np.all(np.isfinite(grad_stack)) and np.isfinite(grad_p)):
        raise NumericError(f"seqgem backward overflow at p={p}")
    return grad_stack, grad_p


def baseline_aggregate(kind: str, stack) -> Array:
    """Non-learnable aggregators: per-dim mean/max, or in-order concat."""
    s = _check_stack(stack)
    if kind == "avg":
        return s.mean(axis=0)
    if kind == "max":
        return s.max(axis=0)
    if kind == "concat":
        return s.reshape(-1)
    raise ValueError(f"unknown aggregator kind {kind!r}")
