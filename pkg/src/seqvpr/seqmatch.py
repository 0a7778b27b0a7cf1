"""Frame-by-frame sequence matching baseline.

Scores a query sequence against one database sequence by building the
cosine similarity matrix between their frame descriptors and aggregating
entries along constant-velocity lines: for a handful of velocities around
1.0 and every integer intercept, the in-bounds entries m(i, round(c + v*i))
are averaged and the best line wins. Lines are enumerated anchored both at
the first and at the last query frame, which makes the family (and hence
the score) closed under simultaneous time reversal of both sequences.

This deliberately omits the contrast enhancement and local normalization
of the classic formulation; it exists to contrast accuracy and matching
cost against single-vector sequence descriptors. Matching a query this way
costs L_q * L_db frame comparisons per database sequence versus one
descriptor comparison for the descriptor pipeline; the counts are reported
so the contrast can be asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class VelocityParams:
    """Velocity grid for the line family."""

    v_min: float = 0.8
    v_max: float = 1.2
    v_steps: int = 5

    def __post_init__(self) -> None:
        if not (0 < self.v_min <= self.v_max):
            raise ValueError("need 0 < v_min <= v_max")
        if self.v_steps < 1:
            raise ValueError("v_steps must be >= 1")

    def velocities(self) -> np.ndarray:
        if self.v_steps == 1:
            return np.array([0.5 * (self.v_min + self.v_max)])
        return np.linspace(self.v_min, self.v_max, self.v_steps)


def sim_matrix(q_frames: Array, db_frames: Array) -> Array:
    """Cosine similarities between query frames (rows) and db frames (cols).

    Inputs are expected row-unit-norm; the plain dot product is used.
    """
    q = np.asarray(q_frames, dtype=np.float64)
    d = np.asarray(db_frames, dtype=np.float64)
    if q.ndim != 2 or d.ndim != 2 or q.shape[1] != d.shape[1]:
        raise ValueError(f"frame dim mismatch: {q.shape} vs {d.shape}")
    return q @ d.T


def _line_scores(m: Array, v: float, anchor_last: bool) -> list[float]:
    """Mean along lines j(i) = round(c + v*(i - i0)) for integer c.

    i0 = 0 anchors at the first query frame; i0 = L_q - 1 at the last.
    Intercepts range far enough that every line with at least one
    in-bounds entry is enumerated.
    """
    lq, ldb = m.shape
    i0 = lq - 1 if anchor_last else 0
    i = np.arange(lq)
    reach = int(math.ceil(v * (lq - 1))) + 1
    scores = []
    for c in range(-reach, ldb + reach):
        j = np.rint(c + v * (i - i0)).astype(int)
        mask = (j >= 0) & (j < ldb)
        count = int(mask.sum())
        if count == 0:
            continue
        scores.append(float(m[i[mask], j[mask]].sum()) / count)
    return scores


def seq_score(m: Array, vparams: VelocityParams = VelocityParams()) -> float:
    """Best average similarity over the constant-velocity line family."""
    mat = np.asarray(m, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise ValueError("similarity matrix must be non-empty and 2-D")
    best = -math.inf
    for v in vparams.velocities():
        for anchor_last in (False, True):
            scores = _line_scores(mat, float(v), anchor_last)
            if scores:
                best = max(best, max(scores))
    return best


def seqmatch_rank(
    query_frames: Array,
    db_frame_seqs,
    n: int = 20,
    vparams: VelocityParams = VelocityParams(),
) -> tuple[np.ndarray, np.ndarray, int]:
    """Rank database sequences by sequence-matching score, descending.

    Returns (top-n indices, their scores, total frame-pair comparisons).
    Ties break toward the lower database index.
    """
    if len(db_frame_seqs) == 0:
        raise ValueError("empty database")
    scores = np.empty(len(db_frame_seqs))
    ops = 0
    q = np.asarray(query_frames, dtype=np.float64)
    for k, db in enumerate(db_frame_seqs):
        m = sim_matrix(q, db)
        ops += m.shape[0] * m.shape[1]
        scores[k] = seq_score(m, vparams)
    order = np.argsort(-scores, kind="stable")[: min(n, len(db_frame_seqs))]
    return order, scores[order], ops
