"""Training losses: weakly supervised triplet, large-margin cosine, and the
weighted multi-task combination.

The sequence branch trains with a margin triplet loss over (query,
positive, negative) sequence descriptors, where negatives are mined as the
items nearest in descriptor space among those geographically far enough to
be guaranteed non-matches. The image branch trains with a CosFace-style
loss: cosine logits against one unit-norm weight vector per place class,
an additive margin on the target cosine, and a scale factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MiningExhaustedError

Array = np.ndarray


@dataclass
class TripletBatch:
    """Stacked (B, D) descriptor arrays for queries, positives, negatives."""

    query: Array
    positive: Array
    negative: Array

    def __post_init__(self) -> None:
        q = np.asarray(self.query, dtype=np.float64)
        p = np.asarray(self.positive, dtype=np.float64)
        n = np.asarray(self.negative, dtype=np.float64)
        if q.ndim != 2 or q.shape != p.shape or q.shape != n.shape:
            raise ValueError(
                f"triplet arrays must share a (B, D) shape, got {q.shape}, {p.shape}, {n.shape}"
            )
        self.query, self.positive, self.negative = q, p, n

    def __len__(self) -> int:
        return self.query.shape[0]


def triplet_loss(batch: TripletBatch, margin: float = 0.1) -> tuple[float, tuple[Array, Array, Array]]:
    """Sum of max(0, d(q,p) - d(q,n) + margin) over the batch.

    Returns the scalar loss and gradients w.r.t. the query, positive and
    negative descriptor arrays. Hinged-off triplets contribute zero loss
    and zero gradient.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    q, p, n = batch.query, batch.positive, batch.negative
    dqp = np.linalg.norm(q - p, axis=1)
    dqn = np.linalg.norm(q - n, axis=1)
    slack = dqp - dqn + margin
    active = slack > 0
    loss = float(slack[active].sum())

    gq = np.zeros_like(q)
    gp = np.zeros_like(p)
    gn = np.zeros_like(n)
    for i in np.nonzero(active)[0]:
        # d d(q,x)/dq = (q-x)/d; distances of active triplets are nonzero
        # for dqn (slack > 0 forces dqn < dqp + m) but dqp may be 0 only if
        # q == p exactly, which callers avoid.
        up = (q[i] - p[i]) / dqp[i]
        un = (q[i] - n[i]) / dqn[i]
        gq[i] = up - un
        gp[i] = -up
        gn[i] = un
    return loss, (gq, gp, gn)


def mine_negatives(
    query_descs: Array,
    cache_descs: Array,
    cache_positions: list,
    query_positions: list,
    exclusion: float = 25.0,
    k: int = 1,
) -> np.ndarray:
    """Hardest geographically-safe negatives per query.

    For each query, returns the indices of the ``k`` cache items nearest in
    descriptor space among those whose minimum frame distance to the query
    exceeds ``exclusion`` meters. Ties break by ascending cache index.
    Raises MiningExhaustedError when a query has no eligible item.
    """
    from .geo import min_frame_distance

    q = np.asarray(query_descs, dtype=np.float64)
    c = np.asarray(cache_descs, dtype=np.float64)
    if c.shape[0] == 0:
        raise ValueError("mining cache is empty")
    if q.shape[0] != len(query_positions) or c.shape[0] != len(cache_positions):
        raise ValueError("descriptor/position counts do not match")

    out = np.empty((q.shape[0], k), dtype=np.int64)
    for i in range(q.shape[0]):
        eligible = np.array(
            [min_frame_distance(query_positions[i], cp) > exclusion for cp in cache_positions]
        )
        idx = np.nonzero(eligible)[0]
        if idx.size < k:
            raise MiningExhaustedError(
                f"query {i}: {idx.size} eligible negatives in cache, need {k}"
            )
        dists = np.linalg.norm(c[idx] - q[i], axis=1)
        order = np.argsort(dists, kind="stable")  # stable sort = index tie-break
        out[i] = idx[order[:k]]
    return out


@dataclass
class CosfaceParams:
    """Per-class unit-norm weight vectors plus scale and additive margin."""

    class_weights: Array
    scale: float = 30.0
    margin: float = 0.4

    def __post_init__(self) -> None:
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError("class_weights must be a (K, D) array")
        self.class_weights = w
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")


def cosface_from_cosines(cos: Array, label: int, scale: float, margin: float) -> tuple[float, Array]:
    """Loss and d(loss)/d(cosines) given precomputed class cosines."""
    z = scale * cos.astype(np.float64)
    z = z.copy()
    z[label] = scale * (cos[label] - margin)
    zmax = z.max()
    expz = np.exp(z - zmax)
    soft = expz / expz.sum()
    loss = float(-(z[label] - zmax) + np.log(expz.sum()))
    dz = soft.copy()
    dz[label] -= 1.0
    return loss, scale * dz


def cosface_loss(feature: Array, label: int, params: CosfaceParams) -> tuple[float, Array, Array]:
    """Large-margin cosine loss of one feature against the class weights.

    Returns (loss, grad wrt feature, grad wrt class_weights). The cosine
    normalizes both the feature and each weight vector, so neither needs
    to be unit-norm on input; the feature must be non-zero.
    """
    f = np.asarray(feature, dtype=np.float64)
    w = params.class_weights
    if f.ndim != 1 or f.shape[0] != w.shape[1]:
        raise ValueError(f"feature dim {f.shape} does not match weights {w.shape}")
    if not 0 <= label < w.shape[0]:
        raise ValueError(f"label {label} outside [0, {w.shape[0]})")
    fnorm = float(np.linalg.norm(f))
    if fnorm == 0.0:
        raise ValueError("zero feature has no cosine")
    wnorm = np.linalg.norm(w, axis=1)
    if np.any(wnorm == 0.0):
        raise ValueError("class weight with zero norm")

    fu = f / fnorm
    wu = w / wnorm[:, None]
    cos = wu @ fu
    loss, dcos = cosface_from_cosines(cos, label, params.scale, params.margin)

    # d cos_j / d f = (w_j/|w_j| - cos_j f/|f|) / |f|, and symmetrically for w_j
    grad_f = (wu.T @ dcos - (dcos @ cos) * fu) / fnorm
    grad_w = (dcos[:, None] * (fu[None, :] - cos[:, None] * wu)) / wnorm[:, None]
    return loss, grad_f, grad_w


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the two branch losses in the combined objective."""

    seq2seq: float = 10000.0
    im2im: float = 100.0

    def __post_init__(self) -> None:
        if self.seq2seq < 0 or self.im2im < 0:
            raise ValueError("loss weights must be non-negative")
        if self.seq2seq == 0 and self.im2im == 0:
            raise ValueError("at least one loss weight must be positive")


def multitask_loss(
    seq_loss: float,
    seq_grads: dict[str, Array],
    im_loss: float,
    im_grads: dict[str, Array],
    weights: LossWeights,
) -> tuple[float, dict[str, Array]]:
    """Weighted sum of the branch losses; gradients add per parameter.

    Parameters absent from one branch contribute zero from that branch.
    """
    total = weights.seq2seq * seq_loss + weights.im2im * im_loss
    combined: dict[str, Array] = {}
    for name in sorted(set(seq_grads) | set(im_grads)):
        g = None
        if name in seq_grads:
            g = weights.seq2seq * seq_grads[name]
        if name in im_grads:
            gi = weights.im2im * im_grads[name]
            g = gi if g is None else g + gi
        combined[name] = g
    return total, combined
