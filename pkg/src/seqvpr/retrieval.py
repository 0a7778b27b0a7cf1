"""Descriptor database, exact kNN, recall/PR evaluation, cost benchmarks.

The store keeps unit-norm float64 descriptor rows plus per-sequence
metadata and is immutable once built. Matching is exact brute force: each
query performs exactly one distance computation per database row (the
count is reported so callers can assert the op-count accounting). Over
unit vectors, ascending Euclidean distance and descending cosine
similarity order identically.

A retrieved sequence is correct when it is a geographic match of the
query under the strict 25 m rule (see geo.is_match). Recall@N is the
percentage of queries with at least one correct match among the top N.
The precision-recall curve sweeps an acceptance threshold over the top-1
distances: precision = correct accepted / accepted (defined as 1.0 when
nothing is accepted), recall = correct accepted / total queries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geo import is_match

Array = np.ndarray

DEFAULT_NS = (1, 5, 10, 20)


@dataclass(frozen=True)
class DescriptorStore:
    """Unit-norm descriptor matrix plus parallel sequence metadata."""

    vectors: Array  # (N, D), rows unit norm
    positions: tuple  # per row: (L, 2) frame position array
    seq_ids: tuple

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def build_store(descriptors, positions, seq_ids=None) -> DescriptorStore:
    """Normalize rows and freeze the store; counts must line up."""
    vecs = np.asarray(descriptors, dtype=np.float64)
    if vecs.ndim != 2 or vecs.shape[0] == 0:
        raise ValueError("descriptors must be a non-empty (N, D) array")
    if len(positions) != vecs.shape[0]:
        raise ValueError(f"{vecs.shape[0]} descriptors but {len(positions)} metadata entries")
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero descriptor cannot be stored")
    vecs = vecs / norms
    vecs.setflags(write=False)
    if seq_ids is None:
        seq_ids = tuple(range(vecs.shape[0]))
    pos = tuple(np.asarray(p, dtype=np.float64) for p in positions)
    return DescriptorStore(vectors=vecs, positions=pos, seq_ids=tuple(seq_ids))


@dataclass
class RetrievalResult:
    """Top-N indices and distances for one query, ties broken by index."""

    indices: Array
    distances: Array
    truncated: bool
    distance_evals: int


def knn(store: DescriptorStore, query: Array, n: int) -> RetrievalResult:
    """Exact top-n rows by Euclidean distance to the query.

    n larger than the store is allowed; the result is truncated and
    flagged. Ties break toward the lower database index (stable sort).
    """
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (store.dim,):
        raise ValueError(f"query dim {q.shape} does not match store dim {store.dim}")
    if n < 1:
        raise ValueError("n must be >= 1")
    dists = np.linalg.norm(store.vectors - q, axis=1)
    truncated = n > store.size
    k = min(n, store.size)
    order = np.argsort(dists, kind="stable")[:k]
    return RetrievalResult(
        indices=order,
        distances=dists[order],
        truncated=truncated,
        distance_evals=store.size,
    )


def knn_batch(store: DescriptorStore, queries: Array, n: int) -> tuple[Array, Array, int]:
    """knn over (Q, D) queries, one row per query.

    Runs the single-query path per row so distances are bit-identical to
    knn (an expanded dot-product formulation would differ in final ulps).
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != store.dim:
        raise ValueError(f"queries must be (Q, {store.dim})")
    k = min(n, store.size)
    indices = np.empty((q.shape[0], k), dtype=np.int64)
    dists = np.empty((q.shape[0], k))
    evals = 0
    for i in range(q.shape[0]):
        res = knn(store, q[i], n)
        indices[i] = res.indices
        dists[i] = res.distances
        evals += res.distance_evals
    return indices, dists, evals


def match_matrix(query_positions, db_positions, threshold: float = 25.0) -> Array:
    """Boolean (Q, N) matrix of geographic correctness per query/db pair."""
    return np.array(
        [[is_match(qp, dp, threshold) for dp in db_positions] for qp in query_positions],
        dtype=bool,
    )


def recall_at_n(ranked_indices: Array, correct: Array, ns=DEFAULT_NS) -> dict[int, float]:
    """Recall@N percentages from ranked indices and a correctness matrix."""
    ranked = np.asarray(ranked_indices)
    n_queries = ranked.shape[0]
    if correct.shape[0] != n_queries:
        raise ValueError("correctness matrix does not cover all queries")
    hit = np.take_along_axis(correct, ranked, axis=1)
    recalls = {}
    for n in ns:
        top = hit[:, : min(n, ranked.shape[1])]
        recalls[n] = 100.0 * float(top.any(axis=1).sum()) / n_queries
    return recalls


def pr_curve(top1_distances: Array, top1_correct: Array, n_thresholds: int = 100) -> Array:
    """(threshold, precision, recall) rows swept over the top-1 distances."""
    d = np.asarray(top1_distances, dtype=np.float64)
    c = np.asarray(top1_correct, dtype=bool)
    if d.shape != c.shape or d.ndim != 1 or d.size == 0:
        raise ValueError("need parallel non-empty top-1 distance/correctness arrays")
    thresholds = np.linspace(d.min(), d.max(), n_thresholds)
    rows = np.empty((n_thresholds, 3))
    for i, t in enumerate(thresholds):
        accepted = d <= t
        n_acc = int(accepted.sum())
        n_correct = int((accepted & c).sum())
        precision = 1.0 if n_acc == 0 else n_correct / n_acc
        rows[i] = (t, precision, n_correct / d.size)
    return rows


@dataclass
class EvalReport:
    """Retrieval quality plus timing for one evaluation run."""

    recalls: dict[int, float]
    pr_points: Array
    query_count: int
    db_count: int
    dim: int
    mode: str
    extraction_ms: float
    matching_ms: float
    distance_evals: int


def evaluate(
    store: DescriptorStore,
    query_stacks,
    query_positions,
    extractor,
    mode: str = "forward",
    ns=DEFAULT_NS,
    threshold: float = 25.0,
) -> EvalReport:
    """Extract query descriptors, match against the store, score recalls.

    ``reversed`` mode flips each query's frame order before extraction
    while leaving the database untouched. ``extractor`` maps an
    (L, d_raw) stack to a descriptor of the store's dimension.
    """
    if mode not in ("forward", "reversed"):
        raise ValueError(f"unknown eval mode {mode!r}")
    t0 = time.perf_counter()
    descs = []
    for stack in query_stacks:
        s = np.asarray(stack, dtype=np.float64)
        if mode == "reversed":
            s = s[::-1]
        descs.append(extractor(s))
    queries = np.stack(descs)
    t1 = time.perf_counter()
    max_n = max(ns)
    ranked, dists, evals = knn_batch(store, queries, max_n)
    t2 = time.perf_counter()

    correct = match_matrix(query_positions, store.positions, threshold)
    recalls = recall_at_n(ranked, correct, ns)
    top1_correct = np.take_along_axis(correct, ranked[:, :1], axis=1)[:, 0]
    pr = pr_curve(dists[:, 0], top1_correct)
    return EvalReport(
        recalls=recalls,
        pr_points=pr,
        query_count=queries.shape[0],
        db_count=store.size,
        dim=store.dim,
        mode=mode,
        extraction_ms=(t1 - t0) * 1e3,
        matching_ms=(t2 - t1) * 1e3,
        distance_evals=evals,
    )


def serialize_report(report: EvalReport, include_timing: bool = False) -> str:
    """Line-oriented key=value text. Timing keys are wall-clock measurements
    and are excluded by default so report files stay bit-reproducible."""
    lines = [
        f"mode={report.mode}",
        f"queries={report.query_count}",
        f"database={report.db_count}",
        f"dim={report.dim}",
        f"distance_evals={report.distance_evals}",
    ]
    for n in sorted(report.recalls):
        lines.append(f"recall@{n}={report.recalls[n]:.4f}")
    if include_timing:
        lines.append(f"timing_extraction_ms={report.extraction_ms:.3f}")
        lines.append(f"timing_matching_ms={report.matching_ms:.3f}")
    return "\n".join(lines) + "\n"


def pr_csv(report: EvalReport) -> str:
    lines = ["threshold,precision,recall"]
    for t, p, r in report.pr_points:
        lines.append(f"{t!r},{p!r},{r!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# deployment-cost benchmarks


def bench_matching(
    dims=(64, 128, 256, 512, 4096),
    db_size: int = 13584,
    repetitions: int = 20,
    seed: int = 0,
) -> list[dict]:
    """Median per-query brute-force matching time for each dimension.

    Runs single-threaded on synthetic unit descriptors with warm-up
    excluded; one row per dimension with median and mean milliseconds.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    for dim in dims:
        db = rng.standard_normal((db_size, dim)).astype(np.float32)
        db /= np.linalg.norm(db, axis=1, keepdims=True)
        queries = rng.standard_normal((repetitions + 2, dim)).astype(np.float32)
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        for q in queries[:2]:  # warm-up
            np.argsort(np.linalg.norm(db - q, axis=1), kind="stable")[:1]
        times = []
        for q in queries[2:]:
            start = time.perf_counter()
            d = np.linalg.norm(db - q, axis=1)
            np.argsort(d, kind="stable")[:1]
            times.append((time.perf_counter() - start) * 1e3)
        rows.append(
            {
                "dim": int(dim),
                "db_size": int(db_size),
                "repetitions": int(repetitions),
                "median_ms": float(np.median(times)),
                "mean_ms": float(np.mean(times)),
            }
        )
    return rows


def linear_fit_r2(xs, ys) -> float:
    """Coefficient of determination of the least-squares line through (x, y)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - float((resid**2).sum()) / ss_tot


def storage_estimate(n_sequences: int, dim: int, bytes_per_value: int) -> int:
    """Exact bytes to store the database: sequences * dim * bytes/value."""
    for name, v in (("n_sequences", n_sequences), ("dim", dim), ("bytes_per_value", bytes_per_value)):
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    return int(n_sequences) * int(dim) * int(bytes_per_value)


STORAGE_NOTE = (
    "storage values are exact byte products (sequences*dim*bytes); "
    "frequently quoted back-of-envelope figures disagree with the exact "
    "arithmetic (e.g. 800000*512*4B = 1638400000 B = 1.64 GB, sometimes "
    "rounded to ~0.75 GB; 800000*24576*4B = 78.6 GB, sometimes quoted as ~36 GB)"
)


def storage_table(entries=((800000, 512, 4), (800000, 24576, 4), (800000, 128, 4))) -> str:
    """key=value storage estimates plus the exact-arithmetic annotation."""
    lines = []
    for n, dim, nbytes in entries:
        total = storage_estimate(n, dim, nbytes)
        lines.append(f"storage[{n}x{dim}x{nbytes}B]={total}")
    lines.append(f"storage_note={STORAGE_NOTE}")
    return "\n".join(lines) + "\n"
