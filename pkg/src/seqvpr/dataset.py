"""Dataset model, on-disk formats, synthetic world generation, sampling.

A dataset is a manifest of frames (CSV) plus a feature blob (SPFB binary)
holding one precomputed feature vector per physical frame. Sequences are
sliding windows over a traversal; overlapping windows reference shared
blob rows via ``feature_offset``. Roles: ``database`` and ``query``
sequences drive retrieval, ``im2im`` entries are single-frame sequences
feeding the classification branch.

Synthetic worlds for desk-scale experiments: every place on a trajectory
has a latent signature; an observation under condition c applies a
per-condition identity-plus-low-rank mixing transform plus bias and
additive noise. Database traversals use condition 0; training queries use
the middle conditions; validation/test queries use the last condition,
which the sequence branch never sees in triplets but the im2im pool (all
conditions, geographically disjoint region) does. That asymmetry is what
lets joint training help over sequence-only training at desk scale.

File formats
------------
manifest.csv: header ``frame_id,seq_id,frame_idx,utm_east,utm_north,
heading_deg,condition_id,split,role,feature_offset``; role is one of
database/query/im2im, split one of train/val/test.

features.spfb: magic ``SPFB``; version as 4-byte little-endian unsigned;
count as 8-byte little-endian unsigned; dim as 4-byte little-endian
unsigned; then count*dim little-endian 4-byte floats, row-major.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .diffcore import seeded_rng
from .errors import FormatError, IntegrityError
from .geo import PartitionParams, PlaceClass, assign_class, min_frame_distance

log = logging.getLogger(__name__)

Array = np.ndarray

BLOB_MAGIC = b"SPFB"
BLOB_VERSION = 1

SPLITS = ("train", "val", "test")
ROLES = ("database", "query", "im2im")


@dataclass(frozen=True)
class FrameRecord:
    """One observed frame; ``feature_offset`` is a row into the blob."""

    frame_id: int
    seq_id: int
    frame_idx: int
    easting: float
    northing: float
    heading: float
    condition_id: int
    split: str
    role: str
    feature_offset: int


@dataclass
class SequenceSample:
    """Ordered frames forming one retrieval item (or im2im singleton)."""

    seq_id: int
    split: str
    role: str
    condition_id: int
    frames: list[FrameRecord]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def positions(self) -> Array:
        return np.array([[f.easting, f.northing] for f in self.frames])

    @property
    def headings(self) -> Array:
        return np.array([f.heading for f in self.frames])

    @property
    def feature_rows(self) -> Array:
        return np.array([f.feature_offset for f in self.frames], dtype=np.int64)


@dataclass
class DatasetManifest:
    """All frames plus the blob dimensionality; sequences are derived."""

    frames: list[FrameRecord]
    d_raw: int = 0
    _seqs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        by_seq: dict[int, list[FrameRecord]] = {}
        for f in self.frames:
            if f.split not in SPLITS:
                raise ValueError(f"unknown split {f.split!r}")
            if f.role not in ROLES:
                raise ValueError(f"unknown role {f.role!r}")
            by_seq.setdefault(f.seq_id, []).append(f)
        seqs: list[SequenceSample] = []
        for sid in sorted(by_seq):
            frames = sorted(by_seq[sid], key=lambda f: f.frame_idx)
            if [f.frame_idx for f in frames] != list(range(len(frames))):
                raise ValueError(f"sequence {sid}: frame_idx not dense from 0")
            head = frames[0]
            if any((f.split, f.role, f.condition_id) != (head.split, head.role, head.condition_id) for f in frames):
                raise ValueError(f"sequence {sid}: frames disagree on split/role/condition")
            seqs.append(SequenceSample(sid, head.split, head.role, head.condition_id, frames))
        # retrieval sequences must have a uniform length per split
        for split in SPLITS:
            lengths = {len(s) for s in seqs if s.split == split and s.role in ("database", "query")}
            if len(lengths) > 1:
                raise ValueError(f"split {split!r} mixes sequence lengths {sorted(lengths)}")
        self._seqs = {"all": seqs}

    def sequences(self, split: str | None = None, role: str | None = None) -> list[SequenceSample]:
        return [
            s
            for s in self._seqs["all"]
            if (split is None or s.split == split) and (role is None or s.role == role)
        ]


@dataclass(frozen=True)
class WorldParams:
    """Knobs of the synthetic trajectory world."""

    n_trajectories: int = 8
    places_per_trajectory: int = 40
    place_spacing: float = 10.0
    d_raw: int = 32
    n_conditions: int = 4
    condition_noise: float = 0.05
    seq_length: int = 5
    im2im_region_offset: float = 5000.0
    condition_rank: int = 4
    condition_strength: float = 1.0
    trajectory_separation: float = 100.0
    base_easting: float = 10000.0
    base_northing: float = 20000.0

    def __post_init__(self) -> None:
        if min(self.n_trajectories, self.places_per_trajectory, self.d_raw, self.n_conditions, self.seq_length, self.condition_rank) < 1:
            raise ValueError("counts must be >= 1")
        if self.condition_noise < 0:
            raise ValueError("condition_noise must be >= 0")
        if self.seq_length > self.places_per_trajectory:
            raise ValueError("seq_length exceeds places_per_trajectory")
        if self.condition_rank > self.d_raw:
            raise ValueError("condition_rank exceeds d_raw")


def _split_of_trajectory(t: int, n: int) -> str:
    n_train = max(1, round(0.5 * n))
    n_val = max(1, round(0.25 * n)) if n >= 3 else 0
    if t < n_train:
        return "train"
    if t < n_train + n_val:
        return "val"
    return "test"


def _query_conditions(split: str, n_conditions: int) -> list[int]:
    if n_conditions == 1:
        return [0]
    held_out = n_conditions - 1
    if split in ("val", "test") or n_conditions == 2:
        return [held_out]
    return list(range(1, n_conditions - 1))


def gen_world(params: WorldParams = WorldParams(), seed: int = 0) -> tuple[DatasetManifest, Array]:
    """Generate a synthetic world; deterministic per (params, seed).

    Returns the manifest and the float32 feature blob. Raises if the
    im2im region is not geographically disjoint (> 25 m) from the
    sequence region.
    """
    rng = seeded_rng(seed)
    P, L, C, D = params.places_per_trajectory, params.seq_length, params.n_conditions, params.d_raw
    extent = (P - 1) * params.place_spacing

    # latent place signatures, one per (trajectory, place)
    latents = rng.standard_normal((params.n_trajectories, P, D))

    # per-condition mixing transforms; condition 0 is the canonical view
    transforms: list[tuple[Array | None, Array | None]] = [(None, None)]
    for _ in range(1, C):
        u, _r = np.linalg.qr(rng.standard_normal((D, params.condition_rank)))
        v, _r = np.linalg.qr(rng.standard_normal((D, params.condition_rank)))
        bias = 0.1 * params.condition_strength * (u @ rng.standard_normal(params.condition_rank))
        transforms.append((params.condition_strength * (u @ v.T), bias))

    def observe(z: Array, c: int) -> Array:
        mix, bias = transforms[c]
        out = z.copy() if mix is None else z + z @ mix.T + bias
        if params.condition_noise > 0:
            out = out + params.condition_noise * rng.standard_normal(z.shape)
        return out

    # sequence region: straight rows along +easting, heading 90
    seq_points = np.empty((params.n_trajectories, P, 2))
    for t in range(params.n_trajectories):
        seq_points[t, :, 0] = params.base_easting + np.arange(P) * params.place_spacing
        seq_points[t, :, 1] = params.base_northing + t * params.trajectory_separation

    # im2im region: one angled path per trajectory on a coarse grid
    grid = math.ceil(math.sqrt(params.n_trajectories))
    pitch = 2.0 * extent + 100.0
    im_points = np.empty((params.n_trajectories, P, 2))
    im_headings = np.empty(params.n_trajectories)
    for t in range(params.n_trajectories):
        theta = (t * 360.0 / params.n_trajectories) % 360.0
        im_headings[t] = theta
        rad = math.radians(theta)
        start_e = params.base_easting + params.im2im_region_offset + extent + (t % grid) * pitch
        start_n = params.base_northing + extent + (t // grid) * pitch
        im_points[t, :, 0] = start_e + np.arange(P) * params.place_spacing * math.sin(rad)
        im_points[t, :, 1] = start_n + np.arange(P) * params.place_spacing * math.cos(rad)

    blob_rows: list[Array] = []
    frames: list[FrameRecord] = []
    frame_id = 0
    seq_id = 0

    def emit_traversal(z_traj: Array, c: int) -> int:
        first = len(blob_rows)
        obs = observe(z_traj, c)
        for p in range(P):
            blob_rows.append(obs[p])
        return first

    def emit_windows(first_row: int, points: Array, heading: float, c: int, split: str, role: str) -> None:
        nonlocal frame_id, seq_id
        for w in range(P - L + 1):
            for i in range(L):
                frames.append(
                    FrameRecord(
                        frame_id=frame_id,
                        seq_id=seq_id,
                        frame_idx=i,
                        easting=float(points[w + i, 0]),
                        northing=float(points[w + i, 1]),
                        heading=heading,
                        condition_id=c,
                        split=split,
                        role=role,
                        feature_offset=first_row + w + i,
                    )
                )
                frame_id += 1
            seq_id += 1

    for t in range(params.n_trajectories):
        split = _split_of_trajectory(t, params.n_trajectories)
        first = emit_traversal(latents[t], 0)
        emit_windows(first, seq_points[t], 90.0, 0, split, "database")
        for c in _query_conditions(split, C):
            first = emit_traversal(latents[t], c)
            emit_windows(first, seq_points[t], 90.0, c, split, "query")

    # im2im pool: fresh latents per place, all conditions, singleton frames
    im_latents = rng.standard_normal((params.n_trajectories, P, D))
    for t in range(params.n_trajectories):
        for c in range(C):
            first = emit_traversal(im_latents[t], c)
            for p in range(P):
                frames.append(
                    FrameRecord(
                        frame_id=frame_id,
                        seq_id=seq_id,
                        frame_idx=0,
                        easting=float(im_points[t, p, 0]),
                        northing=float(im_points[t, p, 1]),
                        heading=float(im_headings[t]),
                        condition_id=c,
                        split="train",
                        role="im2im",
                        feature_offset=first + p,
                    )
                )
                frame_id += 1
                seq_id += 1

    # disjointness: the im2im pool must never collide with the 25 m rule
    seq_flat = seq_points.reshape(-1, 2)
    im_flat = im_points.reshape(-1, 2)
    cross = np.sqrt(
        ((seq_flat[:, None, :] - im_flat[None, :, :]) ** 2).sum(axis=2)
    ).min()
    if cross <= 25.0:
        raise ValueError(
            f"im2im region overlaps the sequence region (min distance {cross:.1f} m); "
            "increase im2im_region_offset"
        )

    features = np.array(blob_rows, dtype=np.float32)
    manifest = DatasetManifest(frames=frames, d_raw=D)
    return manifest, features


# ---------------------------------------------------------------------------
# on-disk formats


def write_blob(path, features: Array) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("feature blob must be 2-D")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(np.uint32(BLOB_VERSION).astype("<u4").tobytes())
        f.write(np.uint64(arr.shape[0]).astype("<u8").tobytes())
        f.write(np.uint32(arr.shape[1]).astype("<u4").tobytes())
        f.write(arr.tobytes())


def read_blob(path) -> Array:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BLOB_MAGIC:
            raise FormatError(f"bad blob magic {magic!r}")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != BLOB_VERSION:
            raise FormatError(f"unsupported blob version {version}")
        count = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        dim = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        payload = f.read()
    if len(payload) != count * dim * 4:
        raise IntegrityError(
            f"blob payload holds {len(payload)} bytes, expected {count * dim * 4} for {count}x{dim}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()


def write_manifest_csv(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["frame_id", "seq_id", "frame_idx", "utm_east", "utm_north", "heading_deg", "condition_id", "split", "role", "feature_offset"]
        )
        for fr in manifest.frames:
            w.writerow(
                [fr.frame_id, fr.seq_id, fr.frame_idx, repr(fr.easting), repr(fr.northing), repr(fr.heading), fr.condition_id, fr.split, fr.role, fr.feature_offset]
            )


def read_manifest_csv(path, d_raw: int = 0) -> DatasetManifest:
    frames = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        expected = ["frame_id", "seq_id", "frame_idx", "utm_east", "utm_north", "heading_deg", "condition_id", "split", "role", "feature_offset"]
        if reader.fieldnames != expected:
            raise FormatError(f"manifest header {reader.fieldnames} != {expected}")
        try:
            for row in reader:
                frames.append(
                    FrameRecord(
                        frame_id=int(row["frame_id"]),
                        seq_id=int(row["seq_id"]),
                        frame_idx=int(row["frame_idx"]),
                        easting=float(row["utm_east"]),
                        northing=float(row["utm_north"]),
                        heading=float(row["heading_deg"]),
                        condition_id=int(row["condition_id"]),
                        split=row["split"],
                        role=row["role"],
                        feature_offset=int(row["feature_offset"]),
                    )
                )
        except (TypeError, KeyError) as e:
            raise FormatError(f"malformed manifest row: {e}") from e
    try:
        return DatasetManifest(frames=frames, d_raw=d_raw)
    except ValueError as e:
        raise IntegrityError(str(e)) from e


def write_dataset(manifest: DatasetManifest, features: Array, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    write_manifest_csv(manifest, os.path.join(directory, "manifest.csv"))
    write_blob(os.path.join(directory, "features.spfb"), features)


def read_dataset(directory) -> tuple[DatasetManifest, Array]:
    features = read_blob(os.path.join(directory, "features.spfb"))
    manifest = read_manifest_csv(os.path.join(directory, "manifest.csv"), d_raw=features.shape[1])
    bad = [f.frame_id for f in manifest.frames if not 0 <= f.feature_offset < features.shape[0]]
    if bad:
        raise IntegrityError(f"{len(bad)} frames reference rows outside the blob")
    return manifest, features


# ---------------------------------------------------------------------------
# convenience view + batch sampling


class Dataset:
    """Manifest plus features with cached per-role views."""

    def __init__(self, manifest: DatasetManifest, features: Array):
        self.manifest = manifest
        self.features = np.asarray(features)
        self._class_items: dict = {}

    @property
    def d_raw(self) -> int:
        return self.features.shape[1]

    def sequences(self, split=None, role=None) -> list[SequenceSample]:
        return self.manifest.sequences(split, role)

    def stack(self, seq: SequenceSample) -> Array:
        return self.features[seq.feature_rows].astype(np.float64)

    def im2im_class_items(self, params: PartitionParams = PartitionParams()):
        """Map class -> list of (feature row, frame) over the im2im pool."""
        key = (params.cell_size, params.heading_buckets)
        if key not in self._class_items:
            items: dict[PlaceClass, list] = {}
            for seq in self.sequences(role="im2im"):
                fr = seq.frames[0]
                cls = assign_class((fr.easting, fr.northing), fr.heading, params)
                items.setdefault(cls, []).append((fr.feature_offset, fr))
            self._class_items[key] = items
        return self._class_items[key]


def nearest_positive(ds: Dataset, query: SequenceSample, db: list[SequenceSample], threshold: float = 25.0) -> int | None:
    """Index of the geographically nearest database sequence within the
    match threshold, ties by ascending index; None when no match exists."""
    best = None
    best_d = threshold
    qpos = query.positions
    for i, cand in enumerate(db):
        d = min_frame_distance(qpos, cand.positions)
        if d < best_d:
            best, best_d = i, d
    return best


def sample_triplet_inputs(
    ds: Dataset,
    split: str,
    batch_size: int,
    rng: np.random.Generator,
    mine_fn,
    threshold: float = 25.0,
    positive_fn=None,
):
    """Draw (query, positive, negative) raw-sequence triplets for training.

    ``mine_fn(queries)`` maps the drawn query samples to one negative
    database sequence each. Queries without any geographic positive are
    skipped with a warning; an empty result raises. Deterministic for a
    given rng state.
    """
    queries = ds.sequences(split, "query")
    db = ds.sequences(split, "database")
    if not queries or not db:
        raise ValueError(f"split {split!r} lacks query or database sequences")
    pick = rng.choice(len(queries), size=min(batch_size, len(queries)), replace=False)

    chosen = []
    for qi in pick:
        q = queries[int(qi)]
        pi = (positive_fn or nearest_positive)(ds, q, db, threshold)
        if pi is None:
            log.warning("query seq %d has no positive within %.0f m; skipped", q.seq_id, threshold)
            continue
        chosen.append((q, db[pi]))
    if not chosen:
        raise ValueError("no sampled query has a geographic positive")

    negatives = mine_fn([q for q, _ in chosen])
    return [
        {
            "query": q,
            "positive": p,
            "negative": db[int(ni)],
            "query_stack": ds.stack(q),
            "positive_stack": ds.stack(p),
            "negative_stack": ds.stack(db[int(ni)]),
        }
        for (q, p), ni in zip(chosen, negatives)
    ]


def sample_class_batch(
    ds: Dataset,
    schedule,
    iteration: int,
    batch_size: int,
    rng: np.random.Generator,
    partition: PartitionParams = PartitionParams(),
):
    """Draw class-labeled single frames from the active class group.

    Classes are sampled uniformly with replacement from the active group,
    then one image per drawn class. Returns (features (B, d_raw),
    classes list, group index).
    """
    items = ds.im2im_class_items(partition)
    gi = schedule.active_index(iteration)
    for _ in range(len(schedule.groups)):
        group = [c for c in schedule.groups[gi] if c in items]
        if group:
            break
        gi = (gi + 1) % len(schedule.groups)
    else:
        raise ValueError("no schedule group has any im2im image")
    schedule.current_group = gi

    cls_pick = rng.choice(len(group), size=batch_size, replace=True)
    rows = np.empty(batch_size, dtype=np.int64)
    classes = []
    for b, ci in enumerate(cls_pick):
        cls = group[int(ci)]
        options = items[cls]
        rows[b] = options[int(rng.integers(len(options)))][0]
        classes.append(cls)
    return ds.features[rows].astype(np.float64), classes, gi
