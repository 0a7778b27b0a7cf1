"""UTM-plane geometry, ground-truth matching, and place-class partitioning.

Conventions used throughout the package:

- Positions are UTM easting/northing pairs in meters within a single zone.
  Distances are plain Euclidean distances on that plane.
- Headings are degrees clockwise from north. Inputs outside [0, 360) are
  wrapped; the stored/bucketed value always lies in [0, 360).
- A retrieved sequence is a correct match for a query when any of its
  frames lies strictly within ``threshold`` meters of any query frame
  (default 25 m).

Partitioning follows the grid-of-cells scheme used for scalable
classification training on geo-tagged imagery: the plane is divided into
square cells (default 10 x 10 m) and each cell is split into heading
buckets (default 12, i.e. 30 degrees each). Classes whose members can see
the same scene (neighboring cells at the same heading, or the same cell at
neighboring headings) must never be trained together, so classes are
striped into groups by cell/bucket parity and the training schedule
rotates over those groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class UtmPoint(NamedTuple):
    """A planar UTM position in meters."""

    easting: float
    northing: float


class PlaceClass(NamedTuple):
    """A partition class: grid cell indices plus a heading bucket."""

    cell_u: int
    cell_v: int
    heading_bucket: int


@dataclass(frozen=True)
class PartitionParams:
    """Geometry of the class partition and of the group striping."""

    cell_size: float = 10.0
    heading_buckets: int = 12
    group_stride_space: int = 2
    group_stride_heading: int = 2

    def __post_init__(self) -> None:
        if not (math.isfinite(self.cell_size) and self.cell_size > 0):
            raise ValueError("cell_size must be a positive finite number")
        if self.heading_buckets < 1:
            raise ValueError("heading_buckets must be >= 1")
        if self.group_stride_space < 1 or self.group_stride_heading < 1:
            raise ValueError("group strides must be >= 1")

    @property
    def bucket_width(self) -> float:
        return 360.0 / self.heading_buckets


@dataclass
class GroupSchedule:
    """Iteration schedule over non-adjacent class groups.

    ``groups`` is an ordered list of class lists; no group contains two
    spatially or directionally adjacent classes. The active group advances
    round-robin every ``rotation_period`` iterations; ``current_group`` is
    bookkeeping for the last group handed out.
    """

    groups: list[list[PlaceClass]]
    rotation_period: int = 250
    current_group: int = 0

    def active_index(self, iteration: int) -> int:
        return (iteration // self.rotation_period) % len(self.groups)

    def active_classes(self, iteration: int) -> list[PlaceClass]:
        return self.groups[self.active_index(iteration)]


def _check_point(p: Sequence[float]) -> tuple[float, float]:
    e, n = float(p[0]), float(p[1])
    if not (math.isfinite(e) and math.isfinite(n)):
        raise ValueError(f"non-finite UTM point: {p!r}")
    return e, n


def geodist(a: Sequence[float], b: Sequence[float]) -> float:
    """Euclidean distance in meters between two UTM points."""
    ae, an = _check_point(a)
    be, bn = _check_point(b)
    return math.hypot(ae - be, an - bn)


def _positions(seq) -> np.ndarray:
    """Coerce a sequence argument into an (L, 2) position array."""
    pos = getattr(seq, "positions", seq)
    arr = np.asarray(pos, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise ValueError("sequence positions must be a non-empty (L, 2) array")
    if not np.all(np.isfinite(arr)):
        raise ValueError("sequence positions contain non-finite values")
    return arr


def min_frame_distance(query, candidate) -> float:
    """Minimum over all (query frame, candidate frame) pairs of geodist."""
    q = _positions(query)
    c = _positions(candidate)
    diff = q[:, None, :] - c[None, :, :]
    return float(np.sqrt((diff * diff).sum(axis=2)).min())


def is_match(query, candidate, threshold: float = 25.0) -> bool:
    """True iff some candidate frame is strictly within ``threshold`` meters
    of some query frame.

    Arguments may be (L, 2) position arrays or any object exposing a
    ``positions`` attribute of that shape.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return min_frame_distance(query, candidate) < threshold


def assign_class(p: Sequence[float], heading: float, params: PartitionParams = PartitionParams()) -> PlaceClass:
    """Map a UTM position and heading to its partition class.

    Cell indices use floor division of the raw coordinates by the cell
    size; the heading is wrapped into [0, 360) and bucketed by floor
    division by the bucket width.
    """
    e, n = _check_point(p)
    if not math.isfinite(heading):
        raise ValueError(f"non-finite heading: {heading!r}")
    h = heading % 360.0
    bucket = int(h // params.bucket_width)
    if bucket >= params.heading_buckets:  # guard fp roundoff near 360
        bucket = params.heading_buckets - 1
    return PlaceClass(
        cell_u=math.floor(e / params.cell_size),
        cell_v=math.floor(n / params.cell_size),
        heading_bucket=bucket,
    )


def group_index(c: PlaceClass, params: PartitionParams = PartitionParams()) -> int:
    """Flattened group index of a class under the modular striping rule."""
    su, sh = params.group_stride_space, params.group_stride_heading
    return ((c.cell_u % su) * su + (c.cell_v % su)) * sh + (c.heading_bucket % sh)


def are_adjacent(a: PlaceClass, b: PlaceClass, heading_buckets: int = 12) -> bool:
    """Adjacency used for group separation.

    Two distinct classes are adjacent when they are Chebyshev-1 neighbors
    in cell indices with equal heading bucket, or the same cell with
    heading buckets differing by 1 modulo the bucket count.
    """
    if a == b:
        return False
    du = abs(a.cell_u - b.cell_u)
    dv = abs(a.cell_v - b.cell_v)
    if a.heading_bucket == b.heading_bucket:
        return max(du, dv) == 1
    if du == 0 and dv == 0:
        dh = abs(a.heading_bucket - b.heading_bucket)
        return min(dh, heading_buckets - dh) == 1
    return False


def build_groups(
    classes: Iterable[PlaceClass],
    params: PartitionParams = PartitionParams(),
    rotation_period: int = 250,
) -> GroupSchedule:
    """Stripe classes into non-adjacent groups and build the schedule.

    With even heading bucket counts and strides of 2, parity striping
    guarantees that no group contains an adjacent pair: adjacent cells
    differ by 1 in exactly one index (odd), and adjacent heading buckets
    differ by 1 mod an even count (odd).
    """
    class_set = set(classes)
    if not class_set:
        raise ValueError("class set must be non-empty")
    if params.heading_buckets % params.group_stride_heading != 0:
        raise ValueError("heading_buckets must be divisible by group_stride_heading")
    if rotation_period < 1:
        raise ValueError("rotation_period must be >= 1")
    n_groups = params.group_stride_space**2 * params.group_stride_heading
    buckets: list[list[PlaceClass]] = [[] for _ in range(n_groups)]
    for c in sorted(class_set):
        buckets[group_index(c, params)].append(c)
    groups = [g for g in buckets if g]
    return GroupSchedule(groups=groups, rotation_period=rotation_period)
