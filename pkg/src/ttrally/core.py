"""World-frame data model, rally segmentation vocabulary, and dataset statistics.

World frame: origin at the table center on the floor, x along the table's
length, y along its width, z up. The table surface sits at z = height_z and
each player's hitting plane is the yz-plane at x = +/- length_x / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyDataset, NotEnoughHits

# Joint list convention used throughout the package: index RACKET_HAND_JOINT
# is the racket hand, and the last two entries are the left and right ankles.
RACKET_HAND_JOINT = 1
ANKLE_JOINTS = (-2, -1)


@dataclass(frozen=True)
class Vec3:
    """Point or vector in the world frame, meters."""

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Vec3":
        return Vec3(float(a[0]), float(a[1]), float(a[2]))

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def __mul__(self, s: float) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    __rmul__ = __mul__

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)

    def is_finite(self) -> bool:
        return all(map(math.isfinite, (self.x, self.y, self.z)))


@dataclass(frozen=True)
class TableGeometry:
    """Table dimensions and derived planes.

    Defaults follow the ITTF standard (2.74 m x 1.525 m x 0.76 m); the values
    live here so non-standard tables can be configured.
    """

    length_x: float = 2.74
    width_y: float = 1.525
    height_z: float = 0.76

    def __post_init__(self):
        if min(self.length_x, self.width_y, self.height_z) <= 0:
            raise ValueError("table dimensions must be positive")

    @property
    def half_length(self) -> float:
        return self.length_x / 2.0

    @property
    def half_width(self) -> float:
        return self.width_y / 2.0

    def hitting_plane_x(self, player: int) -> float:
        """x-offset of a player's hitting plane (player 0 at -x, 1 at +x)."""
        return -self.half_length if player == 0 else self.half_length

    def net_midpoints(self) -> tuple[Vec3, Vec3]:
        """Net intersections with the near (-y) and far (+y) table edges."""
        return (
            Vec3(0.0, -self.half_width, self.height_z),
            Vec3(0.0, self.half_width, self.height_z),
        )

    def surface_keypoints(self) -> list[Vec3]:
        """The six calibration keypoints on the table surface.

        Ordered corner1, corner2 (near side, -y), corner3, corner4 (far
        side, +y), then the two net midpoints (near, far).
        """
        hl, hw, h = self.half_length, self.half_width, self.height_z
        near, far = self.net_midpoints()
        return [
            Vec3(-hl, -hw, h),
            Vec3(hl, -hw, h),
            Vec3(-hl, hw, h),
            Vec3(hl, hw, h),
            near,
            far,
        ]

    def corner_ground_points(self) -> list[Vec3]:
        """Projections of the four table corners onto the floor (z = 0)."""
        return [Vec3(p.x, p.y, 0.0) for p in self.surface_keypoints()[:4]]


@dataclass
class Frame2D:
    """Per-frame image-plane observations.

    Image convention follows the broadcast coordinate system used by the rest
    of the package: u to the right, v up, origin at the bottom-left of the
    image. ``player_joints_cam`` are 3D joint positions in camera coordinates
    (as a pose estimator would emit), following the joint list convention at
    the top of this module.
    """

    frame_index: int
    ball_px: Optional[tuple[float, float]]
    table_keypoints: list[tuple[float, float]]
    base_height_px: float
    racket_centroids: list[Optional[tuple[float, float]]]
    player_joints_cam: list[Optional[list[Vec3]]]
    player_ankles_px: list[Optional[list[tuple[float, float]]]]

    def is_complete(self) -> bool:
        return (
            self.ball_px is not None
            and len(self.table_keypoints) == 6
            and all(c is not None for c in self.racket_centroids)
            and all(j is not None for j in self.player_joints_cam)
            and all(a is not None for a in self.player_ankles_px)
        )


@dataclass
class Frame3D:
    """Reconstructed world-frame state for one frame of an exchange."""

    frame_index: int
    ball_world: Vec3
    opponent_joints_world: list[Vec3]
    ego_root_world: Vec3


@dataclass(frozen=True)
class Segment:
    """Interval between two consecutive hits, [start_hit, end_hit)."""

    start_hit: int
    end_hit: int
    hitter: int


@dataclass(frozen=True)
class Exchange:
    """Two consecutive segments; the ego is the hitter of the first."""

    pre: Segment
    post: Segment

    @property
    def ego(self) -> int:
        return self.pre.hitter


@dataclass
class Point:
    """A reconstructed rally: ordered frames plus hit times."""

    frames: list[Frame3D]
    hits: list[int]
    fps: float = 60.0
    point_id: int = 0
    partition: str = ""
    complete: bool = True


def partition_point(
    frames: Sequence[Frame3D], hits: Sequence[int], first_hitter: int = 0
) -> list[Segment]:
    """Split a point into disjoint segments between consecutive hits.

    Segments are half-open [h_i, h_{i+1}) so that together they cover
    [h_1, h_last] with no gaps or overlaps. Hitter labels alternate starting
    from ``first_hitter``.
    """
    if len(hits) < 2:
        raise NotEnoughHits(f"need at least 2 hits, got {len(hits)}")
    hits = list(hits)
    if any(b <= a for a, b in zip(hits, hits[1:])):
        raise ValueError("hit times must be strictly increasing")
    if frames:
        lo = frames[0].frame_index
        hi = frames[-1].frame_index
        if hits[0] < lo or hits[-1] > hi:
            raise ValueError("hits outside frame range")
    return [
        Segment(a, b, (first_hitter + i) % 2)
        for i, (a, b) in enumerate(zip(hits, hits[1:]))
    ]


def extract_exchanges(segments: Sequence[Segment]) -> list[Exchange]:
    """Pair consecutive segments into exchanges; ego is the first hitter."""
    if len(segments) < 2:
        return []
    return [Exchange(a, b) for a, b in zip(segments, segments[1:])]


@dataclass
class DatasetStats:
    mean_speed: float
    speed_p10: float
    speed_p90: float
    mean_inter_hit_time: float
    crossing_y: dict[int, list[float]] = field(default_factory=dict)

    def crossing_histogram(self, bins: int = 20, y_range: float = 1.5):
        """Histogram of hitting-plane crossing y per player."""
        edges = np.linspace(-y_range, y_range, bins + 1)
        return {
            p: np.histogram(np.asarray(ys), bins=edges)[0]
            for p, ys in self.crossing_y.items()
        }, edges


def _nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


def dataset_stats(
    points: Sequence[Point], table: TableGeometry = TableGeometry()
) -> DatasetStats:
    """Speed, inter-hit timing, and hitting-plane crossing statistics.

    Speeds are finite-difference magnitudes between consecutive frames.
    Hitting-plane crossings use linear interpolation between the two frames
    straddling x = +/- length_x / 2 (the source footage frame rate is high
    relative to trajectory curvature, so linear is adequate).
    """
    if not points:
        raise EmptyDataset("no points")

    speeds: list[float] = []
    inter_hit: list[float] = []
    crossing_y: dict[int, list[float]] = {0: [], 1: []}

    for point in points:
        dt = 1.0 / point.fps
        balls = np.array([f.ball_world.as_array() for f in point.frames])
        if len(balls) >= 2:
            step = np.linalg.norm(np.diff(balls, axis=0), axis=1) / dt
            speeds.extend(step.tolist())
        for a, b in zip(point.hits, point.hits[1:]):
            inter_hit.append((b - a) * dt)
        for player in (0, 1):
            x_plane = table.hitting_plane_x(player)
            x = balls[:, 0]
            for i in range(len(x) - 1):
                lo, hi = x[i], x[i + 1]
                if (lo - x_plane) * (hi - x_plane) < 0:
                    frac = (x_plane - lo) / (hi - lo)
                    y = balls[i, 1] + frac * (balls[i + 1, 1] - balls[i, 1])
                    crossing_y[player].append(float(y))

    if not speeds:
        raise EmptyDataset("points contain no frame pairs")
    sorted_speeds = np.sort(np.asarray(speeds))
    return DatasetStats(
        mean_speed=float(np.mean(sorted_speeds)),
        speed_p10=_nearest_rank(sorted_speeds, 10.0),
        speed_p90=_nearest_rank(sorted_speeds, 90.0),
        mean_inter_hit_time=float(np.mean(inter_hit)) if inter_hit else float("nan"),
        crossing_y=crossing_y,
    )
