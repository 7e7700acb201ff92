"""Hit/bounce event detection and 3D ball trajectory reconstruction.

The ball between anchors (racket contact, table bounce) follows projectile
motion with linear air drag; with both endpoints pinned the trajectory is a
one-parameter family in the drag coefficient k, which is recovered by
minimizing reprojection error with a bounded golden-section search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera import Camera, ImagePoint, Plane, inverse_project_to_plane, project_many
from .core import TableGeometry, Vec3
from .errors import (
    FitFailed,
    NoBounceFound,
    OutOfRange,
    SegmentRejected,
)

GRAVITY = 9.81  # m/s^2, magnitude

K_MIN_DEFAULT = 1e-3
K_MAX_DEFAULT = 5.0


@dataclass
class BallTrack2D:
    """Sparse per-frame 2D ball samples; frame indices strictly increasing."""

    frames: np.ndarray  # (n,) int
    pixels: np.ndarray  # (n, 2) float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=int)
        self.pixels = np.asarray(self.pixels, dtype=float)
        if np.any(np.diff(self.frames) <= 0):
            raise ValueError("frame indices must be strictly increasing")

    def window(self, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        """Samples with lo <= frame <= hi."""
        mask = (self.frames >= lo) & (self.frames <= hi)
        return self.frames[mask], self.pixels[mask]


@dataclass
class HitEvent:
    frame: int
    player: int
    hand_world: Optional[Vec3] = None


@dataclass
class BounceEvent:
    frame: int
    position: Vec3


@dataclass(frozen=True)
class StokesSegment:
    """Drag-trajectory piece between two anchors, parametrized on [0, T]."""

    b0: Vec3
    bT: Vec3
    T: float
    k: float
    g: float = GRAVITY

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.k <= 0:
            raise ValueError("k must be positive")


def stokes_position(seg: StokesSegment, t: float) -> Vec3:
    """Evaluate the closed-form drag trajectory at time t in [0, T]."""
    if t < -1e-12 or t > seg.T + 1e-12:
        raise OutOfRange(f"t={t} outside [0, {seg.T}]")
    k, T, g = seg.k, seg.T, seg.g
    frac = -math.expm1(-k * t) / -math.expm1(-k * T)
    x = seg.b0.x + (seg.bT.x - seg.b0.x) * frac
    y = seg.b0.y + (seg.bT.y - seg.b0.y) * frac
    # Grouping the gravity term as T*frac - t keeps both endpoints exact
    # even when g/k is huge (small-k regime).
    z = seg.b0.z + (seg.bT.z - seg.b0.z) * frac + (g / k) * (T * frac - t)
    return Vec3(x, y, z)


def stokes_positions(seg: StokesSegment, ts: np.ndarray) -> np.ndarray:
    """Vectorized trajectory evaluation; (n, 3) array."""
    ts = np.asarray(ts, dtype=float)
    if np.any(ts < -1e-12) or np.any(ts > seg.T + 1e-12):
        raise OutOfRange("sample times outside [0, T]")
    k, T, g = seg.k, seg.T, seg.g
    frac = -np.expm1(-k * ts) / -np.expm1(-k * T)
    b0 = seg.b0.as_array()
    bt = seg.bT.as_array()
    out = b0 + np.outer(frac, bt - b0)
    out[:, 2] += (g / k) * (T * frac - ts)
    return out


def stokes_velocity(seg: StokesSegment, t: float) -> Vec3:
    """Analytic time derivative of the drag trajectory."""
    k, T, g = seg.k, seg.T, seg.g
    dfrac = k * math.exp(-k * t) / -math.expm1(-k * T)
    gk = g / k
    return Vec3(
        (seg.bT.x - seg.b0.x) * dfrac,
        (seg.bT.y - seg.b0.y) * dfrac,
        (seg.bT.z - seg.b0.z + gk * T) * dfrac - gk,
    )


def smooth(values: np.ndarray, window: int = 5) -> np.ndarray:
    """Centered moving average with edge shrinking."""
    if window <= 1 or len(values) < 2:
        return np.asarray(values, dtype=float)
    half = window // 2
    out = np.empty(len(values), dtype=float)
    for i in range(len(values)):
        lo = max(0, i - half)
        hi = min(len(values), i + half + 1)
        out[i] = np.mean(values[lo:hi])
    return out


def _local_minima(values: np.ndarray) -> np.ndarray:
    """Indices of strict-left / non-strict-right local minima."""
    idx = []
    for i in range(1, len(values) - 1):
        if values[i] < values[i - 1] and values[i] <= values[i + 1]:
            idx.append(i)
    return np.asarray(idx, dtype=int)


def detect_hits(
    ball: BallTrack2D,
    racket_centroids: Sequence[dict[int, tuple[float, float]]],
    tau_hit: float = 30.0,
    min_gap: int = 15,
    smooth_window: int = 5,
) -> list[HitEvent]:
    """Hits are local minima of the smoothed ball-racket pixel distance.

    ``racket_centroids`` holds one frame->pixel mapping per player. Minima
    above ``tau_hit`` pixels are ignored; of any two accepted minima closer
    than ``min_gap`` frames, only the deeper one is kept.
    """
    candidates: list[tuple[float, int, int]] = []  # (distance, frame, player)
    for player, centroids in enumerate(racket_centroids):
        frames = [f for f in ball.frames if int(f) in centroids]
        if len(frames) < 3:
            continue
        pix = {int(f): p for f, p in zip(ball.frames, ball.pixels)}
        dist = np.array(
            [
                math.hypot(
                    pix[f][0] - centroids[f][0], pix[f][1] - centroids[f][1]
                )
                for f in frames
            ]
        )
        smoothed = smooth(dist, smooth_window)
        minima = list(_local_minima(smoothed))
        # The recording may start or end at a hit; admit boundary minima too.
        if len(smoothed) >= 2 and smoothed[0] <= smoothed[1]:
            minima.append(0)
        if len(smoothed) >= 2 and smoothed[-1] <= smoothed[-2]:
            minima.append(len(smoothed) - 1)
        for i in minima:
            # Smoothing can shift the valley; snap to the raw minimum nearby
            # and apply the contact threshold to the raw distance.
            lo, hi = max(0, i - 2), min(len(dist), i + 3)
            j = lo + int(np.argmin(dist[lo:hi]))
            if dist[j] <= tau_hit:
                candidates.append((dist[j], frames[j], player))

    # Greedy non-maximum suppression, deepest minima first.
    accepted: list[tuple[int, int, float]] = []
    for depth, frame, player in sorted(candidates):
        if all(abs(frame - f) >= min_gap for f, _, _ in accepted):
            accepted.append((frame, player, depth))
    accepted.sort()
    return [HitEvent(frame=f, player=p) for f, p, _ in accepted]


def fit_parabola(samples: Sequence[tuple[float, float]]) -> tuple[np.ndarray, float]:
    """Least-squares quadratic through (t, v) samples; returns (coeffs, mse).

    Coefficients are highest degree first. Raises FitFailed for fewer than
    three distinct abscissae.
    """
    ts = np.array([s[0] for s in samples], dtype=float)
    vs = np.array([s[1] for s in samples], dtype=float)
    if len(np.unique(ts)) < 3:
        raise FitFailed("need at least 3 distinct sample times")
    # Center for conditioning; expand back afterwards.
    t0 = ts.mean()
    a = np.vander(ts - t0, 3)
    coeffs_c, _, rank, _ = np.linalg.lstsq(a, vs, rcond=None)
    if rank < 3:
        raise FitFailed("rank-deficient parabola fit")
    c2, c1, c0 = coeffs_c
    coeffs = np.array(
        [c2, c1 - 2 * c2 * t0, c0 - c1 * t0 + c2 * t0 * t0]
    )
    resid = vs - a @ coeffs_c
    return coeffs, float(np.mean(resid**2))


def _side_sse(ball: BallTrack2D, lo: int, hi: int) -> float:
    """Squared-error sum of the best parabola over frames [lo, hi]."""
    frames, pixels = ball.window(lo, hi)
    if len(frames) < 3:
        raise FitFailed(f"only {len(frames)} samples in [{lo}, {hi}]")
    _, mse = fit_parabola(list(zip(frames.astype(float), pixels[:, 1])))
    return mse * len(frames)


def select_bounce(
    ball: BallTrack2D, h1: int, h2: int, candidates: Sequence[int]
) -> tuple[int, float]:
    """Pick the bounce frame minimizing the two-parabola squared-error total.

    The candidate frame belongs to both fitted sides. Ties break toward the
    earliest frame.
    """
    best: Optional[tuple[float, int]] = None
    for b in sorted(candidates):
        if not (h1 < b < h2):
            continue
        try:
            total = _side_sse(ball, h1, b) + _side_sse(ball, b, h2)
        except FitFailed:
            continue
        if best is None or total < best[0]:
            best = (total, b)
    if best is None:
        raise NoBounceFound(f"no usable bounce candidate in ({h1}, {h2})")
    return best[1], best[0]


def select_serve_bounces(
    ball: BallTrack2D, h1: int, h2: int, candidates: Sequence[int]
) -> tuple[tuple[int, int], float]:
    """Serve variant: pick the ordered bounce pair minimizing a 3-fit total."""
    cands = sorted(set(c for c in candidates if h1 < c < h2))
    if len(cands) < 2:
        raise NoBounceFound("need at least two bounce candidates for a serve")
    best: Optional[tuple[float, tuple[int, int]]] = None
    for i, ba in enumerate(cands):
        for bb in cands[i + 1 :]:
            try:
                total = (
                    _side_sse(ball, h1, ba)
                    + _side_sse(ball, ba, bb)
                    + _side_sse(ball, bb, h2)
                )
            except FitFailed:
                continue
            if best is None or total < best[0]:
                best = (total, (ba, bb))
    if best is None:
        raise NoBounceFound("no usable bounce pair for the serve")
    return best[1], best[0]


def bounce_candidates(
    ball: BallTrack2D, h1: int, h2: int, smooth_window: int = 5, margin: int = 2
) -> list[int]:
    """Local minima of the image-vertical ball position in (h1, h2).

    Minima of both the smoothed and the raw signal are collected: smoothing
    suppresses noise spikes but can erase a shallow bounce entirely (a flat
    serve arc dips only a fraction of a pixel). Each minimum contributes
    itself and its two neighboring frames (smoothing can shift the apparent
    minimum by a frame; the split-fit selection picks the best of the
    cluster). ``margin`` keeps at least three samples on each side of a
    candidate.
    """
    frames, pixels = ball.window(h1, h2)
    if len(frames) < 2 * margin + 3:
        return []
    vs = smooth(pixels[:, 1], smooth_window)
    minima = set(_local_minima(vs)) | set(_local_minima(pixels[:, 1]))
    out: set[int] = set()
    for i in minima:
        for j in (i - 1, i, i + 1):
            if 0 <= j < len(frames):
                f = int(frames[j])
                if h1 + margin <= f <= h2 - margin:
                    out.add(f)
    return sorted(out)


def golden_section(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Minimize a unimodal scalar function on [lo, hi]."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    inv_phi2 = (3.0 - math.sqrt(5.0)) / 2.0
    a, b = lo, hi
    h = b - a
    if h <= tol:
        return (a + b) / 2.0
    n = int(math.ceil(math.log(tol / h) / math.log(inv_phi)))
    c = a + inv_phi2 * h
    d = a + inv_phi * h
    yc, yd = f(c), f(d)
    for _ in range(n - 1):
        if yc < yd:
            b, d, yd = d, c, yc
            h *= inv_phi
            c = a + inv_phi2 * h
            yc = f(c)
        else:
            a, c, yc = c, d, yd
            h *= inv_phi
            d = a + inv_phi * h
            yd = f(d)
    return (a + d) / 2.0 if yc < yd else (c + b) / 2.0


@dataclass
class DragFit:
    k: float
    reproj_error: float  # summed squared pixel error at the fitted k
    boundary_warning: bool = False


def fit_drag(
    b0: Vec3,
    bT: Vec3,
    T: float,
    sample_times: np.ndarray,
    sample_pixels: np.ndarray,
    camera: Camera,
    k_bounds: tuple[float, float] = (K_MIN_DEFAULT, K_MAX_DEFAULT),
    tol: float = 1e-6,
) -> DragFit:
    """Recover the drag coefficient by reprojection-error minimization.

    Endpoints are fixed; the only free parameter is k, searched with a
    golden-section scheme on ``k_bounds``. A flat objective (uninformative
    samples) falls back to the lower bound with a warning flag.
    """
    sample_times = np.asarray(sample_times, dtype=float)
    sample_pixels = np.asarray(sample_pixels, dtype=float)

    def objective(k: float) -> float:
        seg = StokesSegment(b0=b0, bT=bT, T=T, k=k)
        proj = project_many(camera, stokes_positions(seg, sample_times))
        return float(np.sum((proj - sample_pixels) ** 2))

    lo, hi = k_bounds
    probes = np.geomspace(lo, hi, 7)
    probe_vals = [objective(k) for k in probes]
    if max(probe_vals) - min(probe_vals) < 1e-12:
        return DragFit(k=lo, reproj_error=probe_vals[0], boundary_warning=True)

    # Narrow to the bracket around the best probe before golden section.
    i = int(np.argmin(probe_vals))
    blo = probes[max(0, i - 1)]
    bhi = probes[min(len(probes) - 1, i + 1)]
    k_star = golden_section(objective, blo, bhi, tol=tol)
    err = objective(k_star)
    warn = bool(i == 0 and abs(k_star - lo) < 10 * tol) or bool(
        i == len(probes) - 1 and abs(k_star - hi) < 10 * tol
    )
    return DragFit(k=k_star, reproj_error=err, boundary_warning=warn)


@dataclass
class ReconstructedPiece:
    """One fitted Stokes piece with its absolute frame support."""

    start_frame: int
    end_frame: int
    segment: StokesSegment
    drag: DragFit
    parabola_mse: float  # summed two-parabola bounce-selection error for the pair


@dataclass
class TrajectoryReconstruction:
    pieces: list[ReconstructedPiece] = field(default_factory=list)
    bounces: list[BounceEvent] = field(default_factory=list)

    def ball_at_frame(self, frame: int, fps: float) -> Optional[Vec3]:
        for piece in self.pieces:
            if piece.start_frame <= frame <= piece.end_frame:
                t = (frame - piece.start_frame) / fps
                return stokes_position(piece.segment, min(t, piece.segment.T))
        return None


def reconstruct_trajectory(
    ball: BallTrack2D,
    hits: Sequence[HitEvent],
    camera: Camera,
    table: TableGeometry,
    fps: float,
    serve_first: bool = True,
    mse_threshold: Optional[float] = None,
    k_bounds: tuple[float, float] = (K_MIN_DEFAULT, K_MAX_DEFAULT),
) -> TrajectoryReconstruction:
    """Anchor and fit drag pieces for every consecutive hit pair.

    Hit anchors use the hitter's racket-hand position (``hand_world`` must be
    filled in); bounce anchors come from inverse projection onto the table
    plane. The first hit pair is treated as the serve (two bounces, three
    pieces) when ``serve_first`` is set. Raises SegmentRejected when the
    bounce-selection MSE exceeds ``mse_threshold``.
    """
    if len(hits) < 2:
        raise NoBounceFound("need at least two hits")
    table_plane = Plane("z", table.height_z)
    pix = {int(f): p for f, p in zip(ball.frames, ball.pixels)}
    recon = TrajectoryReconstruction()

    for pair_index, (hit1, hit2) in enumerate(zip(hits, hits[1:])):
        h1, h2 = hit1.frame, hit2.frame
        if hit1.hand_world is None or hit2.hand_world is None:
            raise ValueError("hit events need hand_world anchors")
        candidates = bounce_candidates(ball, h1, h2)
        if serve_first and pair_index == 0:
            (ba, bb), total = select_serve_bounces(ball, h1, h2, candidates)
            bounce_frames = [ba, bb]
        else:
            b, total = select_bounce(ball, h1, h2, candidates)
            bounce_frames = [b]
        if mse_threshold is not None and total > mse_threshold:
            raise SegmentRejected(
                f"bounce-fit MSE {total:.3g} above threshold {mse_threshold:.3g}"
            )

        # The pixel-parabola split is robust but only frame-accurate; refine
        # each bounce over its immediate neighbors by total drag reprojection.
        best: Optional[tuple[float, list, list]] = None
        for combo in _bounce_combos(bounce_frames, h1, h2, pix):
            try:
                pieces, bounces, reproj = _fit_pair(
                    ball, camera, table_plane, fps, k_bounds,
                    h1, hit1.hand_world, h2, hit2.hand_world, combo, pix, total,
                )
            except (NoBounceFound, FitFailed):
                continue
            if best is None or reproj < best[0]:
                best = (reproj, pieces, bounces)
        if best is None:
            raise NoBounceFound("no viable bounce placement between hits")
        recon.pieces.extend(best[1])
        recon.bounces.extend(best[2])
    return recon


def _bounce_combos(
    bounce_frames: list[int], h1: int, h2: int, pix: dict
) -> list[list[int]]:
    """Per-bounce +/-1-frame alternatives, keeping frames valid and ordered."""
    options = []
    for bf in bounce_frames:
        opts = [
            f
            for f in (bf, bf - 1, bf + 1)
            if h1 + 2 <= f <= h2 - 2 and f in pix
        ]
        options.append(opts or [bf])
    combos = [[]]
    for opts in options:
        combos = [c + [f] for c in combos for f in opts]
    return [c for c in combos if all(a < b for a, b in zip(c, c[1:]))]


def _fit_pair(
    ball: BallTrack2D,
    camera: Camera,
    table_plane: Plane,
    fps: float,
    k_bounds: tuple[float, float],
    h1: int,
    p1: Vec3,
    h2: int,
    p2: Vec3,
    bounce_frames: list[int],
    pix: dict,
    total_mse: float,
) -> tuple[list[ReconstructedPiece], list[BounceEvent], float]:
    anchors: list[tuple[int, Vec3]] = [(h1, p1)]
    bounces = []
    for bf in bounce_frames:
        if bf not in pix:
            raise NoBounceFound(f"no ball sample at bounce frame {bf}")
        world = inverse_project_to_plane(camera, ImagePoint(*pix[bf]), table_plane)
        anchors.append((bf, world))
        bounces.append(BounceEvent(frame=bf, position=world))
    anchors.append((h2, p2))

    pieces = []
    reproj_total = 0.0
    for (f0, a0), (f1, a1) in zip(anchors, anchors[1:]):
        frames, pixels = ball.window(f0, f1)
        times = (frames - f0) / fps
        drag = fit_drag(a0, a1, (f1 - f0) / fps, times, pixels, camera, k_bounds)
        seg = StokesSegment(b0=a0, bT=a1, T=(f1 - f0) / fps, k=drag.k)
        reproj_total += drag.reproj_error
        pieces.append(
            ReconstructedPiece(
                start_frame=f0,
                end_frame=f1,
                segment=seg,
                drag=drag,
                parabola_mse=total_mse,
            )
        )
    return pieces, bounces, reproj_total
