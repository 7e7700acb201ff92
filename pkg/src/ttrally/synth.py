"""Synthetic rally, camera, and exchange generators.

Everything here produces ground truth paired with observations so the
reconstruction and anticipation stages can be scored against a known answer.
The generated world follows the same drag-trajectory model the reconstruction
fits, with hit and bounce anchors snapped to frame boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ball import GRAVITY, StokesSegment, stokes_position, stokes_velocity
from .camera import Camera, Extrinsics, ImagePoint, Intrinsics, project, project_many
from .core import Frame2D, Frame3D, TableGeometry, Vec3
from .errors import AssumptionViolation
from .pipeline import TrackFile, TrackHeader

LEG_VERTICALITY_TOL_PX = 0.1


# ---------------------------------------------------------------------------
# piecewise trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Chained drag pieces with linear extrapolation outside the support."""

    starts: list[float]  # absolute start time of each piece
    pieces: list[StokesSegment]

    @property
    def t_end(self) -> float:
        return self.starts[-1] + self.pieces[-1].T

    def _locate(self, t: float) -> tuple[int, float]:
        for i in range(len(self.pieces) - 1, -1, -1):
            if t >= self.starts[i] - 1e-12:
                return i, t - self.starts[i]
        return 0, t - self.starts[0]

    def position(self, t: float) -> Vec3:
        if t < self.starts[0]:
            v = stokes_velocity(self.pieces[0], 0.0)
            dt = t - self.starts[0]
            return self.pieces[0].b0 + v * dt
        if t > self.t_end:
            last = self.pieces[-1]
            v = stokes_velocity(last, last.T)
            return last.bT + v * (t - self.t_end)
        i, local = self._locate(t)
        local = min(max(local, 0.0), self.pieces[i].T)
        return stokes_position(self.pieces[i], local)

    def velocity(self, t: float) -> Vec3:
        if t < self.starts[0]:
            return stokes_velocity(self.pieces[0], 0.0)
        if t > self.t_end:
            last = self.pieces[-1]
            return stokes_velocity(last, last.T)
        i, local = self._locate(t)
        local = min(max(local, 0.0), self.pieces[i].T)
        return stokes_velocity(self.pieces[i], local)

    def x_crossing_time(self, x_plane: float) -> Optional[float]:
        """First time the (monotone-in-x) trajectory reaches x = x_plane."""
        for start, piece in zip(self.starts, self.pieces):
            x0, xt = piece.b0.x, piece.bT.x
            if (x0 - x_plane) * (xt - x_plane) > 0:
                continue
            if abs(xt - x0) < 1e-12:
                continue
            frac = (x_plane - x0) / (xt - x0)
            denom = -math.expm1(-piece.k * piece.T)
            arg = 1.0 - frac * denom
            if arg <= 0:
                continue
            return start - math.log(arg) / piece.k
        return None


def chain_segments(
    anchors: list[Vec3], durations: list[float], ks: list[float], t0: float = 0.0
) -> Trajectory:
    starts, pieces = [], []
    t = t0
    for a, b, dur, k in zip(anchors, anchors[1:], durations, ks):
        starts.append(t)
        pieces.append(StokesSegment(b0=a, bT=b, T=dur, k=k))
        t += dur
    return Trajectory(starts=starts, pieces=pieces)


# ---------------------------------------------------------------------------
# rally generation
# ---------------------------------------------------------------------------


@dataclass
class RallyTruth:
    table: TableGeometry
    fps: float
    frames: np.ndarray  # absolute frame indices, first hit .. last hit
    ball: np.ndarray  # (n, 3)
    hits: list[tuple[int, int, Vec3]]  # (frame, player, position)
    bounces: list[tuple[int, Vec3]]
    pieces: list[tuple[int, int, StokesSegment]]  # (start frame, end frame, seg)
    hands: list[np.ndarray]  # per player, (n, 3)
    roots: list[np.ndarray]  # per player, (n, 3)

    def joints(self, player: int, i: int) -> list[Vec3]:
        """Joint list [hip, racket hand, ankle_l, ankle_r] for frame slot i."""
        root = self.roots[player][i]
        hand = self.hands[player][i]
        return [
            Vec3(root[0], root[1], 0.95),
            Vec3(*hand),
            Vec3(root[0] - 0.08, root[1], 0.0),
            Vec3(root[0] + 0.08, root[1], 0.0),
        ]

    def mean_speed(self) -> float:
        d = np.linalg.norm(np.diff(self.ball, axis=0), axis=1)
        return float(np.mean(d) * self.fps)


def _ease(u: float) -> float:
    return 0.5 - 0.5 * math.cos(math.pi * min(max(u, 0.0), 1.0))


def generate_rally(
    rng: np.random.Generator,
    table: TableGeometry = TableGeometry(),
    fps: float = 60.0,
    n_hits: int = 4,
    speed_mean: float = 11.25,
    speed_sd: float = 3.0,
    k_range: tuple[float, float] = (0.05, 0.5),
    first_hitter: int = 0,
    serve_speed_range: tuple[float, float] = (4.5, 6.5),
) -> RallyTruth:
    """Ground-truth rally: drag pieces between frame-snapped hit/bounce anchors.

    The first hit pair is the serve and carries two bounces (one per half).
    """
    if n_hits < 2:
        raise ValueError("need at least two hits")
    hl, hw, h = table.half_length, table.half_width, table.height_z

    sides = [(-1 if (first_hitter + i) % 2 == 0 else 1) for i in range(n_hits)]
    hit_pos = [
        Vec3(
            s * (hl + 0.15 + 0.2 * rng.random()),
            float(rng.uniform(-0.55, 0.55)),
            float(rng.uniform(0.9, 1.25)),
        )
        for s in sides
    ]

    hit_frames = [0]
    pieces: list[tuple[int, int, StokesSegment]] = []
    bounces: list[tuple[int, Vec3]] = []

    for i in range(n_hits - 1):
        a, b = hit_pos[i], hit_pos[i + 1]
        bounce_xs = []
        if i == 0:
            bounce_xs.append(sides[i] * (0.35 + 0.4 * rng.random()))
        bounce_xs.append(sides[i + 1] * (0.35 + 0.4 * rng.random()))
        anchors = [a]
        for xb in bounce_xs:
            u = (a.x - xb) / (a.x - b.x)
            yb = a.y + u * (b.y - a.y) + float(rng.uniform(-0.08, 0.08))
            anchors.append(Vec3(xb, yb, h))
        anchors.append(b)

        chords = [
            (q - p).norm() for p, q in zip(anchors, anchors[1:])
        ]
        if i == 0:
            # Serves are slow enough for a visible arc between the two bounces.
            speed = float(rng.uniform(*serve_speed_range))
        else:
            speed = float(np.clip(rng.normal(speed_mean, speed_sd), 5.4, 18.3))
        total_t = sum(chords) / speed
        # Snap sub-piece boundaries to frames. Minimum piece lengths keep
        # consecutive hits at least 18 frames apart (hit detection suppresses
        # minima closer than 15 frames, and real inter-hit times are longer).
        min_frames = 6 if len(chords) == 3 else 9
        frame_counts = [
            max(min_frames, round(total_t * fps * c / sum(chords)))
            for c in chords
        ]
        f = hit_frames[-1]
        for (p, q), n_f in zip(zip(anchors, anchors[1:]), frame_counts):
            k = float(rng.uniform(*k_range))
            seg = StokesSegment(b0=p, bT=q, T=n_f / fps, k=k)
            pieces.append((f, f + n_f, seg))
            if q.z == h and q is not anchors[-1]:
                bounces.append((f + n_f, q))
            f += n_f
        hit_frames.append(f)

    frames = np.arange(hit_frames[0], hit_frames[-1] + 1)
    ball = np.zeros((len(frames), 3))
    for start, end, seg in pieces:
        for fr in range(start, end + 1):
            t = (fr - start) / fps
            ball[fr - frames[0]] = stokes_position(seg, min(t, seg.T)).as_array()

    # Racket hands: cosine easing between each player's own hit positions.
    hands = []
    roots = []
    for player in (0, 1):
        side = -1 if player == 0 else 1
        rest = np.array([side * (hl + 0.5), 0.0, 1.0])
        own = [
            (hit_frames[i], hit_pos[i].as_array())
            for i in range(n_hits)
            if (first_hitter + i) % 2 == player
        ]
        controls = (
            [(frames[0] - 1, rest)] + own + [(frames[-1] + 1, rest)]
        )
        hand = np.zeros((len(frames), 3))
        for j, fr in enumerate(frames):
            for (f0, p0), (f1, p1) in zip(controls, controls[1:]):
                if f0 <= fr <= f1:
                    u = _ease((fr - f0) / max(f1 - f0, 1))
                    hand[j] = p0 + u * (p1 - p0)
                    break
            else:
                hand[j] = controls[-1][1]
        hands.append(hand)
        root = np.column_stack(
            [
                np.full(len(frames), side * (hl + 0.55)),
                0.8 * hand[:, 1],
                np.zeros(len(frames)),
            ]
        )
        roots.append(root)

    return RallyTruth(
        table=table,
        fps=fps,
        frames=frames,
        ball=ball,
        hits=[(hit_frames[i], (first_hitter + i) % 2, hit_pos[i]) for i in range(n_hits)],
        bounces=bounces,
        pieces=pieces,
        hands=hands,
        roots=roots,
    )


# ---------------------------------------------------------------------------
# camera sampling and track emission
# ---------------------------------------------------------------------------


def tilt_camera(
    focal: float, cx: float, cy: float, y_c: float, z_c: float, tilt: float
) -> Camera:
    """Side-view camera translated along y/z only, rotated about x only."""
    st, ct = math.sin(tilt), math.cos(tilt)
    r = np.array([[1.0, 0.0, 0.0], [0.0, -st, -ct], [0.0, ct, -st]])
    center = np.array([0.0, y_c, z_c])
    return Camera(
        Intrinsics(fx=focal, fy=focal, cx=cx, cy=cy),
        Extrinsics(r=r, t=-r @ center),
    )


def leg_verticality(camera: Camera, table: TableGeometry) -> float:
    """Worst-case |du| between leg top and bottom over the four corners."""
    worst = 0.0
    for corner in table.surface_keypoints()[:4]:
        top = project(camera, corner)
        bottom = project(camera, Vec3(corner.x, corner.y, 0.0))
        worst = max(worst, abs(top.u - bottom.u))
    return worst


def check_camera_assumptions(camera: Camera, table: TableGeometry) -> None:
    """Raise AssumptionViolation unless the fixed-view assumptions hold."""
    center = camera.extrinsics.center()
    if abs(center[0]) > 1e-9:
        raise AssumptionViolation("camera translated along x")
    r = camera.extrinsics.r
    if max(abs(r[0, 1]), abs(r[0, 2]), abs(r[1, 0]), abs(r[2, 0])) > 1e-9:
        raise AssumptionViolation("camera rotation is not about the x axis")
    if leg_verticality(camera, table) > LEG_VERTICALITY_TOL_PX:
        raise AssumptionViolation("table legs not vertical in the image")


def sample_camera(
    rng: np.random.Generator,
    table: TableGeometry = TableGeometry(),
    width: int = 960,
    height: int = 540,
) -> Camera:
    """Random valid side-view camera with the table centered in frame."""
    for _ in range(100):
        y_c = float(rng.uniform(-9.0, -6.5))
        z_c = float(rng.uniform(1.6, 3.0))
        tilt = float(rng.uniform(0.0, 1.2e-3))
        focal = float(rng.uniform(850.0, 1100.0))
        cx = width / 2.0 + float(rng.uniform(-20, 20))
        cam = tilt_camera(focal, cx, 0.0, y_c, z_c, tilt)
        v_center = project(cam, Vec3(0.0, 0.0, table.height_z)).v
        cy = height / 2.0 - v_center + float(rng.uniform(-15, 15))
        cam = tilt_camera(focal, cx, cy, y_c, z_c, tilt)
        if leg_verticality(cam, table) <= LEG_VERTICALITY_TOL_PX:
            return cam
    raise AssumptionViolation("could not sample a valid camera")


def _in_bounds(px: np.ndarray, width: int, height: int, margin: float = 2.0) -> bool:
    return bool(
        np.all(px[..., 0] >= margin)
        and np.all(px[..., 0] <= width - margin)
        and np.all(px[..., 1] >= margin)
        and np.all(px[..., 1] <= height - margin)
    )


def emit_synthetic_track(
    rally: RallyTruth,
    camera: Camera,
    noise_px: float,
    rng: np.random.Generator,
    width: int = 960,
    height: int = 540,
    video_id: str = "",
    seed: Optional[int] = None,
) -> TrackFile:
    """Project a ground-truth rally into a track file with pixel noise.

    Pixel observations (ball, keypoints, base height, racket centroids,
    ankles) receive isotropic Gaussian noise of scale ``noise_px``; the
    camera-frame joints are passed through exactly, as an upstream 3D pose
    estimator would emit them.
    """
    check_camera_assumptions(camera, rally.table)
    table = rally.table

    kp_world = np.array([p.as_array() for p in table.surface_keypoints()])
    base_point = np.array([[0.0, -table.half_width, 0.0]])
    base_h_clean = project_many(camera, base_point)[0, 1]

    def noisy(px: np.ndarray) -> np.ndarray:
        if noise_px <= 0:
            return px
        return px + rng.normal(0.0, noise_px, size=px.shape)

    r = camera.extrinsics.r
    t = camera.extrinsics.t
    frames: list[Frame2D] = []
    for i, frame_index in enumerate(rally.frames):
        ball_px = project_many(camera, rally.ball[i : i + 1])
        kp_px = project_many(camera, kp_world)
        rk_px = project_many(
            camera, np.vstack([rally.hands[0][i], rally.hands[1][i]])
        )
        joints = [rally.joints(p, i) for p in (0, 1)]
        ankle_world = np.array(
            [
                [j.as_array() for j in joints[0][-2:]],
                [j.as_array() for j in joints[1][-2:]],
            ]
        )
        ankle_px = np.stack(
            [project_many(camera, ankle_world[p]) for p in (0, 1)]
        )
        clean = [ball_px, kp_px, rk_px, ankle_px]
        if not all(_in_bounds(c, width, height) for c in clean):
            raise AssumptionViolation("scene projects outside the image")
        ball_px = noisy(ball_px)
        kp_px = noisy(kp_px)
        rk_px = noisy(rk_px)
        ankle_px = noisy(ankle_px)
        base_h = float(noisy(np.array([[0.0, base_h_clean]]))[0, 1])

        joints_cam = [
            [Vec3.from_array(r @ j.as_array() + t) for j in joints[p]]
            for p in (0, 1)
        ]
        frames.append(
            Frame2D(
                frame_index=int(frame_index),
                ball_px=tuple(ball_px[0]),
                table_keypoints=[tuple(p) for p in kp_px],
                base_height_px=base_h,
                racket_centroids=[tuple(rk_px[0]), tuple(rk_px[1])],
                player_joints_cam=joints_cam,
                player_ankles_px=[
                    [tuple(a) for a in ankle_px[0]],
                    [tuple(a) for a in ankle_px[1]],
                ],
            )
        )
    return TrackFile(
        header=TrackHeader(
            fps=rally.fps,
            width=width,
            height=height,
            video_id=video_id,
            seed=seed,
            noise_px=noise_px,
        ),
        frames=frames,
    )


def generate_scene(
    rng: np.random.Generator,
    table: TableGeometry = TableGeometry(),
    fps: float = 60.0,
    n_hits: int = 4,
    noise_px: float = 0.0,
    width: int = 960,
    height: int = 540,
    speed_mean: float = 11.25,
    speed_sd: float = 3.0,
    k_range: tuple[float, float] = (0.05, 0.5),
    video_id: str = "",
    seed: Optional[int] = None,
    max_tries: int = 60,
) -> tuple[TrackFile, RallyTruth, Camera]:
    """Sample (rally, camera) pairs until the scene fits in the image."""
    last_error: Optional[Exception] = None
    for _ in range(max_tries):
        rally = generate_rally(
            rng, table, fps, n_hits, speed_mean, speed_sd, k_range
        )
        cam = sample_camera(rng, table, width, height)
        try:
            track = emit_synthetic_track(
                rally, cam, noise_px, rng, width, height, video_id, seed
            )
            return track, rally, cam
        except AssumptionViolation as exc:
            last_error = exc
    raise AssumptionViolation(f"no valid scene after {max_tries} tries: {last_error}")


def corrupt_track(
    track: TrackFile, rng: np.random.Generator, drop_prob: float
) -> TrackFile:
    """Drop player joints in random frames to emulate tracking failures."""
    frames = []
    for f in track.frames:
        f2 = Frame2D(
            frame_index=f.frame_index,
            ball_px=f.ball_px,
            table_keypoints=list(f.table_keypoints),
            base_height_px=f.base_height_px,
            racket_centroids=list(f.racket_centroids),
            player_joints_cam=list(f.player_joints_cam),
            player_ankles_px=list(f.player_ankles_px),
        )
        if rng.random() < drop_prob:
            f2.player_joints_cam = [None, f2.player_joints_cam[1]]
        frames.append(f2)
    return TrackFile(header=track.header, frames=frames)


# ---------------------------------------------------------------------------
# exchange generation (anticipation / control oracle)
# ---------------------------------------------------------------------------


@dataclass
class ExchangeConfig:
    table: TableGeometry = field(default_factory=TableGeometry)
    right_prob: float = 0.5  # probability the opponent sets up on +y
    aim_gain: float = 0.9  # crossing y per unit of opponent root y
    aim_noise: float = 0.15
    speed_mean: float = 12.0
    speed_sd: float = 0.6
    ctx_duration: float = 0.6
    ctx_dt: float = 0.02


@dataclass
class ExchangeSample:
    """One synthetic exchange: context before the opponent's hit plus truth.

    Time zero is the opponent's hit; context times are negative.
    """

    exchange_id: int
    table: TableGeometry
    context_times: np.ndarray
    context: list[Frame3D]
    incoming: Trajectory
    outgoing: Trajectory
    hit_pos: Vec3
    crossing_time: float
    crossing_pos: Vec3
    crossing_vel: Vec3
    opp_root_y: float

    def truth_at(self, t: float) -> Vec3:
        return self.outgoing.position(t) if t >= 0 else self.incoming.position(t)

    def context_until(self, t_rel_hit: float):
        """Context frames with time <= t_rel_hit (a negative lead time)."""
        mask = self.context_times <= t_rel_hit + 1e-9
        return (
            self.context_times[mask],
            [f for f, m in zip(self.context, mask) if m],
        )


def construct_return_shot(
    table: TableGeometry,
    hit_pos: Vec3,
    x_bounce: float,
    y_cross: float,
    z_cross: float,
    speed: float,
    k1: float,
    k2: float,
    x_overrun: float = 1.0,
) -> tuple[Trajectory, float]:
    """Build an opponent return that crosses the ego hitting plane.

    The shot travels hit -> bounce (on the ego half) -> a virtual end anchor
    ``x_overrun`` meters beyond the plane, constructed so the trajectory
    passes through (-length/2, y_cross, z_cross). Keeping the supported piece
    well past the plane means post-crossing queries follow the drag curve
    instead of a linear tail. Returns (trajectory, crossing time).
    """
    hl, h = table.half_length, table.height_z
    x_plane = -hl
    x_end = -hl - x_overrun

    u_plane = (hit_pos.x - x_plane) / (hit_pos.x - x_end)
    y_end = hit_pos.y + (y_cross - hit_pos.y) / u_plane
    u_b = (hit_pos.x - x_bounce) / (hit_pos.x - x_end)
    y_b = hit_pos.y + u_b * (y_end - hit_pos.y)
    bounce = Vec3(x_bounce, y_b, h)

    end_guess = Vec3(x_end, y_end, z_cross)
    l1 = (bounce - hit_pos).norm()
    l2 = (end_guess - bounce).norm()
    total_t = (l1 + l2) / speed
    t1 = total_t * l1 / (l1 + l2)
    t2 = total_t - t1

    # Solve the virtual end height so the plane crossing sits at z_cross.
    denom = -math.expm1(-k2 * t2)
    frac_needed = (x_plane - bounce.x) / (x_end - bounce.x)
    tc_local = -math.log(1.0 - frac_needed * denom) / k2
    frac_c = -math.expm1(-k2 * tc_local) / denom
    gk = GRAVITY / k2
    z_end = h - gk * t2 + (z_cross - h + gk * tc_local) / frac_c

    traj = chain_segments(
        [hit_pos, bounce, Vec3(x_end, y_end, z_end)], [t1, t2], [k1, k2]
    )
    return traj, t1 + tc_local


def generate_exchange(
    rng: np.random.Generator, exchange_id: int, cfg: ExchangeConfig = ExchangeConfig()
) -> ExchangeSample:
    """Sample one exchange with an intent-correlated opponent return."""
    table = cfg.table
    hl, h = table.half_length, table.height_z

    side = 1.0 if rng.random() < cfg.right_prob else -1.0
    opp_root_y = float(np.clip(side * 0.5 + rng.normal(0.0, 0.12), -0.8, 0.8))

    hit_pos = Vec3(
        hl + 0.25 + 0.15 * float(rng.random()),
        opp_root_y + float(rng.normal(0.0, 0.05)),
        float(rng.uniform(0.95, 1.2)),
    )

    # Incoming ball: previous ego hit, bounce on the opponent half, contact.
    ego_hit = Vec3(
        -hl - 0.3, float(rng.uniform(-0.35, 0.35)), float(rng.uniform(0.95, 1.15))
    )
    xb_in = float(rng.uniform(0.45, 1.0))
    u = (ego_hit.x - xb_in) / (ego_hit.x - hit_pos.x)
    bounce_in = Vec3(xb_in, ego_hit.y + u * (hit_pos.y - ego_hit.y), h)
    speed_in = float(np.clip(rng.normal(10.0, 1.5), 7.0, 14.0))
    l1 = (bounce_in - ego_hit).norm()
    l2 = (hit_pos - bounce_in).norm()
    t_total = (l1 + l2) / speed_in
    t1 = t_total * l1 / (l1 + l2)
    incoming = chain_segments(
        [ego_hit, bounce_in, hit_pos],
        [t1, t_total - t1],
        [float(rng.uniform(0.1, 0.3)), float(rng.uniform(0.1, 0.3))],
        t0=-t_total,
    )

    y_cross = float(
        np.clip(cfg.aim_gain * opp_root_y + rng.normal(0.0, cfg.aim_noise), -1.05, 1.05)
    )
    z_cross = float(rng.uniform(0.92, 1.18))
    x_bounce = -(0.45 + 0.45 * float(rng.random()))
    speed = float(np.clip(rng.normal(cfg.speed_mean, cfg.speed_sd), 7.5, 16.5))
    outgoing, t_cross = construct_return_shot(
        table,
        hit_pos,
        x_bounce,
        y_cross,
        z_cross,
        speed,
        float(rng.uniform(0.1, 0.3)),
        float(rng.uniform(0.1, 0.3)),
    )

    # Context frames strictly before the hit.
    n_ctx = int(round(cfg.ctx_duration / cfg.ctx_dt))
    times = -cfg.ctx_dt * np.arange(n_ctx, 0, -1)
    opp_rest = Vec3(hl + 0.6, opp_root_y, 1.0)
    frames = []
    for j, t in enumerate(times):
        ball = incoming.position(float(t))
        approach = _ease(1.0 + float(t) / cfg.ctx_duration)
        hand = opp_rest + (hit_pos - opp_rest) * approach
        root_x = hl + 0.55
        joints = [
            Vec3(root_x, opp_root_y, 0.95),
            hand,
            Vec3(root_x - 0.08, opp_root_y, 0.0),
            Vec3(root_x + 0.08, opp_root_y, 0.0),
        ]
        frames.append(
            Frame3D(
                frame_index=j,
                ball_world=ball,
                opponent_joints_world=joints,
                ego_root_world=Vec3(-hl - 0.5, 0.0, 0.0),
            )
        )

    return ExchangeSample(
        exchange_id=exchange_id,
        table=table,
        context_times=times,
        context=frames,
        incoming=incoming,
        outgoing=outgoing,
        hit_pos=hit_pos,
        crossing_time=t_cross,
        crossing_pos=outgoing.position(t_cross),
        crossing_vel=outgoing.velocity(t_cross),
        opp_root_y=opp_root_y,
    )


def generate_exchanges(
    seed: int, n: int, cfg: ExchangeConfig = ExchangeConfig(), id_offset: int = 0
) -> list[ExchangeSample]:
    rng = np.random.default_rng(seed)
    return [generate_exchange(rng, id_offset + i, cfg) for i in range(n)]
