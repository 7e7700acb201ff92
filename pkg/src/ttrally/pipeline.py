"""Track-file ingestion, full-point reconstruction, filtering, persistence.

File formats are line-delimited, self-describing text: a one-line header
carrying the schema version and video metadata, then one named-field record
per frame. Absent detections are written as ``-``. The formats are
streamable, diff-able, and language neutral.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ball as ball_mod
from .ball import (
    BallTrack2D,
    BounceEvent,
    DragFit,
    HitEvent,
    ReconstructedPiece,
    StokesSegment,
    detect_hits,
    reconstruct_trajectory,
)
from .camera import (
    Camera,
    Extrinsics,
    ImagePoint,
    Intrinsics,
    calibrate,
    ground_projections,
    position_player,
    reprojection_rms,
)
from .core import RACKET_HAND_JOINT, Frame2D, Frame3D, TableGeometry, Vec3
from .errors import (
    NotEnoughHits,
    ParseError,
    SchemaError,
    VersionError,
)

TRACK_VERSION = "v1"
RECON_VERSION = "recon-v1"


@dataclass
class TrackHeader:
    fps: float
    width: int
    height: int
    video_id: str = ""
    seed: Optional[int] = None
    noise_px: float = 0.0


@dataclass
class TrackFile:
    header: TrackHeader
    frames: list[Frame2D]

    def completeness(self) -> list[bool]:
        return [f.is_complete() for f in self.frames]


@dataclass
class PipelineConfig:
    tau_hit: float = 30.0
    min_gap: int = 15
    serve_first: bool = True
    mse_threshold: Optional[float] = None
    k_bounds: tuple[float, float] = (ball_mod.K_MIN_DEFAULT, ball_mod.K_MAX_DEFAULT)


@dataclass
class PointFrame:
    """World-frame reconstruction of a single frame (both players)."""

    frame_index: int
    ball: Vec3
    roots: list[Vec3]
    joints: list[list[Vec3]]


@dataclass
class ReconstructedPoint:
    point_id: int
    frames: list[PointFrame]
    hits: list[HitEvent]
    bounces: list[BounceEvent]
    pieces: list[ReconstructedPiece]
    partition: str = ""
    entity_complete: bool = True
    complete: bool = True  # False when the last segment could not be recovered

    def frame3d_for_ego(self, ego: int) -> list[Frame3D]:
        """Exchange view: opponent joints, ego root only, ball."""
        opp = 1 - ego
        return [
            Frame3D(
                frame_index=f.frame_index,
                ball_world=f.ball,
                opponent_joints_world=f.joints[opp],
                ego_root_world=f.roots[ego],
            )
            for f in self.frames
        ]


@dataclass
class Reconstruction:
    fps: float
    camera: Camera
    camera_rms: float
    table: TableGeometry
    points: list[ReconstructedPoint]
    seed: Optional[int] = None


# ---------------------------------------------------------------------------
# track file serialization
# ---------------------------------------------------------------------------


def _fmt_px(p: Optional[tuple[float, float]]) -> str:
    return "-" if p is None else f"{float(p[0])!r},{float(p[1])!r}"


def _fmt_vecs(vs) -> str:
    if vs is None:
        return "-"
    return ";".join(f"{float(v.x)!r},{float(v.y)!r},{float(v.z)!r}" for v in vs)


def _fmt_pxs(ps) -> str:
    if ps is None:
        return "-"
    return ";".join(f"{float(p[0])!r},{float(p[1])!r}" for p in ps)


def write_track(track: TrackFile, path: str) -> None:
    h = track.header
    parts = [TRACK_VERSION, f"fps={h.fps!r}", f"w={h.width}", f"h={h.height}"]
    if h.video_id:
        parts.append(f"id={h.video_id}")
    if h.seed is not None:
        parts.append(f"seed={h.seed}")
    parts.append(f"noise_px={h.noise_px!r}")
    lines = [" ".join(parts)]
    for f in track.frames:
        kps = " ".join(
            f"kp{i + 1}={_fmt_px(kp)}" for i, kp in enumerate(f.table_keypoints)
        )
        lines.append(
            f"frame={f.frame_index} ball={_fmt_px(f.ball_px)} {kps} "
            f"base_h={float(f.base_height_px)!r} "
            f"rk0={_fmt_px(f.racket_centroids[0])} "
            f"rk1={_fmt_px(f.racket_centroids[1])} "
            f"joints0={_fmt_vecs(f.player_joints_cam[0])} "
            f"joints1={_fmt_vecs(f.player_joints_cam[1])} "
            f"ankles0={_fmt_pxs(f.player_ankles_px[0])} "
            f"ankles1={_fmt_pxs(f.player_ankles_px[1])}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_fields(line: str, lineno: int) -> dict[str, str]:
    fields = {}
    for token in line.split():
        if "=" not in token:
            raise ParseError(lineno, f"malformed token {token!r}")
        key, _, value = token.partition("=")
        fields[key] = value
    return fields


def _parse_px(s: str, lineno: int) -> Optional[tuple[float, float]]:
    if s == "-":
        return None
    try:
        u, v = s.split(",")
        return (float(u), float(v))
    except ValueError as exc:
        raise ParseError(lineno, f"bad pixel {s!r}") from exc


def _parse_vecs(s: str, lineno: int) -> Optional[list[Vec3]]:
    if s == "-":
        return None
    try:
        out = []
        for part in s.split(";"):
            x, y, z = part.split(",")
            out.append(Vec3(float(x), float(y), float(z)))
        return out
    except ValueError as exc:
        raise ParseError(lineno, f"bad vector list {s!r}") from exc


def _parse_pxs(s: str, lineno: int) -> Optional[list[tuple[float, float]]]:
    if s == "-":
        return None
    try:
        out = []
        for part in s.split(";"):
            u, v = part.split(",")
            out.append((float(u), float(v)))
        return out
    except ValueError as exc:
        raise ParseError(lineno, f"bad pixel list {s!r}") from exc


def load_track(path: str) -> TrackFile:
    """Parse and validate a track file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaError("empty track file")
    head = lines[0].split()
    if not head or head[0] != TRACK_VERSION:
        raise VersionError(f"unknown track version {head[0] if head else '?'}")
    meta = _parse_fields(" ".join(head[1:]), 1)
    if "fps" not in meta:
        raise SchemaError("track header missing fps")
    if "w" not in meta or "h" not in meta:
        raise SchemaError("track header missing image dimensions")
    header = TrackHeader(
        fps=float(meta["fps"]),
        width=int(meta["w"]),
        height=int(meta["h"]),
        video_id=meta.get("id", ""),
        seed=int(meta["seed"]) if "seed" in meta else None,
        noise_px=float(meta.get("noise_px", "0.0")),
    )
    if header.fps <= 0:
        raise SchemaError("fps must be positive")

    frames: list[Frame2D] = []
    last_index = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        f = _parse_fields(line, lineno)
        required = ["frame", "ball", "base_h", "rk0", "rk1", "joints0",
                    "joints1", "ankles0", "ankles1"] + [f"kp{i}" for i in range(1, 7)]
        for key in required:
            if key not in f:
                raise ParseError(lineno, f"missing field {key!r}")
        try:
            idx = int(f["frame"])
            base_h = float(f["base_h"])
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from exc
        if last_index is not None and idx <= last_index:
            raise ParseError(lineno, "frame indices must be increasing")
        last_index = idx
        kps = [_parse_px(f[f"kp{i}"], lineno) for i in range(1, 7)]
        if any(kp is None for kp in kps):
            kps_list = [kp for kp in kps if kp is not None]
        else:
            kps_list = kps  # type: ignore[assignment]
        frames.append(
            Frame2D(
                frame_index=idx,
                ball_px=_parse_px(f["ball"], lineno),
                table_keypoints=kps_list,  # type: ignore[arg-type]
                base_height_px=base_h,
                racket_centroids=[
                    _parse_px(f["rk0"], lineno),
                    _parse_px(f["rk1"], lineno),
                ],
                player_joints_cam=[
                    _parse_vecs(f["joints0"], lineno),
                    _parse_vecs(f["joints1"], lineno),
                ],
                player_ankles_px=[
                    _parse_pxs(f["ankles0"], lineno),
                    _parse_pxs(f["ankles1"], lineno),
                ],
            )
        )
    return TrackFile(header=header, frames=frames)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def calibrate_from_track(
    track: TrackFile, table: TableGeometry
) -> tuple[Camera, float]:
    """Calibrate once per point from median keypoints over its frames.

    The camera is static, so per-coordinate medians resist detector jitter
    better than any single frame.
    """
    kp_stack = np.array(
        [
            [list(kp) for kp in f.table_keypoints]
            for f in track.frames
            if len(f.table_keypoints) == 6
        ]
    )
    if len(kp_stack) == 0:
        raise SchemaError("no frames with six keypoints")
    med = np.median(kp_stack, axis=0)
    base_h = float(np.median([f.base_height_px for f in track.frames]))
    keypoints = [ImagePoint(u, v) for u, v in med]
    grounds = ground_projections(keypoints, base_h)
    world = table.surface_keypoints() + table.corner_ground_points()
    pixels = keypoints + grounds
    return calibrate(list(zip(world, pixels)))


def reconstruct_point(
    track: TrackFile,
    table: TableGeometry = TableGeometry(),
    config: PipelineConfig = PipelineConfig(),
    point_id: int = 0,
    partition: str = "",
) -> tuple[Reconstruction, ReconstructedPoint]:
    """Full reconstruction of one point from a validated track file."""
    camera, rms = calibrate_from_track(track, table)
    fps = track.header.fps
    complete_flags = track.completeness()

    ball_frames = [f.frame_index for f in track.frames if f.ball_px is not None]
    ball_pixels = [f.ball_px for f in track.frames if f.ball_px is not None]
    if len(ball_frames) < 6:
        raise NotEnoughHits("too few ball detections")
    track2d = BallTrack2D(np.array(ball_frames), np.array(ball_pixels))

    rackets: list[dict[int, tuple[float, float]]] = [{}, {}]
    for f in track.frames:
        for p in (0, 1):
            if f.racket_centroids[p] is not None:
                rackets[p][f.frame_index] = f.racket_centroids[p]

    hits = detect_hits(
        track2d, rackets, tau_hit=config.tau_hit, min_gap=config.min_gap
    )
    if len(hits) < 2:
        raise NotEnoughHits(f"detected {len(hits)} hits")

    # Position both players in every frame that carries them.
    positioned: dict[int, tuple[list[Vec3], list[list[Vec3]]]] = {}
    for f in track.frames:
        roots, joints = [], []
        ok = True
        for p in (0, 1):
            if f.player_joints_cam[p] is None or f.player_ankles_px[p] is None:
                ok = False
                break
            ankles = [ImagePoint(*a) for a in f.player_ankles_px[p]]
            root, world_joints = position_player(
                camera, ankles, f.player_joints_cam[p]
            )
            roots.append(root)
            joints.append(world_joints)
        if ok:
            positioned[f.frame_index] = (roots, joints)

    for hit in hits:
        # Prefer the hit frame itself; tolerate a short tracking dropout by
        # borrowing the hand from the nearest positioned neighbor frame.
        for offset in (0, -1, 1, -2, 2, -3, 3):
            frame = hit.frame + offset
            if frame in positioned:
                _, joints = positioned[frame]
                hit.hand_world = joints[hit.player][RACKET_HAND_JOINT]
                break
    if any(h.hand_world is None for h in hits):
        raise NotEnoughHits("hit frame lacks positioned player joints")

    recon_traj = reconstruct_trajectory(
        track2d,
        hits,
        camera,
        table,
        fps,
        serve_first=config.serve_first,
        mse_threshold=config.mse_threshold,
        k_bounds=config.k_bounds,
    )

    frames_out: list[PointFrame] = []
    for f in track.frames:
        if f.frame_index not in positioned:
            continue
        ball_world = recon_traj.ball_at_frame(f.frame_index, fps)
        if ball_world is None:
            continue
        roots, joints = positioned[f.frame_index]
        frames_out.append(
            PointFrame(
                frame_index=f.frame_index,
                ball=ball_world,
                roots=roots,
                joints=joints,
            )
        )

    point = ReconstructedPoint(
        point_id=point_id,
        frames=frames_out,
        hits=list(hits),
        bounces=recon_traj.bounces,
        pieces=recon_traj.pieces,
        partition=partition,
        entity_complete=all(complete_flags),
    )
    recon = Reconstruction(
        fps=fps,
        camera=camera,
        camera_rms=rms,
        table=table,
        points=[point],
        seed=track.header.seed,
    )
    return recon, point


@dataclass
class RejectionReport:
    counts: dict[str, int] = field(default_factory=dict)

    def add(self, reason: str) -> None:
        self.counts[reason] = self.counts.get(reason, 0) + 1

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def filter_points(
    points: Sequence[ReconstructedPoint],
    mse_threshold: float,
    require_complete_entities: bool = True,
) -> tuple[list[ReconstructedPoint], RejectionReport]:
    """Drop points with missing entities or over-threshold bounce-fit MSE."""
    kept: list[ReconstructedPoint] = []
    report = RejectionReport()
    for point in points:
        if require_complete_entities and not point.entity_complete:
            report.add("MissingEntity")
            continue
        if any(piece.parabola_mse > mse_threshold for piece in point.pieces):
            report.add("HighMSE")
            continue
        kept.append(point)
    return kept, report


# ---------------------------------------------------------------------------
# reconstruction file serialization
# ---------------------------------------------------------------------------


def _v3(v: Vec3) -> str:
    return f"{float(v.x)!r},{float(v.y)!r},{float(v.z)!r}"


def _p3(s: str, lineno: int) -> Vec3:
    try:
        x, y, z = s.split(",")
        return Vec3(float(x), float(y), float(z))
    except ValueError as exc:
        raise ParseError(lineno, f"bad vec3 {s!r}") from exc


def write_reconstruction(recon: Reconstruction, path: str) -> None:
    lines = [f"{RECON_VERSION} fps={recon.fps!r}"
             + (f" seed={recon.seed}" if recon.seed is not None else "")]
    k = recon.camera.intrinsics
    lines.append(
        f"camera fx={float(k.fx)!r} fy={float(k.fy)!r} "
        f"cx={float(k.cx)!r} cy={float(k.cy)!r} "
        f"rms={float(recon.camera_rms)!r}"
    )
    lines.append("rot " + " ".join(f"{float(x)!r}" for x in recon.camera.extrinsics.r.ravel()))
    lines.append("trans " + " ".join(f"{float(x)!r}" for x in recon.camera.extrinsics.t))
    t = recon.table
    lines.append(
        f"table length={t.length_x!r} width={t.width_y!r} height={t.height_z!r}"
    )
    for point in recon.points:
        lines.append(
            f"point id={point.point_id} partition={point.partition or '-'} "
            f"entity_complete={int(point.entity_complete)} "
            f"complete={int(point.complete)}"
        )
        for hit in point.hits:
            lines.append(
                f"hit frame={int(hit.frame)} player={int(hit.player)} pos={_v3(hit.hand_world)}"
            )
        for bounce in point.bounces:
            lines.append(f"bounce frame={int(bounce.frame)} pos={_v3(bounce.position)}")
        for piece in point.pieces:
            seg = piece.segment
            lines.append(
                f"piece start={int(piece.start_frame)} end={int(piece.end_frame)} "
                f"T={float(seg.T)!r} k={float(seg.k)!r} "
                f"reproj={float(piece.drag.reproj_error)!r} "
                f"warn={int(piece.drag.boundary_warning)} "
                f"mse={float(piece.parabola_mse)!r} b0={_v3(seg.b0)} bT={_v3(seg.bT)}"
            )
        for frame in point.frames:
            lines.append(
                f"frame idx={int(frame.frame_index)} ball={_v3(frame.ball)} "
                f"root0={_v3(frame.roots[0])} root1={_v3(frame.roots[1])} "
                f"joints0={';'.join(_v3(j) for j in frame.joints[0])} "
                f"joints1={';'.join(_v3(j) for j in frame.joints[1])}"
            )
        lines.append("endpoint")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_reconstruction(path: str) -> Reconstruction:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaError("empty reconstruction file")
    head = lines[0].split()
    if not head or head[0] != RECON_VERSION:
        raise VersionError(
            f"unknown reconstruction version {head[0] if head else '?'}"
        )
    meta = _parse_fields(" ".join(head[1:]), 1)
    if "fps" not in meta:
        raise SchemaError("reconstruction header missing fps")
    fps = float(meta["fps"])
    seed = int(meta["seed"]) if "seed" in meta else None

    camera = None
    camera_rms = 0.0
    rot = None
    trans = None
    table = None
    cam_fields = None
    points: list[ReconstructedPoint] = []
    current: Optional[ReconstructedPoint] = None

    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tag, _, rest = line.partition(" ")
        if tag == "camera":
            cam_fields = _parse_fields(rest, lineno)
            camera_rms = float(cam_fields["rms"])
        elif tag == "rot":
            rot = np.array([float(x) for x in rest.split()]).reshape(3, 3)
        elif tag == "trans":
            trans = np.array([float(x) for x in rest.split()])
        elif tag == "table":
            f = _parse_fields(rest, lineno)
            table = TableGeometry(
                length_x=float(f["length"]),
                width_y=float(f["width"]),
                height_z=float(f["height"]),
            )
        elif tag == "point":
            f = _parse_fields(rest, lineno)
            current = ReconstructedPoint(
                point_id=int(f["id"]),
                frames=[],
                hits=[],
                bounces=[],
                pieces=[],
                partition="" if f["partition"] == "-" else f["partition"],
                entity_complete=bool(int(f["entity_complete"])),
                complete=bool(int(f["complete"])),
            )
            points.append(current)
        elif tag == "hit":
            f = _parse_fields(rest, lineno)
            current.hits.append(
                HitEvent(
                    frame=int(f["frame"]),
                    player=int(f["player"]),
                    hand_world=_p3(f["pos"], lineno),
                )
            )
        elif tag == "bounce":
            f = _parse_fields(rest, lineno)
            current.bounces.append(
                BounceEvent(frame=int(f["frame"]), position=_p3(f["pos"], lineno))
            )
        elif tag == "piece":
            f = _parse_fields(rest, lineno)
            seg = StokesSegment(
                b0=_p3(f["b0"], lineno),
                bT=_p3(f["bT"], lineno),
                T=float(f["T"]),
                k=float(f["k"]),
            )
            current.pieces.append(
                ReconstructedPiece(
                    start_frame=int(f["start"]),
                    end_frame=int(f["end"]),
                    segment=seg,
                    drag=DragFit(
                        k=float(f["k"]),
                        reproj_error=float(f["reproj"]),
                        boundary_warning=bool(int(f["warn"])),
                    ),
                    parabola_mse=float(f["mse"]),
                )
            )
        elif tag == "frame":
            f = _parse_fields(rest, lineno)
            current.frames.append(
                PointFrame(
                    frame_index=int(f["idx"]),
                    ball=_p3(f["ball"], lineno),
                    roots=[_p3(f["root0"], lineno), _p3(f["root1"], lineno)],
                    joints=[
                        [_p3(s, lineno) for s in f["joints0"].split(";")],
                        [_p3(s, lineno) for s in f["joints1"].split(";")],
                    ],
                )
            )
        elif tag == "endpoint":
            current = None
        else:
            raise ParseError(lineno, f"unknown record tag {tag!r}")

    if cam_fields is None or rot is None or trans is None:
        raise SchemaError("reconstruction file missing camera block")
    camera = Camera(
        Intrinsics(
            fx=float(cam_fields["fx"]),
            fy=float(cam_fields["fy"]),
            cx=float(cam_fields["cx"]),
            cy=float(cam_fields["cy"]),
        ),
        Extrinsics(r=rot, t=trans),
    )
    if table is None:
        raise SchemaError("reconstruction file missing table block")
    return Reconstruction(
        fps=fps,
        camera=camera,
        camera_rms=camera_rms,
        table=table,
        points=points,
        seed=seed,
    )
