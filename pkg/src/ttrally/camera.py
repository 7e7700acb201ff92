"""Pinhole camera model, ground projections, and 10-point calibration.

Image convention: u grows to the right, v grows upward, origin at the
bottom-left of the frame (so "below the table" means smaller v, and the
table base line sits at v = h_base under the table surface pixels). The
camera frame is the usual right-handed x-right / y-down / z-forward triad;
the v-up image axis is absorbed into the projection as v = cy - fy * Y / Z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import rq
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .core import ANKLE_JOINTS, Vec3
from .errors import (
    BehindCamera,
    CalibrationDegenerate,
    CalibrationFailed,
    NoIntersection,
    NoVanishingPoint,
)


@dataclass(frozen=True)
class ImagePoint:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class Plane:
    """Axis-aligned world plane {p : p[axis] == offset}; axis in 'xyz'."""

    axis: str
    offset: float

    @property
    def index(self) -> int:
        return "xyz".index(self.axis)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass
class Extrinsics:
    r: np.ndarray  # 3x3 rotation, world -> camera
    t: np.ndarray  # translation, camera = r @ world + t

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    def orthonormality_error(self) -> float:
        return float(np.abs(self.r.T @ self.r - np.eye(3)).max())

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r.T @ self.t


@dataclass
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics

    def matrix(self) -> np.ndarray:
        """3x4 projection matrix in the native (v-up) image convention."""
        k = self.intrinsics
        kmat = np.array(
            [[k.fx, 0.0, k.cx], [0.0, -k.fy, k.cy], [0.0, 0.0, 1.0]]
        )
        rt = np.hstack([self.extrinsics.r, self.extrinsics.t.reshape(3, 1)])
        return kmat @ rt


def project(camera: Camera, p: Vec3) -> ImagePoint:
    """Pinhole projection with no distortion."""
    cam = camera.extrinsics.r @ p.as_array() + camera.extrinsics.t
    if cam[2] <= 0:
        raise BehindCamera(f"depth {cam[2]:.6g} <= 0")
    k = camera.intrinsics
    return ImagePoint(
        k.cx + k.fx * cam[0] / cam[2],
        k.cy - k.fy * cam[1] / cam[2],
    )


def project_many(camera: Camera, pts: np.ndarray) -> np.ndarray:
    """Vectorized projection of an (n, 3) world array to (n, 2) pixels."""
    cam = pts @ camera.extrinsics.r.T + camera.extrinsics.t
    if np.any(cam[:, 2] <= 0):
        raise BehindCamera("point(s) with non-positive depth")
    k = camera.intrinsics
    return np.column_stack(
        [
            k.cx + k.fx * cam[:, 0] / cam[:, 2],
            k.cy - k.fy * cam[:, 1] / cam[:, 2],
        ]
    )


def pixel_ray(camera: Camera, q: ImagePoint) -> tuple[np.ndarray, np.ndarray]:
    """World-frame (origin, direction) of the viewing ray through pixel q."""
    k = camera.intrinsics
    dir_cam = np.array([(q.u - k.cx) / k.fx, (k.cy - q.v) / k.fy, 1.0])
    direction = camera.extrinsics.r.T @ dir_cam
    return camera.extrinsics.center(), direction


def inverse_project_to_plane(camera: Camera, q: ImagePoint, plane: Plane) -> Vec3:
    """Intersect the viewing ray through q with an axis-aligned world plane."""
    origin, direction = pixel_ray(camera, q)
    i = plane.index
    denom = direction[i]
    if abs(denom) < 1e-12 * np.linalg.norm(direction):
        raise NoIntersection(f"ray parallel to plane {plane.axis}={plane.offset}")
    s = (plane.offset - origin[i]) / denom
    if s <= 0:
        raise NoIntersection("plane intersection behind the camera")
    return Vec3.from_array(origin + s * direction)


Line = tuple[ImagePoint, ImagePoint]


def _homogeneous_line(line: Line) -> np.ndarray:
    a = np.array([line[0].u, line[0].v, 1.0])
    b = np.array([line[1].u, line[1].v, 1.0])
    return np.cross(a, b)


def vanishing_point(l1: Line, l2: Line) -> ImagePoint:
    """Intersection of two image lines, each given by two points."""
    p = np.cross(_homogeneous_line(l1), _homogeneous_line(l2))
    scale = max(abs(p[0]), abs(p[1]), 1.0)
    if abs(p[2]) < 1e-9 * scale:
        raise NoVanishingPoint("lines are parallel in the image")
    return ImagePoint(p[0] / p[2], p[1] / p[2])


def ground_projections(
    keypoints: list[ImagePoint], h_base: float
) -> list[ImagePoint]:
    """Drop the four table corners to the ground line at v = h_base.

    The near corners p1, p2 drop straight down to the base line. The far
    corners p3, p4 drop down to the lines joining g1, g2 with the vanishing
    point of the table's two depth edges (p1->p3 and p2->p4).
    """
    if len(keypoints) < 4:
        raise ValueError("need the four corner keypoints")
    p1, p2, p3, p4 = keypoints[:4]
    try:
        vp = vanishing_point((p1, p3), (p2, p4))
    except NoVanishingPoint as exc:
        raise CalibrationDegenerate("depth edges parallel (head-on camera)") from exc

    g1 = ImagePoint(p1.u, h_base)
    g2 = ImagePoint(p2.u, h_base)

    def drop_far(p_far: ImagePoint, g_near: ImagePoint) -> ImagePoint:
        du = vp.u - g_near.u
        if abs(du) < 1e-9:
            raise CalibrationDegenerate("ground line is vertical in the image")
        v = g_near.v + (p_far.u - g_near.u) * (vp.v - g_near.v) / du
        return ImagePoint(p_far.u, v)

    return [g1, g2, drop_far(p3, g1), drop_far(p4, g2)]


def _decompose_projection(p_native: np.ndarray) -> tuple[Intrinsics, Extrinsics]:
    """Split a native-convention 3x4 projection matrix into K, R, t."""
    # Flip the v axis to the standard y-down convention before RQ.
    m = np.diag([1.0, -1.0, 1.0]) @ p_native
    a3 = m[:, :3]
    det = np.linalg.det(a3)
    if abs(det) < 1e-12:
        raise CalibrationFailed("projection matrix is singular")
    if det < 0:
        m = -m
        a3 = -a3
    k, r = rq(a3)
    signs = np.sign(np.diag(k))
    if np.any(signs == 0):
        raise CalibrationFailed("degenerate intrinsic matrix")
    k = k @ np.diag(signs)
    r = np.diag(signs) @ r
    t = np.linalg.solve(k, m[:, 3])
    k = k / k[2, 2]
    if k[0, 0] <= 0 or k[1, 1] <= 0:
        raise CalibrationFailed("non-positive focal length from decomposition")
    intr = Intrinsics(fx=k[0, 0], fy=k[1, 1], cx=k[0, 2], cy=-k[1, 2])
    return intr, Extrinsics(r=r, t=t)


def _dlt(world: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    n = len(world)
    a = np.zeros((2 * n, 12))
    for i in range(n):
        xh = np.append(world[i], 1.0)
        u, v = pixels[i]
        a[2 * i, 0:4] = xh
        a[2 * i, 8:12] = -u * xh
        a[2 * i + 1, 4:8] = xh
        a[2 * i + 1, 8:12] = -v * xh
    _, s, vt = np.linalg.svd(a)
    if s[-2] < 1e-9 * s[0]:
        raise CalibrationFailed("rank-deficient calibration system")
    return vt[-1].reshape(3, 4)


def _pack(intr: Intrinsics, extr: Extrinsics) -> np.ndarray:
    rot = Rotation.from_matrix(extr.r).as_rotvec()
    return np.concatenate(
        [[intr.fx, intr.fy, intr.cx, intr.cy], rot, extr.t]
    )


def _unpack(params: np.ndarray) -> Camera:
    fx, fy, cx, cy = params[:4]
    r = Rotation.from_rotvec(params[4:7]).as_matrix()
    return Camera(Intrinsics(fx, fy, cx, cy), Extrinsics(r, params[7:10]))


def reprojection_rms(camera: Camera, correspondences) -> float:
    world = np.array([p.as_array() for p, _ in correspondences])
    pixels = np.array([q.as_array() for _, q in correspondences])
    err = project_many(camera, world) - pixels
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def calibrate(correspondences: list[tuple[Vec3, ImagePoint]]) -> tuple[Camera, float]:
    """Calibrate from 3D-2D correspondences (ten points in the standard setup).

    Seeds a projection matrix with a direct linear transform, decomposes it
    into K, R, t, then refines (fx, fy, cx, cy, rotation, t) by nonlinear
    least squares with zero skew and zero distortion. The rotation is
    parametrized as an axis-angle 3-vector during refinement so R stays
    orthonormal. Returns the camera and its reprojection RMS in pixels.
    """
    if len(correspondences) < 6:
        raise CalibrationFailed("need at least 6 correspondences")
    world = np.array([p.as_array() for p, _ in correspondences])
    pixels = np.array([q.as_array() for _, q in correspondences])

    # All points coplanar leaves the DLT under-determined.
    hom = np.hstack([world, np.ones((len(world), 1))])
    sv = np.linalg.svd(hom, compute_uv=False)
    if sv[3] < 1e-9 * sv[0]:
        raise CalibrationFailed("calibration points are coplanar")

    pmat = _dlt(world, pixels)
    try:
        intr, extr = _decompose_projection(pmat)
    except ValueError as exc:
        raise CalibrationFailed(str(exc)) from exc

    def residuals(params: np.ndarray) -> np.ndarray:
        fx, fy = params[0], params[1]
        if fx <= 0 or fy <= 0:
            return np.full(2 * len(world), 1e6)
        cam = _unpack(params)
        camc = world @ cam.extrinsics.r.T + cam.extrinsics.t
        depth = camc[:, 2]
        if np.any(depth <= 1e-9):
            return np.full(2 * len(world), 1e6)
        k = cam.intrinsics
        proj = np.column_stack(
            [k.cx + k.fx * camc[:, 0] / depth, k.cy - k.fy * camc[:, 1] / depth]
        )
        return (proj - pixels).ravel()

    x0 = _pack(intr, extr)
    result = least_squares(residuals, x0, method="lm", max_nfev=400)
    if not np.all(np.isfinite(result.x)):
        raise CalibrationFailed("refinement diverged")
    camera = _unpack(result.x)
    if camera.extrinsics.orthonormality_error() > 1e-9:
        raise CalibrationFailed("rotation drifted off the orthonormal manifold")
    rms = float(np.sqrt(np.mean(result.fun**2) * 2.0))
    return camera, rms


def position_player(
    camera: Camera,
    ankles_px: list[ImagePoint],
    joints_cam: list[Vec3],
) -> tuple[Vec3, list[Vec3]]:
    """Place camera-frame joints into the world via the ankle ground point.

    The player's root is the inverse projection of the ankle-pixel midpoint
    onto the ground plane. Joints are rotated by the calibrated R (transposed,
    camera to world) and translated so their camera-frame ankle midpoint lands
    on that root. Returns (root, world joints).
    """
    mid = ImagePoint(
        (ankles_px[0].u + ankles_px[1].u) / 2.0,
        (ankles_px[0].v + ankles_px[1].v) / 2.0,
    )
    root = inverse_project_to_plane(camera, mid, Plane("z", 0.0))
    jc = np.array([j.as_array() for j in joints_cam])
    root_cam = (jc[ANKLE_JOINTS[0]] + jc[ANKLE_JOINTS[1]]) / 2.0
    rt = camera.extrinsics.r.T
    world = root.as_array() + (jc - root_cam) @ rt.T
    return root, [Vec3.from_array(w) for w in world]
