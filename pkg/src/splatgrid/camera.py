"""Pinhole cameras: projection, unprojection with z-depth, Plücker ray maps, orbits.

Convention: the pose (R, t) maps world to camera, ``X_cam = R @ X + t``, so the
camera center is ``-R.T @ t``. Camera axes follow OpenCV (x right, y down,
z forward). Pixel centers sit at integer + 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_FOV_DEG = 50.0
DEFAULT_ELEVATION_DEG = 10.0
DEFAULT_RADIUS = 2.5


class CameraError(ValueError):
    pass


class BehindCameraError(CameraError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise CameraError(f"image extents must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, width: int, height: int | None = None, fov_deg: float = DEFAULT_FOV_DEG):
        height = width if height is None else height
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise CameraError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise CameraError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose = field(default_factory=lambda: CameraPose(np.eye(3), np.zeros(3)))

    @property
    def R(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def t(self) -> np.ndarray:
        return self.pose.translation

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    @property
    def distance(self) -> float:
        """||t||_2, the distance used by the depth activation."""
        return float(np.linalg.norm(self.t))

    def scaled(self, width: int, height: int | None = None) -> "Camera":
        height = width if height is None else height
        return Camera(self.intrinsics.scaled(width, height), self.pose)

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
            "R": self.R.reshape(-1).tolist(), "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        k = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                             int(d["width"]), int(d["height"]))
        return cls(k, CameraPose(np.asarray(d["R"], float).reshape(3, 3), np.asarray(d["t"], float)))


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of (u, v) pixel-center coordinates."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([u, v], axis=-1)


def camera_rays(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """World-frame directions R^T K^-1 [u; 1] (unnormalized, unit camera z)."""
    k = camera.intrinsics
    pixels = np.asarray(pixels, dtype=np.float64)
    cam = np.stack([(pixels[..., 0] - k.cx) / k.fx, (pixels[..., 1] - k.cy) / k.fy,
                    np.ones(pixels.shape[:-1])], axis=-1)
    return cam @ camera.R


def unproject(pixel, depth, camera: Camera) -> np.ndarray:
    """World point at z-depth ``depth`` along the ray through ``pixel``.

    X = R^T (d * K^-1 [u; 1] - t). Broadcasts over leading axes.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise CameraError("depth must be positive")
    pixel = np.asarray(pixel, dtype=np.float64)
    rays = camera_rays(camera, pixel)
    return depth[..., None] * rays - camera.R.T @ camera.t


def to_camera_frame(points, camera: Camera) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ camera.R.T + camera.t


def project(point, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection; returns (pixel (...,2), z-depth (...))."""
    pc = to_camera_frame(point, camera)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point is behind camera")
    k = camera.intrinsics
    uv = np.stack([k.fx * pc[..., 0] / z + k.cx, k.fy * pc[..., 1] / z + k.cy], axis=-1)
    return uv, z


def plucker_map(camera: Camera, origin_shift=None) -> np.ndarray:
    """6 x H x W map of (unit direction, moment = origin x direction) per pixel.

    ``origin_shift`` (H x W, optional) moves each ray origin along its own ray;
    the moment is unchanged by construction of Plücker coordinates.
    """
    rays = camera_rays(camera, pixel_centers(camera.width, camera.height))
    d = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape)
    if origin_shift is not None:
        o = o + np.asarray(origin_shift)[..., None] * d
    m = np.cross(o, d)
    return np.concatenate([d, m], axis=-1).transpose(2, 0, 1)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> CameraPose:
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise CameraError("look-at direction is parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return CameraPose(R, -R @ center)


def orbit_position(azimuth: float, elevation: float, radius: float) -> np.ndarray:
    ce = math.cos(elevation)
    return radius * np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)])


def orbit_cameras(count: int, radius: float = DEFAULT_RADIUS, elevation: float = DEFAULT_ELEVATION_DEG,
                  intrinsics: CameraIntrinsics | None = None, azimuth_offset: float = 0.0) -> list[Camera]:
    """``count`` cameras evenly spaced in azimuth, all looking at the origin.

    ``elevation`` and ``azimuth_offset`` are in degrees.
    """
    if count < 1:
        raise CameraError("count must be >= 1")
    if radius <= 0:
        raise CameraError("radius must be positive")
    intrinsics = intrinsics or CameraIntrinsics.from_fov(64)
    el = math.radians(elevation)
    cams = []
    for k in range(count):
        az = 2 * math.pi * k / count + math.radians(azimuth_offset)
        cams.append(Camera(intrinsics, look_at(orbit_position(az, el, radius))))
    return cams


def random_cameras(rng: np.random.Generator, count: int, radius: float = DEFAULT_RADIUS,
                   intrinsics: CameraIntrinsics | None = None,
                   elevation_range=(-20.0, 50.0)) -> list[Camera]:
    intrinsics = intrinsics or CameraIntrinsics.from_fov(64)
    cams = []
    for _ in range(count):
        az = rng.uniform(0, 2 * math.pi)
        el = math.radians(rng.uniform(*elevation_range))
        cams.append(Camera(intrinsics, look_at(orbit_position(az, el, radius))))
    return cams
