"""Pinhole cameras, orbit samplers and camera conditioning vectors.

Cameras use the OpenCV convention (x right, y down, z forward) and orbit the
origin with +z as world up; azimuth is measured from +x in the xy-plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

DEFAULT_RADIUS = 2.5
DEFAULT_ELEVATION = math.radians(15.0)
DEFAULT_FOV_Y = math.radians(40.0)
WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    c2w: np.ndarray
    fov_y: float = DEFAULT_FOV_Y
    width: int = 64
    height: int = 64
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        c2w = np.array(self.c2w, dtype=np.float64)
        if c2w.shape != (4, 4) or not np.allclose(c2w[3], [0, 0, 0, 1]):
            raise ParameterError("c2w must be a 4x4 rigid transform")
        rot = c2w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ParameterError("c2w rotation block is not orthonormal")
        if not 0.0 < self.fov_y < math.pi:
            raise ParameterError("fov_y must lie in (0, pi)")
        if not 0.0 < self.near < self.far:
            raise ParameterError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ParameterError("resolution must be positive")
        c2w.setflags(write=False)
        object.__setattr__(self, "c2w", c2w)

    @property
    def focal(self):
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    @property
    def center(self):
        return self.c2w[:3, 3]

    @property
    def w2c_rotation(self):
        return self.c2w[:3, :3].T

    @property
    def w2c_translation(self):
        return -self.c2w[:3, :3].T @ self.c2w[:3, 3]

    def world_to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.w2c_rotation.T + self.w2c_translation

    def __eq__(self, other):
        return (
            isinstance(other, PinholeCamera)
            and np.array_equal(self.c2w, other.c2w)
            and (self.fov_y, self.width, self.height, self.near, self.far)
            == (other.fov_y, other.width, other.height, other.near, other.far)
        )

    __hash__ = None


def _resolution(resolution):
    if isinstance(resolution, int):
        return resolution, resolution
    w, h = resolution
    return int(w), int(h)


def look_at(eye, target=(0.0, 0.0, 0.0), up=WORLD_UP):
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, forward, eye
    return c2w


def orbit_camera(azimuth, elevation, radius, fov_y=DEFAULT_FOV_Y, resolution=64):
    if not radius > 0:
        raise ParameterError("radius must be > 0")
    eye = radius * np.array(
        [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
    )
    w, h = _resolution(resolution)
    return PinholeCamera(look_at(eye), fov_y=fov_y, width=w, height=h)


def fixed_ring_cameras(count=4, radius=DEFAULT_RADIUS, elevation=DEFAULT_ELEVATION,
                       fov_y=DEFAULT_FOV_Y, resolution=64):
    if count < 1:
        raise ParameterError("count must be >= 1")
    if not radius > 0:
        raise ParameterError("radius must be > 0")
    return [
        orbit_camera(2.0 * math.pi * k / count, elevation, radius, fov_y, resolution)
        for k in range(count)
    ]


def random_orbit_camera(rng, radius_range=(DEFAULT_RADIUS, DEFAULT_RADIUS),
                        elevation_range=(DEFAULT_ELEVATION, DEFAULT_ELEVATION),
                        fov_y=DEFAULT_FOV_Y, resolution=64):
    r_lo, r_hi = radius_range
    e_lo, e_hi = elevation_range
    if r_lo > r_hi or e_lo > e_hi:
        raise ParameterError("inverted sampling range")
    if r_lo <= 0:
        raise ParameterError("radius must be > 0")
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    radius = rng.uniform(r_lo, r_hi) if r_hi > r_lo else r_lo
    elevation = rng.uniform(e_lo, e_hi) if e_hi > e_lo else e_lo
    return orbit_camera(azimuth, elevation, radius, fov_y, resolution)


def flatten_extrinsics(camera):
    """Row-major first three rows of c2w (12 numbers)."""
    return np.array(camera.c2w[:3, :4], dtype=np.float64).reshape(12)


def camera_to_block(camera, name="camera"):
    """Plain-text ``key = value`` block describing an orbit camera."""
    eye = camera.center
    radius = float(np.linalg.norm(eye))
    elevation = math.asin(eye[2] / radius)
    azimuth = math.atan2(eye[1], eye[0]) % (2.0 * math.pi)
    return "\n".join(
        [
            f"[{name}]",
            f"azimuth = {math.degrees(azimuth)!r}",
            f"elevation = {math.degrees(elevation)!r}",
            f"radius = {radius!r}",
            f"fov = {math.degrees(camera.fov_y)!r}",
            f"resolution = {camera.width}x{camera.height}",
        ]
    ) + "\n"


def camera_from_block(section):
    """Inverse of :func:`camera_to_block`; ``section`` is a mapping of strings."""
    w, h = (int(v) for v in str(section["resolution"]).lower().split("x"))
    return orbit_camera(
        math.radians(float(section["azimuth"])),
        math.radians(float(section["elevation"])),
        float(section["radius"]),
        math.radians(float(section["fov"])),
        (w, h),
    )
