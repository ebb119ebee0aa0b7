"""Pinhole cameras, per-pixel rays, depth sampling and plane homographies.

Conventions: camera frame is x right, y down, z forward; extrinsics map
world to camera (``x_cam = R @ x_world + t``); pixel ``(u, v)`` has its
center at continuous coordinate ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def axis(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return self.R[2].copy()

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous pixel coordinates and depth of world points."""
        pc = self.world_to_camera(np.asarray(points, dtype=np.float64))
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            hom = pc @ self.K.T
            u = hom[..., 0] / z
            v = hom[..., 1] / z
        return u, v, z


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def look_at(eye, target, up, K, width: int, height: int, near: float = 0.1, far: float = 10.0) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Camera(K=K, R=R, t=-R @ eye, width=width, height=height, near=near, far=far)


def ray_for_pixel(camera: Camera, u: int, v: int) -> Ray:
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    o, d = rays_for_pixels(camera, np.array([u]), np.array([v]))
    return Ray(o[0], d[0], camera.near, camera.far)


def rays_for_pixels(camera: Camera, us: np.ndarray, vs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit world directions through the centers of pixels."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    pix = np.stack([us + 0.5, vs + 0.5, np.ones_like(us)], axis=-1)
    d_cam = pix @ np.linalg.inv(camera.K).T
    d_world = d_cam @ camera.R
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def all_pixels(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return uu.reshape(-1), vv.reshape(-1)


def sample_depths(near: float, far: float, n: int, stratified: bool = False, seed=None, n_rays: int | None = None) -> np.ndarray:
    """Depths t_1..t_n, one per equal-width bin of [near, far].

    Bin midpoints when ``stratified`` is false, otherwise one uniform draw per
    bin.  ``n_rays`` returns an (n_rays, n) array with independent jitter.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    if near >= far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    step = (far - near) / n
    lo = near + step * np.arange(n)
    shape = (n,) if n_rays is None else (n_rays, n)
    if stratified:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return lo + step * rng.random(shape)
    return np.broadcast_to(lo + 0.5 * step, shape).copy()


def relative_pose(camera_k: Camera, camera_ref: Camera) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) with ``x_k = R @ x_ref + t`` between camera frames."""
    R = camera_k.R @ camera_ref.R.T
    return R, camera_k.t - R @ camera_ref.t


def homography(camera_k: Camera, camera_ref: Camera, z: float) -> np.ndarray:
    """Pixel map from the reference view to view k induced by the plane at depth z.

    The plane is fronto-parallel to the reference camera.  ``z = inf`` gives
    the rotation-only homography.
    """
    if not z > 0:
        raise ValueError("plane depth must be positive")
    if abs(np.linalg.det(camera_ref.K)) < 1e-12 or abs(np.linalg.det(camera_k.K)) < 1e-12:
        raise ValueError("singular intrinsics")
    R, t = relative_pose(camera_k, camera_ref)
    n = np.array([0.0, 0.0, 1.0])
    plane = R if np.isinf(z) else R + np.outer(t, n) / z
    return camera_k.K @ plane @ np.linalg.inv(camera_ref.K)


def apply_homography(H: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.stack([u, v, np.ones_like(u)], axis=-1) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return p[..., 0] / p[..., 2], p[..., 1] / p[..., 2]


@dataclass
class RigSpec:
    n_views: int = 21
    width: int = 48
    height: int = 48
    radius: float = 4.0
    arc_degrees: float = 80.0
    elevation_degrees: float = 20.0
    fov_degrees: float = 40.0
    scene_radius: float = 1.8
    target: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))


def arc_rig(spec: RigSpec | None = None) -> list[Camera]:
    """Cameras evenly spaced on a horizontal arc, all looking at the target."""
    spec = spec or RigSpec()
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_degrees) / 2)
    K = intrinsics(f, f, spec.width / 2, spec.height / 2)
    el = np.radians(spec.elevation_degrees)
    target = np.asarray(spec.target, dtype=np.float64)
    near = max(spec.radius - spec.scene_radius, 1e-3)
    far = spec.radius + spec.scene_radius
    cams = []
    for az in np.radians(np.linspace(-spec.arc_degrees / 2, spec.arc_degrees / 2, spec.n_views)):
        eye = target + spec.radius * np.array([np.cos(el) * np.sin(az), np.sin(el), -np.cos(el) * np.cos(az)])
        cams.append(look_at(eye, target, (0.0, 1.0, 0.0), K, spec.width, spec.height, near, far))
    return cams


def training_indices(n_views: int = 21, n_train: int = 5) -> list[int]:
    """Evenly indexed training views, e.g. 0, 5, 10, 15, 20 out of 21."""
    return [int(round(i)) for i in np.linspace(0, n_views - 1, n_train)]
