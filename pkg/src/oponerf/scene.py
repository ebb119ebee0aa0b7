"""Procedural emissive-primitive scenes, an analytic ray tracer and perturbations."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, all_pixels, rays_for_pixels

SHAPES = ("sphere", "box")
PERTURBATION_KINDS = ("move-object", "scale-light", "add-object", "remove-object", "image-noise", "feature-noise")

DEFAULT_BOUNDS = ((-1.0, -0.6, -1.0), (1.0, 0.6, 1.0))


@dataclass
class SceneObject:
    shape: str
    center: np.ndarray
    size: float
    albedo: np.ndarray

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo components must lie in [0, 1]")

    @property
    def bounding_radius(self) -> float:
        return self.size * (np.sqrt(3.0) if self.shape == "box" else 1.0)


@dataclass
class Light:
    position: np.ndarray
    intensity: float
    ambient: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.intensity < 0 or self.ambient < 0:
            raise ValueError("light intensity and ambient must be non-negative")


@dataclass
class Scene:
    objects: list[SceneObject]
    light: Light
    background: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]
    seed: int = 0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        self.bounds = (np.asarray(self.bounds[0], dtype=np.float64), np.asarray(self.bounds[1], dtype=np.float64))
        if np.any(self.background < 0) or np.any(self.background > 1):
            raise ValueError("background components must lie in [0, 1]")
        for obj in self.objects:
            if np.any(obj.center < self.bounds[0]) or np.any(obj.center > self.bounds[1]):
                raise ValueError(f"object center {obj.center} outside scene bounds")


@dataclass
class Perturbation:
    kind: str
    object_index: int | None = None
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    light_factor: float = 1.0
    sigma: float = 0.0
    seed: int = 0
    new_object: SceneObject | None = None

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "scale-light" and not self.light_factor > 0:
            raise ValueError("light factor must be positive")
        if self.kind in ("move-object", "remove-object") and self.object_index is None:
            raise ValueError(f"{self.kind} needs an object index")
        if self.kind in ("image-noise", "feature-noise") and self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")


@dataclass
class Image:
    """Float RGB buffer in [0, 1], shape (H, W, 3)."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)


def _random_object(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray) -> SceneObject:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    size = float(rng.uniform(0.2, 0.35))
    margin = size * (np.sqrt(3.0) if shape == "box" else 1.0)
    center_lo = np.minimum(lo + margin, (lo + hi) / 2)
    center_hi = np.maximum(hi - margin, (lo + hi) / 2)
    center = rng.uniform(center_lo, center_hi)
    albedo = rng.uniform(0.15, 1.0, size=3)
    return SceneObject(shape, center, size, albedo)


def _overlaps(obj: SceneObject, others: list[SceneObject]) -> bool:
    return any(
        np.linalg.norm(obj.center - o.center) < obj.bounding_radius + o.bounding_radius for o in others
    )


def _place(rng, objects, lo, hi, tries: int = 1000) -> SceneObject | None:
    for _ in range(tries):
        cand = _random_object(rng, lo, hi)
        if not _overlaps(cand, objects):
            return cand
    return None


def generate_scene(count: int, seed: int, bounds=DEFAULT_BOUNDS, background=(1.0, 1.0, 1.0)) -> Scene:
    """Random non-overlapping spheres and boxes; deterministic under ``seed``."""
    if not 1 <= count <= 16:
        raise ValueError(f"object count must be in [1, 16], got {count}")
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    objects: list[SceneObject] = []
    for _ in range(count):
        obj = _place(rng, objects, lo, hi)
        if obj is None:
            raise ValueError(f"could not place {count} non-overlapping objects (placed {len(objects)})")
        objects.append(obj)
    light = Light(
        position=np.array([rng.uniform(-2.0, 2.0), 3.5, -3.0]),
        intensity=float(rng.uniform(16.0, 22.0)),
        ambient=0.3,
    )
    return Scene(objects, light, np.asarray(background, dtype=np.float64), (lo, hi), seed)


# ---------------------------------------------------------------------------
# Ray tracing
# ---------------------------------------------------------------------------


def _hit_sphere(obj: SceneObject, o: np.ndarray, d: np.ndarray):
    oc = o - obj.center
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - obj.size**2
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where(ok & (t > 1e-9), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n = (p - obj.center) / obj.size
    return t, n


def _hit_box(obj: SceneObject, o: np.ndarray, d: np.ndarray):
    lo = obj.center - obj.size
    hi = obj.center + obj.size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    ok = (t_enter <= t_exit) & (t_exit > 1e-9)
    t = np.where(t_enter > 1e-9, t_enter, t_exit)
    t = np.where(ok, t, np.inf)
    n = np.zeros_like(d)
    rows = np.arange(len(d))
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def intersect(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit distance, normal and object index per ray (inf / -1 on miss)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    best_t = np.full(len(dirs), np.inf)
    best_n = np.zeros_like(dirs)
    best_i = np.full(len(dirs), -1)
    for i, obj in enumerate(scene.objects):
        t, n = (_hit_sphere if obj.shape == "sphere" else _hit_box)(obj, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        best_i[closer] = i
    return best_t, best_n, best_i


def shade(scene: Scene, origins: np.ndarray, dirs: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Point light plus ambient, no shadows; background on a miss."""
    t, n, idx = intersect(scene, origins, dirs)
    out = np.broadcast_to(scene.background, (len(t), 3)).copy()
    hit = idx >= 0
    if np.any(hit):
        p = origins[hit] + t[hit, None] * dirs[hit]
        to_light = scene.light.position - p
        dist2 = np.einsum("ij,ij->i", to_light, to_light)
        l = to_light / np.sqrt(dist2)[:, None]
        lambert = np.maximum(0.0, np.einsum("ij,ij->i", n[hit], l))
        albedo = np.stack([scene.objects[i].albedo for i in idx[hit]])
        out[hit] = albedo * (scene.light.ambient + scene.light.intensity * lambert / (1.0 + dist2))[:, None]
    return np.clip(out, 0.0, 1.0) if clamp else out


def trace_ray_gt(scene: Scene, origin, direction) -> np.ndarray:
    return shade(scene, np.asarray(origin, dtype=np.float64)[None], np.asarray(direction, dtype=np.float64)[None])[0]


def render_gt_view(scene: Scene, camera: Camera, width: int | None = None, height: int | None = None, clamp: bool = True) -> Image:
    if width is not None and height is not None and (width, height) != (camera.width, camera.height):
        camera = copy.copy(camera)
        camera.K = camera.K * np.array([[width / camera.width], [height / camera.height], [1.0]])
        camera.width, camera.height = width, height
    us, vs = all_pixels(camera)
    o, d = rays_for_pixels(camera, us, vs)
    rgb = shade(scene, o, d, clamp=clamp)
    return Image(rgb.reshape(camera.height, camera.width, 3))


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


def perturb(scene: Scene, p: Perturbation) -> Scene:
    """Return a perturbed copy; the input scene is never modified."""
    out = copy.deepcopy(scene)
    n = len(out.objects)
    if p.kind == "move-object":
        if not 0 <= p.object_index < n:
            raise IndexError(f"object index {p.object_index} out of range for {n} objects")
        obj = out.objects[p.object_index]
        obj.center = np.clip(obj.center + np.asarray(p.translation, dtype=np.float64), out.bounds[0], out.bounds[1])
    elif p.kind == "scale-light":
        out.light.intensity *= p.light_factor
    elif p.kind == "add-object":
        index = n if p.object_index is None else p.object_index
        if not 0 <= index <= n:
            raise IndexError(f"insert position {index} out of range for {n} objects")
        obj = p.new_object
        if obj is None:
            obj = _place(np.random.default_rng(p.seed), out.objects, *out.bounds)
            if obj is None:
                raise ValueError("no free space to add an object")
        out.objects.insert(index, copy.deepcopy(obj))
    elif p.kind == "remove-object":
        if not 0 <= p.object_index < n:
            raise IndexError(f"object index {p.object_index} out of range for {n} objects")
        del out.objects[p.object_index]
    return out


def add_noise(buffer, sigma: float, seed, clamp: bool | None = None):
    """Add i.i.d. N(0, sigma^2) noise.

    :class:`Image` inputs are clamped back to [0, 1]; plain arrays only when
    ``clamp`` is true.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(buffer, Image):
        noisy = buffer.data + sigma * rng.standard_normal(buffer.data.shape)
        return Image(np.clip(noisy, 0.0, 1.0), dict(buffer.meta))
    arr = np.asarray(buffer, dtype=np.float64)
    noisy = arr + sigma * rng.standard_normal(arr.shape)
    return np.clip(noisy, 0.0, 1.0) if clamp else noisy
