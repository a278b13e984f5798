"""Procedural ray-cast RGB-D scenes.

Each scene is a handful of spheres and axis-aligned boxes resting on a ground
plane in front of a fronto-parallel backdrop, lit by one directional light
with flat Lambertian shading. Depth is z-depth (distance along the optical
axis, the common RGB-D convention), computed in closed form per primitive at
64-bit and rounded to 32-bit storage, so ground truth is exact and renders
are bit-stable.

Shading includes a mild distance attenuation term (aerial perspective). The
monocular cues in these images are deliberate: apparent size, ground-contact
row, occlusion, and attenuation together make absolute depth recoverable
from a single image, which is what the downstream network has to learn.

Camera model: pinhole at the origin looking down +z, x right, y down. Rays
are parameterized as p = t * (dx, dy, 1), so the ray parameter t at a hit IS
the z-depth.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .depth_codec import DepthMap
from .errors import ConfigError

T_MIN = 0.05  # hits closer than this are behind/inside the camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 40.0
    fy: float = 40.0
    cx: float = 24.0
    cy: float = 24.0
    width: int = 48
    height: int = 48

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @staticmethod
    def for_resolution(width: int, height: int) -> "CameraIntrinsics":
        # ~62 degree horizontal field of view at any resolution
        return CameraIntrinsics(
            fx=width * 5.0 / 6.0, fy=width * 5.0 / 6.0,
            cx=width / 2.0, cy=height / 2.0, width=width, height=height,
        )


Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class Sphere:
    center: Vec3
    radius: float
    albedo: Vec3


@dataclass(frozen=True)
class Box:
    center: Vec3
    half_extents: Vec3
    albedo: Vec3


@dataclass(frozen=True)
class Plane:
    point: Vec3
    normal: Vec3  # unit, pointing toward the camera side
    albedo: Vec3


Primitive = Sphere | Box | Plane

REGIME_DEPTH_BOUNDS = {"indoor": (0.5, 10.0), "outdoor": (1.0, 80.0)}


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    regime: str
    primitives: tuple
    light_direction: Vec3  # unit vector from surface toward the light


@dataclass(frozen=True)
class RenderSettings:
    ambient: float = 0.3
    fog_scale: float = 6.0  # attenuation (fog_scale / (fog_scale + z)) ** fog_power
    fog_power: float = 0.8
    attenuation: bool = True


def _unit(v) -> Vec3:
    arr = np.asarray(v, dtype=np.float64)
    return tuple((arr / np.linalg.norm(arr)).tolist())


def _hsv_albedo(gen: np.random.Generator, sat_lo: float, sat_hi: float) -> Vec3:
    h = float(gen.uniform(0.0, 1.0))
    s = float(gen.uniform(sat_lo, sat_hi))
    return tuple(colorsys.hsv_to_rgb(h, s, 1.0))


def sample_scene(seed: int, regime: str, camera: CameraIntrinsics) -> SceneSpec:
    """Deterministic scene draw: same (seed, regime, camera) -> same spec."""
    if regime not in REGIME_DEPTH_BOUNDS:
        raise ConfigError(f"unknown regime '{regime}'")
    gen = rng.stream(seed, f"scene/{regime}")
    near, far = REGIME_DEPTH_BOUNDS[regime]

    if regime == "indoor":
        wall_z = float(gen.uniform(6.0, far - 0.5))
        cam_height = float(gen.uniform(1.2, 1.8))
        obj_z_hi = wall_z - 0.8
        obj_z_lo = 1.6
        size_lo, size_hi = 0.22, 0.85
        near_margin = near + 0.1
    else:
        wall_z = float(gen.uniform(45.0, far - 2.0))
        cam_height = float(gen.uniform(1.4, 2.0))
        obj_z_hi = 35.0
        obj_z_lo = 4.0
        size_lo, size_hi = 0.6, 2.6
        near_margin = near + 0.5

    prims: list[Primitive] = [
        Plane(point=(0.0, 0.0, wall_z), normal=(0.0, 0.0, -1.0),
              albedo=_hsv_albedo(gen, 0.05, 0.25)),
        Plane(point=(0.0, cam_height, 0.0), normal=(0.0, -1.0, 0.0),
              albedo=_hsv_albedo(gen, 0.05, 0.25)),
    ]

    n_objects = int(gen.integers(1, 7))
    for _ in range(n_objects):
        z = float(gen.uniform(obj_z_lo, obj_z_hi))
        kind = gen.random() < 0.5
        if kind:
            r = float(gen.uniform(size_lo, size_hi))
            z = max(z, near_margin + r)
            x_max = 0.9 * z * camera.cx / camera.fx
            x = float(gen.uniform(-x_max, x_max))
            prims.append(Sphere(center=(x, cam_height - r, z), radius=r,
                                albedo=_hsv_albedo(gen, 0.55, 0.95)))
        else:
            ex = float(gen.uniform(size_lo, size_hi))
            ey = float(gen.uniform(size_lo, size_hi))
            ez = float(gen.uniform(size_lo, size_hi))
            z = max(z, near_margin + ez)
            x_max = 0.9 * z * camera.cx / camera.fx
            x = float(gen.uniform(-x_max, x_max))
            prims.append(Box(center=(x, cam_height - ey, z), half_extents=(ex, ey, ez),
                             albedo=_hsv_albedo(gen, 0.55, 0.95)))

    azimuth = float(gen.uniform(0.0, 2.0 * math.pi))
    elevation = float(gen.uniform(math.radians(30.0), math.radians(70.0)))
    light = (
        math.cos(elevation) * math.cos(azimuth),
        -math.sin(elevation),  # y points down; light comes from above
        math.cos(elevation) * math.sin(azimuth),
    )
    return SceneSpec(seed=seed, regime=regime, primitives=tuple(prims),
                     light_direction=_unit(light))


def _ray_grid(camera: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(camera.width, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(camera.height, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    dx, dy = np.meshgrid(xs, ys)
    return dx, dy


def primitive_depth(prim: Primitive, camera: CameraIntrinsics) -> np.ndarray:
    """Closed-form z-depth of the nearest intersection per pixel (inf = miss)."""
    dx, dy = _ray_grid(camera)
    if isinstance(prim, Plane):
        n = np.asarray(prim.normal, dtype=np.float64)
        p0 = np.asarray(prim.point, dtype=np.float64)
        denom = n[0] * dx + n[1] * dy + n[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, np.dot(n, p0) / denom, np.inf)
        return np.where(t > T_MIN, t, np.inf)
    if isinstance(prim, Sphere):
        c = np.asarray(prim.center, dtype=np.float64)
        a = dx * dx + dy * dy + 1.0
        b = -2.0 * (dx * c[0] + dy * c[1] + c[2])
        cc = float(np.dot(c, c)) - prim.radius * prim.radius
        disc = b * b - 4.0 * a * cc
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            t = (-b - sq) / (2.0 * a)
        t = np.where((disc >= 0.0) & (t > T_MIN), t, np.inf)
        return t
    if isinstance(prim, Box):
        c = np.asarray(prim.center, dtype=np.float64)
        e = np.asarray(prim.half_extents, dtype=np.float64)
        t_enter = np.full(dx.shape, -np.inf)
        t_exit = np.full(dx.shape, np.inf)
        for axis, d_axis in ((0, dx), (1, dy), (2, np.ones_like(dx))):
            lo, hi = c[axis] - e[axis], c[axis] + e[axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = np.where(np.abs(d_axis) > 1e-15, lo / d_axis, np.where(lo <= 0, -np.inf, np.inf))
                t2 = np.where(np.abs(d_axis) > 1e-15, hi / d_axis, np.where(hi >= 0, np.inf, -np.inf))
            t_enter = np.maximum(t_enter, np.minimum(t1, t2))
            t_exit = np.minimum(t_exit, np.maximum(t1, t2))
        hit = (t_exit >= t_enter) & (t_enter > T_MIN)
        return np.where(hit, t_enter, np.inf)
    raise ConfigError(f"unknown primitive {type(prim)!r}")


def _normals_at(prim: Primitive, dx: np.ndarray, dy: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Unit surface normal [3,H,W] at the hit points p = t*(dx,dy,1)."""
    if isinstance(prim, Plane):
        n = np.asarray(prim.normal, dtype=np.float64)
        return np.broadcast_to(n[:, None, None], (3,) + dx.shape)
    if isinstance(prim, Sphere):
        c = np.asarray(prim.center, dtype=np.float64)
        px, py, pz = t * dx, t * dy, t
        n = np.stack([(px - c[0]), (py - c[1]), (pz - c[2])]) / prim.radius
        return n
    if isinstance(prim, Box):
        c = np.asarray(prim.center, dtype=np.float64)
        e = np.asarray(prim.half_extents, dtype=np.float64)
        p = np.stack([t * dx, t * dy, t])
        rel = (p - c[:, None, None]) / e[:, None, None]
        # the face hit is the axis where |rel| is largest (== 1 up to rounding)
        axis = np.argmax(np.abs(rel), axis=0)
        n = np.zeros_like(p)
        for a in range(3):
            mask = axis == a
            n[a][mask] = np.sign(rel[a][mask])
        return n
    raise ConfigError(f"unknown primitive {type(prim)!r}")


def render(spec: SceneSpec, camera: CameraIntrinsics,
           settings: RenderSettings = RenderSettings()) -> tuple[np.ndarray, DepthMap]:
    """Ray-cast the scene: RGB [3,H,W] float32 in [0,1] and exact z-depth."""
    dx, dy = _ray_grid(camera)
    depths = np.stack([primitive_depth(p, camera) for p in spec.primitives])
    winner = np.argmin(depths, axis=0)
    z = np.take_along_axis(depths, winner[None], axis=0)[0]

    light = np.asarray(spec.light_direction, dtype=np.float64)
    rgb = np.zeros((3,) + dx.shape, dtype=np.float64)
    zsafe = np.where(np.isfinite(z), z, 1.0)  # keep non-winner math warning-free
    for i, prim in enumerate(spec.primitives):
        mask = winner == i
        if not mask.any():
            continue
        normals = _normals_at(prim, dx, dy, zsafe)
        lambert = np.maximum(0.0, np.einsum("chw,c->hw", normals, light))
        shade = settings.ambient + (1.0 - settings.ambient) * lambert
        albedo = np.asarray(prim.albedo, dtype=np.float64)
        rgb[:, mask] = albedo[:, None] * shade[mask][None]
    if settings.attenuation:
        atten = (settings.fog_scale / (settings.fog_scale + z)) ** settings.fog_power
        rgb *= atten[None]
    rgb = np.clip(rgb, 0.0, 1.0)

    if not np.isfinite(z).all():
        raise ConfigError("scene does not cover every pixel")
    return rgb.astype(np.float32), DepthMap(z.astype(np.float32))


def augment_hflip(pair: tuple[np.ndarray, DepthMap], coin: bool) -> tuple[np.ndarray, DepthMap]:
    """Mirror image and depth about the vertical axis when coin is true."""
    if not coin:
        return pair
    rgb, depth = pair
    return (
        np.ascontiguousarray(rgb[..., ::-1]),
        DepthMap(np.ascontiguousarray(depth.values[:, ::-1]),
                 np.ascontiguousarray(depth.valid_mask[:, ::-1])),
    )


def inject_holes(depth: DepthMap, seed: int, n_holes: int = 3, max_size: int = 6) -> DepthMap:
    """Punch small invalid rectangles into the mask (sensor-hole stand-in)."""
    gen = rng.stream(seed, "holes")
    mask = depth.valid_mask.copy()
    h, w = depth.values.shape
    for _ in range(n_holes):
        hh = int(gen.integers(1, max_size + 1))
        ww = int(gen.integers(1, max_size + 1))
        y = int(gen.integers(0, max(1, h - hh)))
        x = int(gen.integers(0, max(1, w - ww)))
        mask[y : y + hh, x : x + ww] = False
    return DepthMap(depth.values.copy(), mask)


def max_scene_depth(spec: SceneSpec, camera: CameraIntrinsics) -> float:
    _, depth = render(spec, camera)
    return float(depth.values.max())
