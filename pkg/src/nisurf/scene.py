"""Pinhole cameras, analytic SDF shapes and the sphere-tracing reference renderer."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio

BACKGROUND = np.array([0.0, 0.0, 0.0])
AMBIENT = 0.3
RIG_RADIUS = 2.0
RIG_ELEVATION_DEG = 20.0
BOUND_RADIUS = 1.05
DEPTH_MODES = ("metric", "relative", "relative-noisy")


# ------------------------------------------------------------------ shapes


@dataclass
class Sphere:
    radius: float
    center: tuple = (0.0, 0.0, 0.0)
    albedo: tuple = (0.85, 0.55, 0.35)
    exact = True

    def sdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def bounding_radius(self):
        return float(np.linalg.norm(self.center)) + self.radius


@dataclass
class Torus:
    """Torus around the world z axis."""

    major: float
    minor: float
    center: tuple = (0.0, 0.0, 0.0)
    albedo: tuple = (0.35, 0.7, 0.5)
    exact = True

    def sdf(self, x):
        p = np.asarray(x, dtype=float) - np.asarray(self.center)
        q0 = np.hypot(p[..., 0], p[..., 1]) - self.major
        return np.hypot(q0, p[..., 2]) - self.minor

    def bounding_radius(self):
        return float(np.linalg.norm(self.center)) + self.major + self.minor


@dataclass
class Box:
    half_extents: tuple
    rounding: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    albedo: tuple = (0.4, 0.5, 0.85)
    exact = True

    def sdf(self, x):
        p = np.abs(np.asarray(x, dtype=float) - np.asarray(self.center))
        q = p - np.asarray(self.half_extents) + self.rounding
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside - self.rounding

    def bounding_radius(self):
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.half_extents))


@dataclass
class SmoothUnion:
    children: list
    blend: float = 0.1
    albedo: tuple = (0.8, 0.75, 0.4)
    exact = False

    def sdf(self, x):
        d = self.children[0].sdf(x)
        k = self.blend
        for child in self.children[1:]:
            d2 = child.sdf(x)
            if k <= 0:
                d = np.minimum(d, d2)
                continue
            h = np.clip(0.5 + 0.5 * (d2 - d) / k, 0.0, 1.0)
            d = d2 * (1 - h) + d * h - k * h * (1 - h)
        return d

    def bounding_radius(self):
        return max(c.bounding_radius() for c in self.children)


SHAPES = ("sphere", "torus", "box", "blob")


def make_shape(name: str):
    if name == "sphere":
        return Sphere(radius=0.6)
    if name == "torus":
        return Torus(major=0.5, minor=0.2)
    if name == "box":
        return Box(half_extents=(0.45, 0.35, 0.3), rounding=0.05)
    if name == "blob":
        return SmoothUnion(
            [Sphere(0.35, (-0.25, 0.0, 0.0)), Sphere(0.3, (0.25, 0.05, 0.1))], blend=0.15
        )
    raise ValueError(f"unknown shape {name!r}; choose from {', '.join(SHAPES)}")


def analytic_sdf(shape, x):
    return shape.sdf(x)


def sdf_gradient(shape, x, h: float = 1e-6):
    """Central-difference gradient of an analytic field."""
    x = np.asarray(x, dtype=float)
    g = np.empty(x.shape)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[..., i] = (shape.sdf(x + e) - shape.sdf(x - e)) / (2 * h)
    return g


# ------------------------------------------------------------------ cameras


@dataclass
class Camera:
    """Pinhole camera looking down its +z axis (x right, y down)."""

    intrinsics: np.ndarray
    world_from_camera: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=float)
        self.world_from_camera = np.asarray(self.world_from_camera, dtype=float)
        K = self.intrinsics
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[1, 0] or K[2, 0] or K[2, 1]:
            raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    def directions(self, u, v):
        """Unit world-frame directions through continuous image coordinates."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        d_cam = pix @ np.linalg.inv(self.intrinsics).T
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_rays(self):
        """Origins and directions through every pixel centre, shape (H, W, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        d = self.directions(u + 0.5, v + 0.5)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def project(self, points):
        """World points to continuous image coordinates (u, v) and camera depth."""
        p = np.asarray(points, dtype=float) - self.center
        pc = p @ self.rotation
        uvw = pc @ self.intrinsics.T
        return uvw[..., :2] / uvw[..., 2:3], pc[..., 2]

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.ravel().tolist(),
            "world_from_camera": self.world_from_camera.ravel().tolist(),
            "resolution": [self.width, self.height],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        w, h = d["resolution"]
        return cls(
            np.array(d["intrinsics"], dtype=float).reshape(3, 3),
            np.array(d["world_from_camera"], dtype=float).reshape(4, 4),
            int(w),
            int(h),
        )


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = x, y, z, eye
    return T


def default_intrinsics(width: int, height: int, tan_half_fov: float = 0.5) -> np.ndarray:
    f = 0.5 * width / tan_half_fov
    return np.array([[f, 0.0, 0.5 * width], [0.0, f, 0.5 * height], [0.0, 0.0, 1.0]])


def rig_cameras(n_views: int, resolution: int, radius: float = RIG_RADIUS,
                elevation_deg: float = RIG_ELEVATION_DEG) -> list[Camera]:
    """Cameras evenly spaced in azimuth on a circle, all looking at the origin."""
    el = math.radians(elevation_deg)
    K = default_intrinsics(resolution, resolution)
    cams = []
    for i in range(n_views):
        az = 2 * math.pi * i / n_views
        eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera(K, look_at(eye), resolution, resolution))
    return cams


def ray_for_pixel(camera: Camera, pixel, offset=(0.5, 0.5)):
    """World-frame ray (origin, unit direction) through ``pixel + offset``."""
    u = float(pixel[0]) + offset[0]
    v = float(pixel[1]) + offset[1]
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        raise IndexError(f"pixel {tuple(pixel)} outside {camera.width}x{camera.height} image")
    return camera.center.copy(), camera.directions(u, v)


# ---------------------------------------------------------------- tracing


def ball_interval(o, v, radius: float = BOUND_RADIUS):
    """Ray/ball intersection interval clamped to t >= 0; NaN where the ray misses."""
    o = np.asarray(o, dtype=float)
    v = np.asarray(v, dtype=float)
    b = np.sum(o * v, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    hit &= far > 0
    near = np.where(hit, near, np.nan)
    far = np.where(hit, far, np.nan)
    return near, far


def sphere_trace(shape, o, v, t_max: float = np.inf, tol: float = 1e-10, max_iter: int = 2000):
    """First hit distance along each ray; NaN for misses.

    Works on single rays or batches (o, v of shape (..., 3)).
    """
    o = np.asarray(o, dtype=float)
    v = np.asarray(v, dtype=float)
    batch_shape = np.broadcast_shapes(o.shape, v.shape)[:-1]
    o = np.broadcast_to(o, batch_shape + (3,)).reshape(-1, 3)
    v = np.broadcast_to(v, batch_shape + (3,)).reshape(-1, 3)
    near, far = ball_interval(o, v, max(BOUND_RADIUS, shape.bounding_radius() + 1e-3))
    far = np.minimum(far, t_max)
    t = np.where(np.isnan(near), 0.0, near)
    hit = np.zeros(len(t), dtype=bool)
    active = np.flatnonzero(~np.isnan(near))
    safety = 1.0 if getattr(shape, "exact", True) else 0.7
    for _ in range(max_iter):
        if active.size == 0:
            break
        d = shape.sdf(o[active] + t[active, None] * v[active])
        done = np.abs(d) <= tol
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, safety * d)
        active = active[~done & (t[active] <= far[active])]
    pts = o + t[:, None] * v
    hit &= np.abs(shape.sdf(pts)) <= 1e-7
    out = np.where(hit, t, np.nan).reshape(batch_shape)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------- rendering


@dataclass
class ViewRecord:
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    camera: Camera
    normal_est: np.ndarray | None = None
    normal_est_valid: np.ndarray | None = None


def shade(albedo, normals_world, light):
    light = np.asarray(light, dtype=float)
    light = light / np.linalg.norm(light)
    lam = np.clip(normals_world @ light, 0.0, 1.0)
    return np.asarray(albedo) * (AMBIENT + (1 - AMBIENT) * lam)[..., None]


def render_view(shape, camera: Camera, light, background=BACKGROUND) -> ViewRecord:
    """Ground-truth RGB, camera-z depth, camera-frame normals and mask."""
    o, d = camera.pixel_rays()
    t = sphere_trace(shape, o, d)
    mask = np.isfinite(t)
    H, W = camera.height, camera.width
    rgb = np.broadcast_to(np.asarray(background, dtype=float), (H, W, 3)).copy()
    depth = np.full((H, W), np.inf)
    normal = np.zeros((H, W, 3))
    if mask.any():
        pts = o[mask] + t[mask][:, None] * d[mask]
        n = sdf_gradient(shape, pts)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        flip = np.sum(n * d[mask], axis=-1) > 0
        n[flip] *= -1
        rgb[mask] = shade(shape.albedo, n, light)
        depth[mask] = t[mask] * (d[mask] @ camera.rotation[:, 2])
        normal[mask] = n @ camera.rotation
    return ViewRecord(rgb, depth, normal, mask, camera)


def relative_depth(depth, mask, noise: float = 0.0, rng=None):
    """Per-image min-max normalisation to [0, 1], optionally after noise."""
    out = np.full(depth.shape, np.inf)
    d = depth[mask].astype(float)
    if noise > 0:
        d = d + rng.normal(0.0, noise * (d.max() - d.min()), size=d.shape)
    lo, hi = d.min(), d.max()
    out[mask] = (d - lo) / (hi - lo)
    return out


# ------------------------------------------------------------------ dataset


def shape_to_dict(shape) -> dict:
    if isinstance(shape, SmoothUnion):
        return {"type": "smooth_union", "blend": shape.blend, "albedo": list(shape.albedo),
                "children": [shape_to_dict(c) for c in shape.children]}
    kind = {Sphere: "sphere", Torus: "torus", Box: "box"}[type(shape)]
    d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(shape).items()}
    d["type"] = kind
    return d


def shape_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    if kind == "smooth_union":
        return SmoothUnion([shape_from_dict(c) for c in d["children"]], d["blend"], tuple(d["albedo"]))
    cls = {"sphere": Sphere, "torus": Torus, "box": Box}[kind]
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


DEFAULT_LIGHT = (0.4, -0.3, 0.85)


@dataclass
class Dataset:
    views: list[ViewRecord]
    shape: object
    depth_mode: str = "metric"
    light: tuple = DEFAULT_LIGHT
    background: np.ndarray = field(default_factory=lambda: BACKGROUND.copy())
    root: Path | None = None


def generate_dataset(shape, n_views: int, resolution: int, depth_mode: str = "metric",
                     noise: float = 0.0, seed: int = 0, out=None, light=DEFAULT_LIGHT) -> Dataset:
    if n_views < 2:
        raise ValueError("need at least 2 views")
    if depth_mode not in DEPTH_MODES:
        raise ValueError(f"depth_mode must be one of {DEPTH_MODES}")
    rng = np.random.default_rng(seed)
    views = []
    for cam in rig_cameras(n_views, resolution):
        view = render_view(shape, cam, light)
        if depth_mode != "metric":
            sigma = noise if depth_mode == "relative-noisy" else 0.0
            view.depth = relative_depth(view.depth, view.mask, sigma, rng)
        views.append(view)
    ds = Dataset(views, shape, depth_mode, tuple(light))
    if out is not None:
        save_dataset(ds, out)
    return ds


def save_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cams = {"views": [v.camera.to_dict() for v in ds.views]}
    (out / "cameras.json").write_text(json.dumps(cams, indent=1))
    meta = {"shape": shape_to_dict(ds.shape), "depth_mode": ds.depth_mode,
            "light": list(ds.light), "background": list(map(float, ds.background))}
    (out / "scene.json").write_text(json.dumps(meta, indent=1))
    for i, v in enumerate(ds.views):
        imageio.write_ppm(out / f"view_{i:03d}.ppm", v.rgb)
        imageio.write_pfm(out / f"depth_{i:03d}.pfm", v.depth)
        imageio.write_pfm(out / f"normal_{i:03d}.pfm", v.normal)
        imageio.write_pgm(out / f"mask_{i:03d}.pgm", v.mask)
        if v.normal_est is not None:
            imageio.write_pfm(out / f"normal_est_{i:03d}.pfm", v.normal_est)
    ds.root = out
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    cams = json.loads((root / "cameras.json").read_text())["views"]
    meta_path = root / "scene.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    views = []
    for i, c in enumerate(cams):
        cam = Camera.from_dict(c)
        rgb = imageio.read_ppm(root / f"view_{i:03d}.ppm")
        depth = imageio.read_pfm(root / f"depth_{i:03d}.pfm")
        normal = imageio.read_pfm(root / f"normal_{i:03d}.pfm")
        mask = imageio.read_pgm(root / f"mask_{i:03d}.pgm")
        view = ViewRecord(rgb, depth, normal, mask, cam)
        est = root / f"normal_est_{i:03d}.pfm"
        if est.exists():
            view.normal_est = imageio.read_pfm(est)
            view.normal_est_valid = np.linalg.norm(view.normal_est, axis=-1) > 0.5
        views.append(view)
    shape = shape_from_dict(meta["shape"]) if "shape" in meta else None
    return Dataset(
        views,
        shape,
        meta.get("depth_mode", "metric"),
        tuple(meta.get("light", DEFAULT_LIGHT)),
        np.asarray(meta.get("background", BACKGROUND), dtype=float),
        root,
    )
