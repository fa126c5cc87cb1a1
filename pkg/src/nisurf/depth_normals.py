"""Normals from (relative) depth maps by local PCA plane fitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


class DepthDataError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) camera frame
    pixels: np.ndarray  # (N, 2) integer (row, col)
    shape: tuple  # (H, W)


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


def lift_depth(depth, mask, intrinsics) -> PointCloud:
    """Back-project masked pixels: point = depth * K^-1 (u + 0.5, v + 0.5, 1)."""
    depth = np.asarray(depth, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    d = depth[rows, cols]
    bad = ~(d > 0) | ~np.isfinite(d)
    if bad.any():
        i = np.flatnonzero(bad)[0]
        raise DepthDataError(f"non-positive depth {d[i]} at pixel (row={rows[i]}, col={cols[i]})")
    pix = np.stack([cols + 0.5, rows + 0.5, np.ones(len(rows))], axis=-1)
    rays = pix @ np.linalg.inv(intrinsics).T
    return PointCloud(rays * d[:, None], np.stack([rows, cols], axis=-1), depth.shape)


COLLINEAR_RATIO = 1e-6


def _pca_normals(pts, neigh):
    """Cross product of the two leading eigenvectors per neighbourhood; ok=False when rank < 2."""
    n = len(neigh)
    counts = np.array([len(nb) for nb in neigh])
    owner = np.repeat(np.arange(n), counts)
    member = np.concatenate([np.asarray(nb, dtype=int) for nb in neigh])

    def per_point_sum(vals):
        return np.bincount(owner, weights=vals, minlength=n)

    mean = np.stack([per_point_sum(pts[member, c]) for c in range(3)], axis=-1) / counts[:, None]
    diff = pts[member] - mean[owner]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = cov[:, b, a] = per_point_sum(diff[:, a] * diff[:, b])
    lam, vecs = np.linalg.eigh(cov)
    nrm = np.cross(vecs[:, :, 2], vecs[:, :, 1])
    length = np.linalg.norm(nrm, axis=-1)
    ok = (counts >= 3) & (length > 0.5) & (lam[:, 1] > COLLINEAR_RATIO * lam[:, 2])
    return nrm / np.where(length > 0, length, 1.0)[:, None], ok


def estimate_normals_pca(cloud: PointCloud, radius: float | None = None, k: int = 16,
                         radius_pixels: float = 3.0) -> NormalMap:
    """Unoriented normals from the two leading principal directions of each neighbourhood.

    ``radius`` defaults to ``radius_pixels`` times the median nearest-neighbour
    spacing, so it follows the cloud's units. Points whose radius neighbourhood
    has fewer than three points, or only collinear ones, use their ``k``
    nearest instead; if that is still degenerate the point is invalid.
    """
    H, W = cloud.shape
    normals = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    pts = cloud.points
    n = len(pts)
    if n < 3:
        return NormalMap(normals, valid)
    tree = cKDTree(pts)
    if radius is None:
        dist, _ = tree.query(pts, k=2)
        radius = radius_pixels * float(np.median(dist[:, 1]))
    neigh = tree.query_ball_point(pts, r=radius)
    nrm, ok = _pca_normals(pts, neigh)
    retry = np.flatnonzero(~ok)
    if retry.size:
        _, idx = tree.query(pts[retry], k=min(k, n))
        nrm[retry], ok[retry] = _pca_normals(pts, list(np.atleast_2d(idx)))
    r, c = cloud.pixels[:, 0], cloud.pixels[:, 1]
    normals[r[ok], c[ok]] = nrm[ok]
    valid[r[ok], c[ok]] = True
    return NormalMap(normals, valid)


def orient_toward_camera(nmap: NormalMap, cloud: PointCloud) -> NormalMap:
    """Flip normals so they face the camera at the origin (n . p < 0)."""
    normals = nmap.normals.copy()
    valid = nmap.valid.copy()
    r, c = cloud.pixels[:, 0], cloud.pixels[:, 1]
    dots = np.sum(normals[r, c] * cloud.points, axis=-1)
    flip = dots > 0
    normals[r[flip], c[flip]] *= -1
    degenerate = valid[r, c] & (dots == 0)
    valid[r[degenerate], c[degenerate]] = False
    normals[~valid] = 0.0
    return NormalMap(normals, valid)


def normals_to_world(normals, world_from_camera) -> np.ndarray:
    """Rotate camera-frame normals into the world frame (no translation)."""
    R = np.asarray(world_from_camera, dtype=float)[:3, :3]
    return np.asarray(normals) @ R.T


def depth_to_normals(depth, mask, intrinsics, radius_pixels: float = 3.0, k: int = 16) -> NormalMap:
    """Lift, fit and orient: camera-frame normals for every masked pixel."""
    cloud = lift_depth(depth, mask, intrinsics)
    nmap = estimate_normals_pca(cloud, k=k, radius_pixels=radius_pixels)
    return orient_toward_camera(nmap, cloud)


def angular_error_deg(a, b) -> np.ndarray:
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def visual_hull_depth(views, index: int, n_steps: int = 400) -> np.ndarray:
    """Camera-z depth of the first point on each masked ray that every other view's mask covers.

    Uses only masks and calibrated poses; NaN where no such point lies inside
    the bounding ball.
    """
    from .scene import ball_interval

    view = views[index]
    cam = view.camera
    o, d = cam.pixel_rays()
    m = view.mask
    near, far = ball_interval(o[m], d[m])
    near = np.nan_to_num(near)
    far = np.nan_to_num(far)
    ts = near[:, None] + (far - near)[:, None] * np.linspace(0.0, 1.0, n_steps)[None]
    pts = o[m][:, None, :] + ts[..., None] * d[m][:, None, :]
    inside = np.ones(ts.shape, dtype=bool)
    for j, other in enumerate(views):
        if j == index:
            continue
        uv, z = other.camera.project(pts)
        u = np.floor(uv[..., 0]).astype(int)
        v = np.floor(uv[..., 1]).astype(int)
        ok = (u >= 0) & (u < other.camera.width) & (v >= 0) & (v < other.camera.height) & (z > 0)
        covered = np.zeros(ts.shape, dtype=bool)
        covered[ok] = other.mask[v[ok], u[ok]]
        inside &= covered
    first = np.argmax(inside, axis=1)
    has = inside.any(axis=1)
    t = ts[np.arange(len(ts)), first]
    depth = np.full(m.shape, np.nan)
    depth[m] = np.where(has, t * (d[m] @ cam.rotation[:, 2]), np.nan)
    return depth


def align_relative_depth(relative, mask, reference) -> np.ndarray:
    """Least-squares scale and shift taking relative depth onto a metric reference."""
    ok = mask & np.isfinite(reference) & np.isfinite(relative)
    if ok.sum() < 2:
        raise DepthDataError("not enough reference pixels to align relative depth")
    A = np.stack([relative[ok], np.ones(ok.sum())], axis=-1)
    scale, shift = np.linalg.lstsq(A, reference[ok], rcond=None)[0]
    if scale <= 0:
        raise DepthDataError(f"degenerate depth alignment (scale={scale:.3g})")
    return np.where(mask, scale * relative + shift, np.inf)


def estimate_view_normals(views, index: int, depth_mode: str = "metric", **kw) -> NormalMap:
    """Camera-frame normals for one view of a dataset.

    Relative depth maps are first aligned to the visual hull of the other
    views' masks; min-max normalisation removes a shift that a pinhole lift
    cannot ignore.
    """
    view = views[index]
    depth = view.depth
    if depth_mode != "metric":
        depth = align_relative_depth(depth, view.mask, visual_hull_depth(views, index))
    return depth_to_normals(depth, view.mask, view.camera.intrinsics, **kw)


def estimate_dataset_normals(dataset) -> None:
    """Fill ``normal_est`` / ``normal_est_valid`` on every view in place."""
    for i, view in enumerate(dataset.views):
        nmap = estimate_view_normals(dataset.views, i, dataset.depth_mode)
        view.normal_est = nmap.normals
        view.normal_est_valid = nmap.valid
