"""Isosurface extraction, OBJ I/O and the Chamfer / normal-MAE metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

DEFAULT_BOUNDS = (-1.05, 1.05)


class MetricError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    normals: np.ndarray  # (V, 3) unit
    faces: np.ndarray  # (F, 3) int

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def area(self) -> float:
        return float(self.face_areas().sum())


# ---------------------------------------------------------------- extraction


def _grid(resolution, bounds):
    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution)
    return axis, (hi - lo) / (resolution - 1)


def sample_grid(field, resolution: int = 128, bounds=DEFAULT_BOUNDS, slab: int = 16) -> np.ndarray:
    """Field values on a resolution^3 lattice, evaluated one x-slab at a time."""
    axis, _ = _grid(resolution, bounds)
    vol = np.empty((resolution,) * 3)
    yy, zz = np.meshgrid(axis, axis, indexing="ij")
    for i in range(0, resolution, slab):
        xs = axis[i : i + slab]
        pts = np.stack(np.broadcast_arrays(xs[:, None, None], yy[None], zz[None]), axis=-1)
        vol[i : i + len(xs)] = np.asarray(field(pts.reshape(-1, 3))).reshape(len(xs), resolution, resolution)
    return vol


def _fd_gradient(field, x, h=1e-5):
    g = np.empty_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (np.asarray(field(x + e)) - np.asarray(field(x - e))) / (2 * h)
    return g


def cleanup(mesh: TriangleMesh, min_area: float = 1e-14) -> TriangleMesh:
    """Drop zero-area and repeated-index faces, then unreferenced vertices."""
    f = mesh.faces
    distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    keep = distinct & (mesh.face_areas() > min_area)
    f = f[keep]
    used = np.unique(f)
    remap = -np.ones(len(mesh.vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], mesh.normals[used], remap[f])


def marching_cubes(field, resolution: int = 128, bounds=DEFAULT_BOUNDS, iso: float = 0.0,
                   gradient=None) -> TriangleMesh:
    """Triangulate {field = iso} over the cube ``bounds``^3.

    ``field`` maps (N, 3) points to (N,) values; ``gradient`` (optional) maps
    them to (N, 3) spatial gradients and defaults to central differences.
    Faces are wound so their normals point toward increasing field values,
    matching the vertex normals.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    vol = sample_grid(field, resolution, bounds)
    if not (vol.min() < iso < vol.max()):
        return TriangleMesh.empty()
    _, step = _grid(resolution, bounds)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=(step,) * 3)
    verts = verts + bounds[0]
    grads = gradient(verts)[1] if gradient is not None else _fd_gradient(field, verts)
    grads = np.asarray(grads, dtype=float)
    length = np.linalg.norm(grads, axis=-1, keepdims=True)
    normals = grads / np.where(length > 0, length, 1.0)
    faces = faces.astype(np.int64)
    mesh = cleanup(TriangleMesh(verts, normals, faces))
    if not mesh.is_empty:
        a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
        face_n = np.cross(b - a, c - a)
        vert_n = mesh.normals[mesh.faces].sum(axis=1)
        if np.sum(face_n * vert_n) < 0:
            mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


# ------------------------------------------------------------------ topology


def edge_face_counts(mesh: TriangleMesh) -> np.ndarray:
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def is_closed_manifold(mesh: TriangleMesh) -> bool:
    """Every edge borders exactly two faces."""
    return not mesh.is_empty and bool(np.all(edge_face_counts(mesh) == 2))


def connected_components(mesh: TriangleMesh) -> int:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components as cc

    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    n = len(mesh.vertices)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return int(cc(graph, directed=False)[0])


def genus(mesh: TriangleMesh) -> int:
    """Genus of a closed connected surface from its Euler characteristic."""
    n_edges = len(edge_face_counts(mesh))
    chi = len(mesh.vertices) - n_edges + len(mesh.faces)
    return (2 - chi) // 2


# ----------------------------------------------------------------------- OBJ


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
    lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, norms, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "vn":
            norms.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    v = np.array(verts, dtype=float).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(norms) != len(verts):
        return TriangleMesh(v, vertex_normals(v, f), f)
    n = np.array(norms, dtype=float).reshape(-1, 3)
    # nine printed digits leave |n| off by ~1e-9, which arccos turns into ~1e-3 degrees
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    return TriangleMesh(v, n / np.where(length > 0, length, 1.0), f)


def vertex_normals(vertices, faces) -> np.ndarray:
    """Area-weighted face-normal average, for meshes stored without normals."""
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    fn = np.cross(b - a, c - a)
    n = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(n, faces[:, i], fn)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.where(length > 0, length, 1.0)


# ------------------------------------------------------------------- metrics


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0):
    """Area-uniform surface samples: (points, face index, barycentric weights)."""
    if mesh.is_empty:
        raise MetricError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=-1)
    tri = mesh.vertices[mesh.faces[face]]
    return np.einsum("nk,nkd->nd", bary, tri), face, bary


def chamfer(a: TriangleMesh, b: TriangleMesh, n_samples: int = 100000, seed: int = 0) -> float:
    """Symmetric mean of mean nearest-neighbour distances between surface samples."""
    if a.is_empty or b.is_empty:
        raise MetricError("chamfer needs two non-empty meshes")
    pa, _, _ = sample_surface(a, n_samples, seed)
    pb, _, _ = sample_surface(b, n_samples, seed)
    d_ab = cKDTree(pb).query(pa)[0].mean()
    d_ba = cKDTree(pa).query(pb)[0].mean()
    return float(0.5 * (d_ab + d_ba))


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, all (N, 3).

    Returns the points and their barycentric coordinates.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, w):
        nonlocal done
        mask = mask & ~done
        bary[mask] = w[mask] if np.ndim(w) == 2 else w
        done |= mask

    with np.errstate(divide="ignore", invalid="ignore"):
        one = np.ones(n)
        zero = np.zeros(n)
        assign((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))
        assign((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, zero], -1))
        assign((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, zero, w], -1))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([zero, 1 - w, w], -1))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(one > 0, np.stack([1 - v - w, v, w], -1))
    bary = np.nan_to_num(bary)
    pts = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return pts, bary


def closest_surface_points(mesh: TriangleMesh, queries, k: int = 8):
    """Exact closest point on ``mesh`` for every query: (points, face, barycentric).

    A k-nearest-centroid pass gives an upper bound on the distance; every
    triangle whose centroid lies within that bound plus the largest
    centroid-to-vertex radius is then checked exactly.
    """
    queries = np.asarray(queries, dtype=float)
    tri = mesh.vertices[mesh.faces]
    centroids = tri.mean(axis=1)
    radius = float(np.linalg.norm(tri - centroids[:, None], axis=-1).max())
    tree = cKDTree(centroids)
    k = min(k, len(centroids))

    def best_over(q_idx, f_idx):
        pts, bary = closest_point_on_triangles(queries[q_idx], *(tri[f_idx, i] for i in range(3)))
        return pts, bary, np.linalg.norm(pts - queries[q_idx], axis=-1)

    _, cand = tree.query(queries, k=k)
    cand = cand.reshape(len(queries), -1)
    q_idx = np.repeat(np.arange(len(queries)), cand.shape[1])
    _, _, dist = best_over(q_idx, cand.ravel())
    bound = dist.reshape(cand.shape).min(axis=1)
    balls = tree.query_ball_point(queries, bound + radius + 1e-12)
    counts = np.array([len(b) for b in balls])
    q_idx = np.repeat(np.arange(len(queries)), counts)
    f_idx = np.concatenate([np.asarray(b, dtype=np.int64) for b in balls])
    pts, bary, dist = best_over(q_idx, f_idx)
    order = np.lexsort((dist, q_idx))
    first = order[np.r_[0, np.flatnonzero(np.diff(q_idx[order])) + 1]]
    return pts[first], f_idx[first], bary[first]


def normal_mae(pred: TriangleMesh, gt: TriangleMesh, chunk: int = 20000) -> float:
    """Mean angle (degrees) between each ground-truth vertex normal and the
    interpolated predicted normal at its closest predicted surface point."""
    if pred.is_empty or gt.is_empty:
        raise MetricError("normal_mae needs two non-empty meshes")
    errs = []
    for lo in range(0, len(gt.vertices), chunk):
        q = gt.vertices[lo : lo + chunk]
        _, face, bary = closest_surface_points(pred, q)
        n = np.einsum("nk,nkd->nd", bary, pred.normals[pred.faces[face]])
        n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
        cos = np.clip(np.sum(n * gt.normals[lo : lo + chunk], axis=-1), -1.0, 1.0)
        errs.append(np.degrees(np.arccos(cos)))
    return float(np.concatenate(errs).mean())


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, n_samples: int = 100000, seed: int = 0) -> dict:
    return {
        "chamfer": chamfer(pred, gt, n_samples, seed),
        "normal_mae_deg": normal_mae(pred, gt),
        "n_samples": n_samples,
        "seed": seed,
    }


def write_metrics(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2) + "\n")
