"""Ray batches, the per-step forward/backward pass and the optimisation loop."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, NumericError
from .config import RunConfig
from .depth_normals import estimate_view_normals, normals_to_world
from .field import SdfFieldModel
from .losses import loss_color, loss_dnc, loss_eikonal
from .optim import Adam, warmup_cosine
from .render import accumulated_normal, alpha_from_sdf, composite, sample_hierarchical, sphere_near_far
from .surface import localize, unit_normal

log = logging.getLogger(__name__)


class NormalSupervision:
    """World-frame depth normals per view, with a read counter for instrumentation."""

    def __init__(self, dataset):
        self.dataset = dataset
        self.reads = 0
        self._cache = {}

    def _view(self, index):
        if index not in self._cache:
            view = self.dataset.views[index]
            if view.normal_est is None:
                nmap = estimate_view_normals(self.dataset.views, index, self.dataset.depth_mode)
                view.normal_est, view.normal_est_valid = nmap.normals, nmap.valid
            world = normals_to_world(view.normal_est, view.camera.world_from_camera)
            self._cache[index] = (world, np.asarray(view.normal_est_valid, dtype=bool))
        return self._cache[index]

    def lookup(self, index, rows, cols):
        self.reads += 1
        world, valid = self._view(index)
        return world[rows, cols], valid[rows, cols]


@dataclass
class RayBatch:
    view: int
    rows: np.ndarray
    cols: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None
    normals_valid: np.ndarray | None = None


def sample_pixels(mask, m: int, fg_fraction: float, rng):
    """``round(fg_fraction * m)`` pixels from the mask, the rest from the whole image."""
    H, W = mask.shape
    fg = np.flatnonzero(mask.ravel())
    n_fg = int(round(fg_fraction * m)) if fg.size else 0
    picks = [rng.choice(fg, n_fg, replace=n_fg > fg.size)] if n_fg else []
    picks.append(rng.integers(0, H * W, m - n_fg))
    flat = np.concatenate(picks)
    return flat // W, flat % W


def _identity_tangent(x):
    eye = np.eye(3).reshape((3,) + (1,) * (x.ndim - 1) + (3,))
    return np.broadcast_to(eye, (3,) + x.shape)


def render_rays(model: SdfFieldModel, o, v, sampling, background, params=None, normal_method="localized",
                m: int | None = None, target=None, normals=None, normals_valid=None,
                crossing_gradient: bool = False):
    """Forward pass over a ray chunk.

    Untaped when ``params`` is None; otherwise every output is a node on the
    parameter tape. Returns a dict with rendered colour, rendered normal and
    its validity, the Eikonal sum and (when targets are given) the partial
    loss terms already divided by the global batch size ``m``.

    With ``crossing_gradient`` the localized point keeps its dependence on
    the bracketing SDF values; by default it is a constant and the normal
    loss acts only through the field gradient at that point.
    """
    o = np.asarray(o, dtype=float)
    v = np.asarray(v, dtype=float)
    R = len(o)
    near, far = sphere_near_far(o, v)
    hit = np.isfinite(near) & (far > near)
    out = {
        "color": np.tile(np.asarray(background, dtype=float), (R, 1)),
        "normal": np.zeros((R, 3)),
        "normal_valid": np.zeros(R, dtype=bool),
        "hit": hit,
        "t": None,
    }
    terms = {"color": 0.0, "eikonal": 0.0, "normal": 0.0}
    m = R if m is None else m
    idx = np.flatnonzero(hit)
    if idx.size == 0:
        if target is not None:
            terms["color"] = float(np.abs(out["color"] - target).sum()) / m
        return out, terms
    oh, vh = o[idx], v[idx]
    t = sample_hierarchical(model.sdf, oh, vh, near[idx], far[idx], sampling)
    out["t"] = t
    N = t.shape[1]
    x = oh[:, None, :] + t[..., None] * vh[:, None, :]
    p = model.store.arrays() if params is None else params
    f_dual, feat = model.sdf_forward(Dual(x, _identity_tangent(x)), p)
    f, grad = f_dual.val, f_dual.gradient()
    s = ad.exp(ad.mul(ad.getitem(p["variance"], (0,)), 10.0))
    alphas = alpha_from_sdf(ad.getitem(f, (slice(None), slice(0, N - 1))), ad.getitem(f, (slice(None), slice(1, N))), s)
    left = (slice(None), slice(0, N - 1))
    rgb = model.color_forward(
        x[:, :-1], np.broadcast_to(vh[:, None, :], (len(idx), N - 1, 3)),
        ad.getitem(grad, left), ad.getitem(feat, left), p,
    )
    acc, weights, opacity = composite(alphas, rgb)
    bg = np.asarray(background, dtype=float)
    color_hit = ad.add(acc, ad.mul(ad.reshape(ad.sub(1.0, opacity), (len(idx), 1)), bg))

    # rendered normals exist only on ``rows`` (indices into the hit rays)
    rows, n_rows = np.zeros(0, dtype=int), None
    if normal_method == "localized":
        f_bracket = f if crossing_gradient else ad.value_of(f)
        _, x_hat, ok = localize(t, f_bracket, oh, vh, near[idx], far[idx])
        rows = np.flatnonzero(ok)
        if rows.size:
            _, g_hat = ad.spatial_eval(lambda d: model.sdf_forward(d, p, with_feature=False)[0], x_hat)
            n_rows, n_ok = unit_normal(g_hat)
            keep = np.flatnonzero(n_ok)
            if keep.size < rows.size:
                n_rows, rows = ad.getitem(n_rows, (keep,)), rows[keep]
    elif normal_method == "accumulated":
        n_rows, ok = accumulated_normal(weights, ad.getitem(grad, left))
        rows = np.flatnonzero(ok)
        n_rows = ad.getitem(n_rows, (rows,))

    if target is not None:
        target = np.asarray(target, dtype=float)
        miss = np.flatnonzero(~hit)
        const = float(np.abs(out["color"][miss] - target[miss]).sum()) / m
        terms["color"] = ad.add(loss_color(color_hit, target[idx], m), const)
        terms["eikonal"] = loss_eikonal(grad, n_points=m * N)
        if normals is not None and rows.size:
            use = np.asarray(normals_valid, dtype=bool)[idx[rows]]
            if use.any():
                terms["normal"] = loss_dnc(np.asarray(normals)[idx[rows]], n_rows, use, m)

    out["color"][idx] = ad.value_of(color_hit)
    if rows.size:
        out["normal"][idx[rows]] = ad.value_of(n_rows)
        out["normal_valid"][idx[rows]] = True
    out["opacity"] = np.zeros(R)
    out["opacity"][idx] = ad.value_of(opacity)
    return out, terms


@dataclass
class StepRecord:
    step: int
    L_color: float
    L_eik: float
    L_dnc: float
    s: float
    ms: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


class Trainer:
    """Optimises an :class:`SdfFieldModel` against a loaded dataset."""

    def __init__(self, dataset, config: RunConfig, model: SdfFieldModel | None = None, threads: int = 1):
        if len(dataset.views) < 2:
            raise ValueError("training needs at least 2 views")
        self.dataset = dataset
        self.config = config
        tr = config.train
        self.model = model or SdfFieldModel(config.model, seed=tr.seed)
        self.rng = np.random.default_rng(tr.seed)
        self.opt = Adam(len(self.model.store), lr=tr.lr)
        self.threads = max(1, int(threads))
        self.step = 0
        self.total_steps = tr.steps or tr.epochs * len(dataset.views)
        self.supervise_normals = tr.mode != "off" and config.loss.normal > 0
        self.normals = NormalSupervision(dataset)
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def next_batch(self) -> RayBatch:
        tr = self.config.train
        index = self.step % len(self.dataset.views)
        view = self.dataset.views[index]
        rows, cols = sample_pixels(view.mask, tr.rays_per_step, tr.foreground_fraction, self.rng)
        o, d = view.camera.pixel_rays()
        batch = RayBatch(index, rows, cols, o[rows, cols], d[rows, cols], view.rgb[rows, cols])
        if self.supervise_normals:
            batch.normals, batch.normals_valid = self.normals.lookup(index, rows, cols)
        return batch

    def _chunk(self, batch: RayBatch, lo: int, hi: int):
        cfg = self.config
        tape = ad.Tape()
        params = self.model.store.bind(tape)
        m = len(batch.rows)
        sl = slice(lo, hi)
        _, terms = render_rays(
            self.model, batch.origins[sl], batch.dirs[sl], cfg.sampling, self.dataset.background,
            params=params, normal_method=cfg.train.mode if self.supervise_normals else "off", m=m,
            target=batch.colors[sl],
            normals=None if batch.normals is None else batch.normals[sl],
            normals_valid=None if batch.normals_valid is None else batch.normals_valid[sl],
            crossing_gradient=cfg.train.crossing_gradient,
        )
        eik = terms["eikonal"]
        loss = ad.add(ad.add(terms["color"], ad.mul(eik, cfg.loss.eikonal)), ad.mul(terms["normal"], cfg.loss.normal))
        parts = [float(ad.value_of(x)) for x in (terms["color"], eik, terms["normal"])]
        if isinstance(loss, ad.Var):
            grad = ad.backward(loss, params)
        else:
            grad = np.zeros(len(self.model.store))
        return parts, grad

    def train_step(self) -> StepRecord:
        start = time.perf_counter()
        tr = self.config.train
        batch = self.next_batch()
        m = len(batch.rows)
        bounds = [(lo, min(lo + tr.chunk_rays, m)) for lo in range(0, m, tr.chunk_rays)]
        try:
            if self._pool is None:
                results = [self._chunk(batch, lo, hi) for lo, hi in bounds]
            else:
                results = list(self._pool.map(lambda b: self._chunk(batch, *b), bounds))
        except NumericError as exc:
            raise TrainingDiverged(str(exc), batch, self.step) from exc
        # ordered reduction keeps the step independent of the worker count
        grad = np.zeros(len(self.model.store))
        comps = [0.0, 0.0, 0.0]
        for parts, g in results:
            grad += g
            comps = [a + b for a, b in zip(comps, parts)]
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(comps))):
            raise TrainingDiverged("non-finite loss or gradient", batch, self.step)
        lr = warmup_cosine(self.step, self.total_steps, tr.lr, tr.warmup_steps, tr.lr_min)
        self.opt.step(self.model.store.values, grad, lr=lr)
        rec = StepRecord(self.step, comps[0], comps[1], comps[2], self.model.s(),
                         (time.perf_counter() - start) * 1000.0)
        self.step += 1
        return rec

    def fit(self, out_dir=None, steps: int | None = None, callback=None) -> list[StepRecord]:
        steps = self.total_steps if steps is None else steps
        out = Path(out_dir) if out_dir is not None else None
        records = []
        logf = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            logf = open(out / "train_log.jsonl", "w")
        try:
            for _ in range(steps):
                try:
                    rec = self.train_step()
                except TrainingDiverged as exc:
                    if out is not None:
                        exc.dump(out / "diverged_batch.npz")
                    raise
                records.append(rec)
                if logf is not None:
                    logf.write(rec.to_json() + "\n")
                    every = self.config.train.checkpoint_every
                    if every and self.step % every == 0:
                        self.model.save(out / f"checkpoint_{self.step:06d}.bin", self.step)
                if callback is not None:
                    callback(rec)
            if out is not None:
                self.model.save(out / "checkpoint_final.bin", self.step)
        finally:
            if logf is not None:
                logf.close()
            self.close()
        return records


class TrainingDiverged(RuntimeError):
    def __init__(self, message, batch: RayBatch, step: int):
        super().__init__(f"step {step}: {message}")
        self.batch = batch
        self.step = step
        self.dump_path = None

    def dump(self, path) -> None:
        b = self.batch
        np.savez(path, step=self.step, view=b.view, rows=b.rows, cols=b.cols,
                 origins=b.origins, dirs=b.dirs, colors=b.colors)
        self.dump_path = str(path)


def render_normal_map(model, camera, mask, sampling, method="localized", chunk: int = 1024):
    """World-frame rendered normals for the masked pixels of one view."""
    o, d = camera.pixel_rays()
    rows, cols = np.nonzero(mask)
    normals = np.zeros(mask.shape + (3,))
    valid = np.zeros(mask.shape, dtype=bool)
    for lo in range(0, len(rows), chunk):
        r, c = rows[lo : lo + chunk], cols[lo : lo + chunk]
        out, _ = render_rays(model, o[r, c], d[r, c], sampling, np.zeros(3), normal_method=method)
        normals[r, c] = out["normal"]
        valid[r, c] = out["normal_valid"]
    return normals, valid


def rendered_normal_mae(model, dataset, sampling, method="localized") -> float:
    """Mean angular error (degrees) of rendered normals against ground truth over all views."""
    errs = []
    for view in dataset.views:
        pred, valid = render_normal_map(model, view.camera, view.mask, sampling, method)
        gt = normals_to_world(view.normal, view.camera.world_from_camera)
        ok = valid & view.mask
        cos = np.clip(np.sum(pred[ok] * gt[ok], axis=-1), -1.0, 1.0)
        # pixels where the method finds no surface count as 90 degrees
        errs.append(np.degrees(np.arccos(cos)))
        errs.append(np.full(int((view.mask & ~valid).sum()), 90.0))
    return float(np.mean(np.concatenate(errs)))


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
