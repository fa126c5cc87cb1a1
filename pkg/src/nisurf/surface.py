"""First zero-crossing localisation along rays and SDF-gradient normals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DEGENERATE_BRACKET = 1e-12
MIN_GRADIENT = 1e-9


class DegenerateBracketError(ValueError):
    pass


@dataclass
class SurfaceHit:
    t: object  # (R,) distance along ray; tape node during training
    x: object  # (R, 3)
    normal: object  # (R, 3) unit, world frame
    valid: np.ndarray  # (R,) bool


def find_first_crossing(f):
    """Smallest k with f[k] > 0 and f[k+1] < 0 along the last axis; -1 if none."""
    f = np.asarray(ad.value_of(f))
    cross = (f[..., :-1] > 0) & (f[..., 1:] < 0)
    k = np.argmax(cross, axis=-1)
    return np.where(cross.any(axis=-1), k, -1)


def interpolate_crossing(t_k, t_k1, f_k, f_k1):
    """Root of the line through (t_k, f_k) and (t_k1, f_k1).

    Differentiable in ``f_k`` and ``f_k1`` when they are tape nodes.
    """
    gap = np.asarray(ad.value_of(f_k)) - np.asarray(ad.value_of(f_k1))
    if np.any(np.abs(gap) < DEGENERATE_BRACKET):
        raise DegenerateBracketError("|f_k - f_k+1| below 1e-12")
    num = ad.sub(ad.mul(f_k, t_k1), ad.mul(f_k1, t_k))
    return ad.div(num, ad.sub(f_k, f_k1))


def unit_normal(grad):
    """grad / |grad| and a validity mask (|grad| >= 1e-9)."""
    sq = ad.vsum(ad.mul(grad, grad), axis=-1)
    sqv = np.asarray(ad.value_of(sq))
    valid = sqv >= MIN_GRADIENT**2
    length = ad.sqrt(ad.maximum(sq, MIN_GRADIENT**2))
    return ad.div(grad, ad.reshape(length, np.shape(sqv) + (1,))), valid


def surface_normal(sdf_fn, x):
    """Unit SDF gradient at surface points ``x`` (array or tape node)."""
    _, grad = ad.spatial_eval(sdf_fn, x)
    return unit_normal(grad)


def localize(t, f, o, v, near=None, far=None):
    """Bracket and interpolate the first outside-to-inside crossing of each ray.

    ``t`` (R, N) are constants; ``f`` (R, N) may be a tape node so that the
    returned surface point stays differentiable in the network parameters.
    Brackets whose end values both exceed half the ray's [near, far] length
    in magnitude are rejected as spurious. Returns ``(t_bar, x_hat, valid)``
    restricted to the valid rays, plus the valid mask over all rays.
    """
    t = np.asarray(t)
    fv = np.asarray(ad.value_of(f))
    k = find_first_crossing(fv)
    valid = k >= 0
    rows = np.flatnonzero(valid)
    kk = k[rows]
    fk, fk1 = fv[rows, kk], fv[rows, kk + 1]
    ok = np.abs(fk - fk1) >= DEGENERATE_BRACKET
    if near is not None and far is not None:
        half = 0.5 * (np.asarray(far)[rows] - np.asarray(near)[rows])
        ok &= ~((np.abs(fk) > half) & (np.abs(fk1) > half))
    rows, kk = rows[ok], kk[ok]
    valid = np.zeros(len(t), dtype=bool)
    valid[rows] = True
    f_k = ad.getitem(f, (rows, kk))
    f_k1 = ad.getitem(f, (rows, kk + 1))
    t_bar = interpolate_crossing(t[rows, kk], t[rows, kk + 1], f_k, f_k1)
    x_hat = ad.add(np.asarray(o)[rows], ad.mul(ad.reshape(t_bar, (len(rows), 1)), np.asarray(v)[rows]))
    return t_bar, x_hat, valid
