"""Ray sampling, SDF-to-opacity conversion and alpha compositing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .scene import BOUND_RADIUS, ball_interval

EPS_PHI = 1e-8
MERGE_EPS = 1e-9


@dataclass
class SamplingConfig:
    n_coarse: int = 32
    n_rounds: int = 4
    n_per_round: int = 16
    base_s: float = 64.0

    @property
    def total(self) -> int:
        return self.n_coarse + self.n_rounds * self.n_per_round


# 256 samples per ray: 16 coarse plus 16 refinement rounds of 15
FINE_SAMPLING = SamplingConfig(n_coarse=16, n_rounds=16, n_per_round=15)


def sphere_near_far(o, v, radius: float = BOUND_RADIUS):
    """(near, far) of the ray inside the bounding ball; NaN pair for a miss."""
    return ball_interval(o, v, radius)


def sigmoid_s(f, s):
    """Phi_s(f) = 1 / (1 + exp(-s f)); ``s`` may be a float or tape scalar."""
    if isinstance(s, (int, float)):
        return ad.sigmoid(f, float(s))
    return ad.sigmoid(ad.mul(f, s))


def alpha_from_sdf(f, f_next, s):
    """clamp((Phi_s(f) - Phi_s(f_next)) / max(Phi_s(f), eps), 0, 1)."""
    phi = sigmoid_s(f, s)
    phi_next = sigmoid_s(f_next, s)
    return ad.clip(ad.div(ad.sub(phi, phi_next), ad.maximum(phi, EPS_PHI)), 0.0, 1.0)


def composite(alphas, values=None):
    """Weights w_i = T_i alpha_i with T_i = prod_{j<i}(1 - alpha_j).

    Returns ``(accumulated value or None, weights, opacity)``; ``values`` has
    one trailing channel axis more than ``alphas``.
    """
    trans = ad.exclusive_cumprod(ad.sub(1.0, alphas))
    weights = ad.mul(trans, alphas)
    opacity = ad.vsum(weights, axis=-1)
    if values is None:
        return None, weights, opacity
    w = ad.reshape(weights, np.shape(ad.value_of(weights)) + (1,))
    return ad.vsum(ad.mul(w, values), axis=-2), weights, opacity


def accumulated_normal(weights, gradients, eps: float = 1e-12):
    """Normalised sum of weighted SDF gradients; flags rays where it vanishes."""
    w = ad.reshape(weights, np.shape(ad.value_of(weights)) + (1,))
    n = ad.vsum(ad.mul(w, gradients), axis=-2)
    sq = ad.vsum(ad.mul(n, n), axis=-1)
    valid = ad.value_of(sq) > eps
    length = ad.sqrt(ad.maximum(sq, eps))
    unit = ad.div(n, ad.reshape(length, np.shape(ad.value_of(length)) + (1,)))
    return unit, valid


def _weights_np(t, f, s):
    alphas = alpha_from_sdf(f[..., :-1], f[..., 1:], s)
    _, w, _ = composite(alphas)
    return w


def _inverse_cdf(t, weights, n_new):
    """Deterministic stratified inverse-transform samples over the intervals of ``t``."""
    R = t.shape[0]
    total = weights.sum(axis=-1, keepdims=True)
    flat = total[:, 0] <= 0
    pdf = np.where(flat[:, None], 1.0, weights) / np.where(flat, weights.shape[-1], total[:, 0])[:, None]
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    u = np.broadcast_to((np.arange(n_new) + 0.5) / n_new, (R, n_new))
    idx = np.clip((u[:, :, None] >= cdf[:, None, :]).sum(axis=-1) - 1, 0, weights.shape[-1] - 1)
    rows = np.arange(R)[:, None]
    c0, c1 = cdf[rows, idx], cdf[rows, idx + 1]
    frac = (u - c0) / np.where(c1 - c0 > 0, c1 - c0, 1.0)
    t0, t1 = t[rows, idx], t[rows, idx + 1]
    new = t0 + frac * (t1 - t0)
    if flat.any():
        near, far = t[flat, :1], t[flat, -1:]
        new[flat] = near + (far - near) * u[flat]
    return new


def _merge(t, f, t_new, f_new):
    t_all = np.concatenate([t, t_new], axis=-1)
    f_all = np.concatenate([f, f_new], axis=-1)
    order = np.argsort(t_all, axis=-1, kind="stable")
    rows = np.arange(t.shape[0])[:, None]
    t_all, f_all = t_all[rows, order], f_all[rows, order]
    dup = np.diff(t_all, axis=-1) <= MERGE_EPS
    if dup.any():
        for r in np.flatnonzero(dup.any(axis=-1)):
            t_all[r], f_all[r] = _refill(t_all[r], f_all[r])
    return t_all, f_all


def _refill(t, f):
    """Drop near-duplicates and split the widest gaps to restore the count."""
    keep = np.concatenate([[True], np.diff(t) > MERGE_EPS])
    n = len(t)
    t, f = t[keep], f[keep]
    while len(t) < n:
        i = int(np.argmax(np.diff(t)))
        t = np.insert(t, i + 1, 0.5 * (t[i] + t[i + 1]))
        f = np.insert(f, i + 1, 0.5 * (f[i] + f[i + 1]))
    return t, f


def sample_hierarchical(sdf_fn, o, v, near, far, config: SamplingConfig = SamplingConfig(),
                        return_sdf: bool = False):
    """Sorted sample depths per ray, shape (R, config.total).

    Starts from ``n_coarse`` equidistant depths in [near, far]; each round
    converts the current samples into compositing weights (with sharpness
    ``base_s * 2**round``) and places ``n_per_round`` more by inverse-transform
    sampling. Interpolated SDF values are used for samples created by the
    duplicate refill, so callers needing exact values should re-evaluate.
    """
    o = np.atleast_2d(o)
    v = np.atleast_2d(v)
    near = np.atleast_1d(near)
    far = np.atleast_1d(far)
    if np.any(~(near < far)):
        raise ValueError("every ray needs near < far")
    u = np.linspace(0.0, 1.0, config.n_coarse)
    t = near[:, None] + (far - near)[:, None] * u[None]

    def evaluate(ts):
        pts = o[:, None, :] + ts[..., None] * v[:, None, :]
        return sdf_fn(pts.reshape(-1, 3)).reshape(ts.shape)

    f = evaluate(t)
    for r in range(config.n_rounds):
        w = _weights_np(t, f, config.base_s * 2.0**r)
        t_new = _inverse_cdf(t, w, config.n_per_round)
        t, f = _merge(t, f, t_new, evaluate(t_new))
    return (t, f) if return_sdf else t


def sample_single_ray(sdf_fn, o, v, near, far, config: SamplingConfig = SamplingConfig()):
    """One-ray form that removes duplicates instead of refilling them."""
    o = np.asarray(o, dtype=float)
    v = np.asarray(v, dtype=float)
    u = np.linspace(0.0, 1.0, config.n_coarse)
    t = near + (far - near) * u
    f = sdf_fn(o[None] + t[:, None] * v[None])
    for r in range(config.n_rounds):
        w = _weights_np(t, f, config.base_s * 2.0**r)
        t_new = _inverse_cdf(t[None], w[None], config.n_per_round)[0]
        t = np.concatenate([t, t_new])
        f = np.concatenate([f, sdf_fn(o[None] + t_new[:, None] * v[None])])
        order = np.argsort(t, kind="stable")
        t, f = t[order], f[order]
        keep = np.concatenate([[True], np.diff(t) > MERGE_EPS])
        t, f = t[keep], f[keep]
    return t
