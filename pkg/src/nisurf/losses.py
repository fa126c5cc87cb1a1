"""Photometric, Eikonal and depth-normal consistency losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    eikonal: float = 0.1
    normal: float = 0.5

    def __post_init__(self):
        if self.eikonal < 0 or self.normal < 0:
            raise ValueError("loss weights must be non-negative")


def loss_color(rendered, target, m: int | None = None):
    """(1/m) * sum over pixels of the L1 norm of the colour difference."""
    m = len(np.asarray(target)) if m is None else m
    return ad.mul(ad.vsum(ad.absolute(ad.sub(rendered, target))), 1.0 / m)


def gradient_norm(vec, floor: float = 1e-24):
    """Euclidean norm over the last axis; exactly 0 (with zero gradient) for zero vectors."""
    sq = ad.vsum(ad.mul(vec, vec), axis=-1)
    return ad.where(np.asarray(ad.value_of(sq)) > 0, ad.sqrt(ad.maximum(sq, floor)), 0.0)


def loss_eikonal(grad, n_points: int | None = None):
    """Mean of (|grad f| - 1)^2 over the points whose spatial gradients are given."""
    g = gradient_norm(grad)
    n_points = int(np.prod(np.shape(ad.value_of(g)))) if n_points is None else n_points
    return ad.mul(ad.vsum(ad.power(ad.sub(g, 1.0), 2.0)), 1.0 / n_points)


def loss_dnc(estimated, rendered, valid, m: int | None = None):
    """(1/m) * sum over valid pixels of |n - n_hat|; both inputs in the world frame."""
    valid = np.asarray(valid, dtype=bool)
    m = len(valid) if m is None else m
    if not valid.any():
        log.warning("no valid pixels for the normal loss; contributing 0")
        return 0.0
    idx = np.flatnonzero(valid)
    diff = ad.sub(ad.getitem(rendered, (idx,)), np.asarray(estimated)[idx])
    return ad.mul(ad.vsum(gradient_norm(diff)), 1.0 / m)


def total_loss(color, eikonal, normal, weights: LossWeights = LossWeights()):
    return ad.add(ad.add(color, ad.mul(eikonal, weights.eikonal)), ad.mul(normal, weights.normal))
