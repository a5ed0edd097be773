"""Convolutional distance transform (CDT).

Pipeline: Gumbel-softmax binarisation of the two-channel probability map,
soft boundary from max-pool morphology, then a smooth minimum over boundary
distances realised as one convolution with a pre-exponentiated Euclidean
distance kernel followed by a scaled log.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import PROB_FLOOR, EmptyForegroundError
from .synth import hard_boundary
from .volume import Kernel3, Volume


@dataclass(frozen=True)
class GumbelParams:
    tau: float = 0.1
    rng_seed: int = 0
    frozen_noise: tuple = None  # (g_bg, g_fg) arrays of Gumbel samples
    eval_mode: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class CdtParams:
    gamma: float = -0.3
    kernel_size: int = 31

    def __post_init__(self):
        if self.gamma >= 0:
            raise ValueError("gamma must be negative")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 3")

    @property
    def d_cap(self):
        return self.kernel_size // 2

    @property
    def beta(self):
        return 1.0 / self.gamma


def sample_gumbel(shape, rng):
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(prob2, p=GumbelParams(), rng=None):
    """Relaxed one-hot sample from a two-channel probability map.

    ``rng`` (a numpy Generator) supplies fresh noise; without it, and without
    ``frozen_noise``, noise is drawn from ``p.rng_seed``.
    """
    y0, y1 = (T.as_node(c) for c in prob2)
    if p.eval_mode:
        fg = (y1.value >= y0.value).astype(np.float64)
        return T.DiffNode(1.0 - fg), T.DiffNode(fg)
    if p.frozen_noise is not None:
        g0, g1 = (np.asarray(g, dtype=np.float64) for g in p.frozen_noise)
    else:
        rng = rng if rng is not None else np.random.default_rng(p.rng_seed)
        g0, g1 = sample_gumbel(y0.shape, rng), sample_gumbel(y1.shape, rng)
    l0 = T.scale(T.log(T.clampmin(y0, PROB_FLOOR)) + g0, 1.0 / p.tau)
    l1 = T.scale(T.log(T.clampmin(y1, PROB_FLOOR)) + g1, 1.0 / p.tau)
    return T.channel_softmax((l0, l1))


def soft_morphology(kind, mask, window=3):
    """One 3^3 max-pool dilation, or erosion as -maxpool(-x); zero padded."""
    if kind == "dilation":
        return T.maxpool3d(mask, window)
    if kind == "erosion":
        return T.neg(T.maxpool3d(T.neg(mask), window))
    raise ValueError(f"unknown morphology {kind!r}")


def soft_boundary(z_fg, gt):
    y = gt.data if isinstance(gt, Volume) else np.asarray(gt, dtype=np.float64)
    z_fg = T.as_node(z_fg)
    if y.shape != z_fg.shape:
        raise ValueError(f"shape mismatch {z_fg.shape} vs {y.shape}")
    return T.mul(soft_morphology("dilation", z_fg) - soft_morphology("erosion", z_fg), y)


def build_distance_kernel(p=CdtParams()):
    """Taps exp(d / gamma), d the Euclidean offset from the centre."""
    r = p.kernel_size // 2
    o = np.arange(-r, r + 1, dtype=np.float64)
    d = np.sqrt(o[:, None, None] ** 2 + o[None, :, None] ** 2 + o[None, None, :] ** 2)
    return Kernel3(np.exp(d / p.gamma))


def lse_min(values, beta):
    """(1/beta) * log(sum(exp(beta * d))), evaluated stably; beta < 0."""
    d = np.asarray(values, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("lse_min of an empty set")
    if beta >= 0:
        raise ValueError("beta must be negative")
    m = d.min()
    return float(m + np.log(np.exp(beta * (d - m)).sum()) / beta)


def cdt_transform(z_fg, boundary, p=CdtParams(), kernel=None):
    """z_fg * gamma * log(boundary (*) exp(d/gamma) + exp(d_cap/gamma)).

    The additive floor acts as a virtual boundary at distance ``d_cap``, so
    the output is bounded by ``d_cap`` and the log never sees zero.
    """
    z_fg, boundary = T.as_node(z_fg), T.as_node(boundary)
    if z_fg.shape != boundary.shape:
        raise ValueError(f"shape mismatch {z_fg.shape} vs {boundary.shape}")
    kernel = kernel if kernel is not None else build_distance_kernel(p)
    floor = float(np.exp(p.d_cap / p.gamma))
    s = T.conv3d(boundary, kernel) + floor
    return T.mul(z_fg, T.scale(T.log(s), p.gamma))


def gt_distance(gt, p=CdtParams(), kernel=None):
    """Dist(y): the same operator applied to the hard mask and its hard boundary."""
    y = gt.data if isinstance(gt, Volume) else np.asarray(gt, dtype=np.float64)
    return cdt_transform(T.DiffNode(y), T.DiffNode(hard_boundary(y).data), p, kernel).value


def balance_weights(gt):
    """omega = N_bg / N_fg on foreground voxels, 1 elsewhere."""
    y = gt.data if isinstance(gt, Volume) else np.asarray(gt, dtype=np.float64)
    n_fg = float((y > 0.5).sum())
    if n_fg == 0:
        raise EmptyForegroundError("CDT loss needs foreground voxels")
    return np.where(y > 0.5, (y.size - n_fg) / n_fg, 1.0)


def cdt_loss(pred_dist, gt_dist, gt):
    """sum_i omega_i (Dist(y)_i - Dist(z)_i)^2 / N."""
    pred_dist = T.as_node(pred_dist)
    gd = gt_dist.data if isinstance(gt_dist, Volume) else np.asarray(gt_dist, dtype=np.float64)
    w = balance_weights(gt)
    if gd.shape != pred_dist.shape or w.shape != pred_dist.shape:
        raise ValueError("pred_dist, gt_dist and gt must share a shape")
    diff = T.sub(pred_dist, gd)
    return T.scale(T.reduce_sum(T.mul(diff, diff), mask=w), 1.0 / w.size)


def cdt_from_probs(prob2, gt, p=CdtParams(), gp=GumbelParams(), rng=None, kernel=None, gt_dist=None):
    """Gumbel -> soft boundary -> CDT -> loss; returns (loss, pred_dist)."""
    kernel = kernel if kernel is not None else build_distance_kernel(p)
    _, z_fg = gumbel_softmax(prob2, gp, rng)
    phi = soft_boundary(z_fg, gt)
    dist = cdt_transform(z_fg, phi, p, kernel)
    if gt_dist is None:
        gt_dist = gt_distance(gt, p, kernel)
    return cdt_loss(dist, gt_dist, gt), dist
