"""Topology-preserving surrogate losses.

Completeness: Tversky loss plus cross-entropy weighted by distance to the
airway centreline. Correctness: a hinge-bounded precision-at-recall
Lagrangian summed over a grid of recall anchors (an AUCPR surrogate).

``pred`` is always the foreground probability map as a :class:`DiffNode`;
ground truth arguments may be :class:`Volume` or arrays.
"""
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .volume import Volume

PROB_FLOOR = 1e-7
ANCHOR_CAP = 1.0 - 1e-6
T_MIN, T_MAX = 0.01, 0.99


class EmptyForegroundError(ValueError):
    """Raised when a loss needs at least one ground-truth foreground voxel."""


def _arr(v):
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


@dataclass(frozen=True)
class TverskyParams:
    alpha_t: float = 0.3
    beta_t: float = 0.7

    def __post_init__(self):
        if not (0 < self.alpha_t < 1 and 0 < self.beta_t < 1):
            raise ValueError("alpha_t and beta_t must lie in (0, 1)")
        if abs(self.alpha_t + self.beta_t - 1.0) > 1e-12:
            raise ValueError("alpha_t + beta_t must equal 1")


@dataclass(frozen=True)
class WeightMapParams:
    lambda_fg: float = 10.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.lambda_fg <= 0:
            raise ValueError("lambda_fg must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")


@dataclass(frozen=True)
class TpsParams:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# topology completeness
# ---------------------------------------------------------------------------

def tversky_loss(pred, gt, p=TverskyParams()):
    pred = T.as_node(pred)
    y = _arr(gt)
    if y.shape != pred.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {y.shape}")
    n_gt = y.sum()
    if n_gt <= 0:
        raise EmptyForegroundError("Tversky loss needs a nonempty ground truth")
    inter = T.reduce_sum(pred, mask=y)
    denom = T.scale(T.reduce_sum(pred), p.alpha_t) + p.beta_t * n_gt
    return 1.0 - inter / denom


def weight_map(bundle_or_mask, p=WeightMapParams(), dc_map=None, dc_max=None):
    """alpha = max(0, -lambda_fg * ln(dc/dc_max + eps)) on foreground, 1 elsewhere."""
    if dc_map is None:
        b = bundle_or_mask
        mask, dc_map, dc_max = b.mask, b.dc_map, b.dc_max
    else:
        mask = bundle_or_mask
    y = _arr(mask) > 0.5
    dc = _arr(dc_map)
    if dc_max is None:
        dc_max = float(dc[y].max()) if y.any() else 0.0
    if dc_max <= 0:
        raise ValueError("dc_max must be positive")
    fg = np.maximum(0.0, -p.lambda_fg * np.log(dc / dc_max + p.epsilon))
    return Volume(np.where(y, fg, 1.0), getattr(mask, "spacing", (1.0, 1.0, 1.0)))


def weighted_ce_loss(pred, gt, weights):
    """sum_i alpha_i * BCE(pred_i, y_i) / N with probabilities floored at 1e-7."""
    pred = T.as_node(pred)
    y = _arr(gt)
    a = _arr(weights)
    if y.shape != pred.shape or a.shape != pred.shape:
        raise ValueError("pred, gt and weights must share a shape")
    p = T.clampmax(T.clampmin(pred, PROB_FLOOR), 1.0 - PROB_FLOOR)
    pos = T.reduce_sum(T.log(p), mask=a * y)
    negl = T.reduce_sum(T.log(1.0 - p), mask=a * (1.0 - y))
    return T.scale(pos + negl, -1.0 / y.size)


def topo_com_loss(pred, gt, bundle, tversky_p=TverskyParams(), weight_p=WeightMapParams(), weights=None):
    if weights is None:
        weights = weight_map(bundle, weight_p)
    return tversky_loss(pred, gt, tversky_p) + weighted_ce_loss(pred, gt, weights)


# ---------------------------------------------------------------------------
# topology correctness
# ---------------------------------------------------------------------------

def hinge_bounds(pred, gt, thr):
    """(TP lower bound, FP upper bound) from hinge(v) = max(0, 1 - y~ (v - T)), y~ = 2y - 1."""
    pred = T.as_node(pred)
    y = _arr(gt)
    ys = 2.0 * y - 1.0
    margin = T.mul(T.sub(pred, thr), ys)
    h = T.relu(1.0 - margin)
    n_pos = float(y.sum())
    tp_lower = n_pos - T.reduce_sum(h, mask=y)
    fp_upper = T.reduce_sum(h, mask=1.0 - y)
    return tp_lower, fp_upper


@dataclass
class AucprState:
    """Recall anchors, Lagrange multipliers and learnable per-anchor thresholds."""
    delta0: float = 0.8
    m: int = 10
    nu: np.ndarray = None
    thresholds: T.DiffNode = None
    nu_lr: float = 0.01

    def __post_init__(self):
        if not 0 < self.delta0 < 1:
            raise ValueError("delta0 must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("need at least one anchor")
        if self.nu is None:
            self.nu = np.zeros(self.m)
        self.nu = np.asarray(self.nu, dtype=np.float64)
        if self.thresholds is None:
            self.thresholds = T.param(np.full(self.m, 0.5), name="aucpr_thresholds")
        if self.nu.shape != (self.m,) or self.thresholds.shape != (self.m,):
            raise ValueError("nu and thresholds need one entry per anchor")

    def anchors(self):
        """delta_k for k = 0..m; the last one capped just below 1."""
        k = np.arange(self.m + 1)
        d = self.delta0 + (1.0 - self.delta0) * k / self.m
        d[-1] = min(d[-1], ANCHOR_CAP)
        return d

    def grid_step(self):
        return (1.0 - self.delta0) / self.m

    def with_prior(self, delta0):
        """Same multipliers and thresholds, anchors rebuilt from a new class prior."""
        return replace(self, delta0=float(delta0))

    def clamp_thresholds(self):
        np.clip(self.thresholds.value, T_MIN, T_MAX, out=self.thresholds.value)


def par_lagrangian(pred, gt, k, state):
    """L_k = -d|Y+| / (d|Y+| + FP_u) - nu_k (TP_l/|Y+| - d), anchor k in 1..m."""
    y = _arr(gt)
    n_pos = float(y.sum())
    if n_pos <= 0:
        raise EmptyForegroundError("precision-at-recall needs positive examples")
    if not 1 <= k <= state.m:
        raise IndexError(f"anchor {k} outside 1..{state.m}")
    d = float(state.anchors()[k])
    thr = T.take(state.thresholds, k - 1)
    tp_l, fp_u = hinge_bounds(pred, y, thr)
    prec = T.neg(T.div(d * n_pos, fp_u + d * n_pos))
    nu = float(state.nu[k - 1])
    if nu == 0.0:
        return prec
    return prec - T.scale(T.scale(tp_l, 1.0 / n_pos) - d, nu)


def topo_cor_loss(pred, gt, state):
    """Riemann sum over the recall grid of the per-anchor Lagrangians."""
    step = state.grid_step()
    total = None
    for k in range(1, state.m + 1):
        term = T.scale(par_lagrangian(pred, gt, k, state), step)
        total = term if total is None else total + term
    return total


def recall_slack(pred_values, gt, state):
    """TP_l/|Y+| - delta_k per anchor, evaluated without building a graph."""
    v = np.asarray(pred_values, dtype=np.float64)
    y = _arr(gt)
    n_pos = y.sum()
    if n_pos <= 0:
        raise EmptyForegroundError("recall constraint needs positive examples")
    d = state.anchors()[1:]
    pos = v[y > 0.5]
    h = np.maximum(0.0, 1.0 - (pos[None, :] - state.thresholds.value[:, None]))
    tp_l = n_pos - h.sum(axis=1)
    return tp_l / n_pos - d


def update_multipliers(pred_snapshot, gt, state):
    """Projected ascent: nu_k <- max(0, nu_k + nu_lr * (delta_k - TP_l/|Y+|))."""
    v = pred_snapshot.value if isinstance(pred_snapshot, T.DiffNode) else _arr(pred_snapshot)
    slack = recall_slack(v, gt, state)
    nu = np.maximum(0.0, state.nu - state.nu_lr * slack)
    return replace(state, nu=nu)


def tps_loss(pred, gt, bundle, state, tversky_p=TverskyParams(), weight_p=WeightMapParams(),
             tps_p=TpsParams(), weights=None):
    """lambda1 * L_topo_com + lambda2 * L_topo_cor; a zero weight skips that term."""
    parts = []
    if tps_p.lambda1:
        parts.append(T.scale(topo_com_loss(pred, gt, bundle, tversky_p, weight_p, weights), tps_p.lambda1))
    if tps_p.lambda2:
        parts.append(T.scale(topo_cor_loss(pred, gt, state), tps_p.lambda2))
    if not parts:
        return T.DiffNode(0.0)
    out = parts[0]
    for q in parts[1:]:
        out = out + q
    return out
