"""Overlap and tree-topology metrics.

TD and BD are scored against the ground-truth centreline of a synthetic
:class:`~dtpdt.synth.AirwayTree` (no skeletonisation of predictions). They
stand in for the EXACT'09 definitions, which are not reproduced here.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .synth import centerline_voxels
from .volume import Volume


def _arr(v):
    return v.data if isinstance(v, Volume) else np.asarray(v)


@dataclass
class MetricsReport:
    dsc: float
    fpr: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    td: float = float("nan")
    bd: float = float("nan")
    branches_total: int = 0
    branches_detected: int = 0
    threshold: float = 0.5

    def to_dict(self):
        return asdict(self)


def binarize(pred, threshold=0.5):
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return Volume((_arr(pred) >= threshold).astype(np.float64),
                  getattr(pred, "spacing", (1.0, 1.0, 1.0)))


def _ratio(a, b, empty):
    return a / b if b else empty


def confusion(pred_bin, gt, threshold=0.5):
    p = _arr(pred_bin) > 0.5
    y = _arr(gt) > 0.5
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    tn = int(p.size - tp - fp - fn)
    return MetricsReport(
        dsc=_ratio(2 * tp, 2 * tp + fp + fn, 1.0),
        fpr=_ratio(fp, fp + tn, 0.0),
        precision=_ratio(tp, tp + fp, 1.0),
        recall=_ratio(tp, tp + fn, 1.0),
        tp=tp, fp=fp, tn=tn, fn=fn, threshold=threshold,
    )


def _contains(p, vox):
    inside = np.all((vox >= 0) & (vox < np.array(p.shape)), axis=1)
    hit = np.zeros(len(vox), dtype=bool)
    v = vox[inside]
    hit[inside] = p[v[:, 0], v[:, 1], v[:, 2]]
    return hit


def tree_length_detected(pred_bin, tree):
    """Centreline length whose segment midpoints fall inside the prediction,
    as a fraction of total tree length."""
    if len(tree) == 0:
        raise ValueError("empty tree")
    p = _arr(pred_bin) > 0.5
    total = found = 0.0
    for br in tree.branches:
        pts = br.polyline
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        mid = np.rint((pts[:-1] + pts[1:]) / 2).astype(np.int64)
        total += seg.sum()
        found += seg[_contains(p, mid)].sum()
    return float(found / total) if total > 0 else 0.0


def branch_coverage(pred_bin, tree):
    """Per branch id, the fraction of its centreline voxels inside the prediction."""
    p = _arr(pred_bin) > 0.5
    return {br.id: float(_contains(p, centerline_voxels(br)).mean()) for br in tree.branches}


def branch_detected(pred_bin, tree, frac=0.8, return_counts=False):
    if len(tree) == 0:
        raise ValueError("empty tree")
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    cov = branch_coverage(pred_bin, tree)
    hit = sum(c >= frac for c in cov.values())
    rate = hit / len(cov)
    return (rate, hit, len(cov)) if return_counts else rate


def largest_component(mask):
    """Largest 26-connected foreground component; ties go to the component
    whose first voxel comes first in x-fastest scan order."""
    m = _arr(mask) > 0.5
    labels, n = kernels.label26(m)
    out = np.zeros(m.shape)
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
        out[labels == int(np.argmax(sizes)) + 1] = 1.0
    return Volume(out, getattr(mask, "spacing", (1.0, 1.0, 1.0)))


def evaluate(pred, bundle, threshold=0.5, frac=0.8, post_lcc=False, binary=False):
    """Full report for a probability map (or a binary map with ``binary=True``)."""
    pb = Volume(_arr(pred)) if binary else binarize(pred, threshold)
    if post_lcc:
        pb = largest_component(pb)
    rep = confusion(pb, bundle.mask, threshold)
    rep.td = tree_length_detected(pb, bundle.tree)
    rep.bd, rep.branches_detected, rep.branches_total = branch_detected(pb, bundle.tree, frac, return_counts=True)
    return rep


def aggregate(reports, keys=("dsc", "td", "bd", "fpr", "precision", "recall")):
    """mean and (population) std per metric."""
    out = {}
    for k in keys:
        vals = np.array([r[k] if isinstance(r, dict) else getattr(r, k) for r in reports], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
