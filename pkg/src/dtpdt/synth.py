"""Synthetic bifurcating airway trees, their ground-truth maps, and the exact
brute-force distance transform used as an oracle for the CDT."""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import kernels
from .volume import Volume, VolumeError, export_volume, import_volume, normalize_hu

__all__ = [
    "Branch", "AirwayTree", "SynthParams", "GroundTruthBundle", "TreeError",
    "generate_tree", "exact_edt", "hard_boundary", "hard_erode", "hard_dilate",
    "generate_fitting", "centerline_voxels", "synth_ct", "network_input", "save_bundle", "load_bundle", "import_volume", "export_volume",
]

ROOT = -1
MARGIN = 2


class TreeError(ValueError):
    pass


@dataclass
class Branch:
    id: int
    parent_id: int
    polyline: np.ndarray  # (n, 3) voxel coordinates
    radius_start: float
    radius_end: float
    generation: int

    def length(self):
        return float(np.linalg.norm(np.diff(self.polyline, axis=0), axis=1).sum())

    def radius_at(self, s):
        """Radius at arc-length fraction ``s`` in [0, 1]."""
        return self.radius_start + s * (self.radius_end - self.radius_start)


@dataclass
class AirwayTree:
    branches: list

    def __len__(self):
        return len(self.branches)

    def by_id(self, bid):
        for b in self.branches:
            if b.id == bid:
                return b
        raise KeyError(bid)

    def children(self, bid):
        return [b for b in self.branches if b.parent_id == bid]

    def leaves(self):
        parents = {b.parent_id for b in self.branches}
        return [b for b in self.branches if b.id not in parents]

    def total_length(self):
        return sum(b.length() for b in self.branches)

    def to_json(self):
        return {"branches": [
            {"id": b.id, "parent_id": b.parent_id, "polyline": b.polyline.round(12).tolist(),
             "radius_start": b.radius_start, "radius_end": b.radius_end, "generation": b.generation}
            for b in self.branches]}

    @classmethod
    def from_json(cls, d):
        return cls([Branch(b["id"], b["parent_id"], np.array(b["polyline"], dtype=np.float64),
                           float(b["radius_start"]), float(b["radius_end"]), int(b["generation"]))
                    for b in d["branches"]])


@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    dims: tuple = (64, 64, 64)
    generations: int = 5
    root_radius: float = 3.5
    radius_decay: float = 0.72
    length_decay: float = 0.78
    branch_angle_deg: float = 32.0
    jitter_deg: float = 8.0
    root_length: float = 16.0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 2 * MARGIN + 1:
            raise TreeError(f"dims too small: {self.dims}")
        if self.generations < 1:
            raise TreeError("generations must be >= 1")
        if self.root_radius <= 0 or self.root_length <= 0:
            raise TreeError("root radius and length must be positive")
        if not (0 < self.radius_decay < 1 and 0 < self.length_decay < 1):
            raise TreeError("decay factors must lie in (0, 1)")


@dataclass
class GroundTruthBundle:
    mask: Volume
    tree: AirwayTree
    dc_map: Volume
    dc_max: float
    centerline_mask: Volume
    branch_labels: Volume = None  # owning branch id per foreground voxel, -1 elsewhere
    params: SynthParams = None
    meta: dict = field(default_factory=dict)


def _rotate(v, axis, angle):
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * (axis @ v) * (1 - c)


def _polyline(start, direction, length):
    n = max(2, int(np.ceil(length)) + 1)
    t = np.linspace(0.0, length, n)
    return start[None, :] + t[:, None] * direction[None, :]


def _check_bounds(poly, radius, dims, generation):
    lo = poly.min(axis=0) - radius
    hi = poly.max(axis=0) + radius
    if np.any(lo < MARGIN) or np.any(hi > np.array(dims) - 1 - MARGIN):
        raise TreeError(f"generation {generation} escapes volume bounds")


def build_tree(params):
    rng = np.random.default_rng(params.seed)
    dims = np.array(params.dims, dtype=np.float64)
    start = np.array([(dims[0] - 1) / 2, (dims[1] - 1) / 2, dims[2] - 1 - MARGIN - params.root_radius - 1])
    direction = np.array([0.0, 0.0, -1.0])
    phi = rng.uniform(0, np.pi)
    plane_normal = np.array([np.cos(phi), np.sin(phi), 0.0])

    branches = []
    # (parent id, start, direction, plane normal, generation, length)
    queue = [(ROOT, start, direction, plane_normal, 0, params.root_length)]
    while queue:
        parent, p0, d, nrm, gen, length = queue.pop(0)
        r0 = params.root_radius * params.radius_decay ** gen
        r1 = r0 * np.sqrt(params.radius_decay)
        poly = _polyline(p0, d, length)
        _check_bounds(poly, r0, params.dims, gen)
        bid = len(branches)
        branches.append(Branch(bid, parent, poly, float(r0), float(r1), gen))
        if gen + 1 >= params.generations:
            continue
        angle = np.deg2rad(params.branch_angle_deg)
        jit = np.deg2rad(params.jitter_deg)
        for sign in (1.0, -1.0):
            a = sign * (angle + rng.uniform(-jit, jit))
            dc = _rotate(d, nrm, a)
            dc /= np.linalg.norm(dc)
            # rotate the bifurcation plane a quarter turn, with some twist
            nc = np.cross(dc, nrm)
            nc = _rotate(nc / np.linalg.norm(nc), dc, rng.uniform(-jit, jit))
            queue.append((bid, poly[-1].copy(), dc, nc, gen + 1, length * params.length_decay))
    return AirwayTree(branches)


def _segments(tree):
    a, b, ra, rb, owner = [], [], [], [], []
    for br in tree.branches:
        seg = np.linalg.norm(np.diff(br.polyline, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = cum / cum[-1] if cum[-1] > 0 else np.zeros_like(cum)
        for i in range(len(br.polyline) - 1):
            a.append(br.polyline[i])
            b.append(br.polyline[i + 1])
            ra.append(br.radius_at(s[i]))
            rb.append(br.radius_at(s[i + 1]))
            owner.append(br.id)
    return np.array(a), np.array(b), np.array(ra), np.array(rb), np.array(owner)


def centerline_voxels(branch, dims=None):
    """Voxels hit by the branch polyline sampled every half voxel (unique, in order)."""
    pts = []
    for p, q in zip(branch.polyline[:-1], branch.polyline[1:]):
        n = max(1, int(np.ceil(2 * np.linalg.norm(q - p))))
        t = np.linspace(0, 1, n + 1)[:, None]
        pts.append(p + t * (q - p))
    vox = np.rint(np.concatenate(pts)).astype(np.int64)
    if dims is not None:
        vox = vox[np.all((vox >= 0) & (vox < np.array(dims)), axis=1)]
    _, idx = np.unique(vox, axis=0, return_index=True)
    return vox[np.sort(idx)]


def rasterize(tree, dims):
    """Mask, centreline mask, distance-to-centreline and branch label maps."""
    a, b, ra, rb, owner = _segments(tree)
    dist, seg, inside = kernels.rasterize_capsules(dims, a, b, ra, rb)
    cl = np.zeros(dims, dtype=bool)
    for br in tree.branches:
        v = centerline_voxels(br, dims)
        cl[v[:, 0], v[:, 1], v[:, 2]] = True
    mask = inside | cl
    dc = np.where(mask & ~cl, dist, 0.0)
    labels = np.where(mask, owner[np.maximum(seg, 0)], -1)
    return mask, cl, dc, labels


def generate_tree(params):
    tree = build_tree(params)
    dims = tuple(int(d) for d in params.dims)
    mask, cl, dc, labels = rasterize(tree, dims)
    return GroundTruthBundle(
        mask=Volume(mask.astype(np.float64)),
        tree=tree,
        dc_map=Volume(dc),
        dc_max=float(dc.max()),
        centerline_mask=Volume(cl.astype(np.float64)),
        branch_labels=Volume(labels.astype(np.float64)),
        params=params,
    )


def generate_fitting(params, max_tries=50):
    """Like :func:`generate_tree` but retries successive seeds until the tree fits."""
    last = None
    for k in range(max_tries):
        p = SynthParams(**{**asdict(params), "seed": params.seed + k * 7919})
        try:
            return generate_tree(p)
        except TreeError as e:
            last = e
    raise TreeError(f"no fitting tree after {max_tries} seeds: {last}")


# ---------------------------------------------------------------------------
# hard morphology and the brute-force distance transform
# ---------------------------------------------------------------------------

def _data(v):
    return v.data if isinstance(v, Volume) else np.asarray(v)


def hard_erode(mask):
    """3^3 binary erosion; outside the volume counts as background."""
    m = np.pad(_data(mask) > 0.5, 1, constant_values=False)
    return sliding_window_view(m, (3, 3, 3)).all(axis=(3, 4, 5))


def hard_dilate(mask):
    m = np.pad(_data(mask) > 0.5, 1, constant_values=False)
    return sliding_window_view(m, (3, 3, 3)).any(axis=(3, 4, 5))


def hard_boundary(mask):
    """Foreground voxels with at least one background 26-neighbour."""
    m = _data(mask) > 0.5
    out = (hard_dilate(m) & ~hard_erode(m)) & m
    return Volume(out.astype(np.float64), getattr(mask, "spacing", (1.0, 1.0, 1.0)))


def exact_edt(mask, boundary):
    """Per foreground voxel, exact Euclidean distance (voxels) to the nearest
    boundary voxel; 0 elsewhere. Brute force over all pairs."""
    m = _data(mask) > 0.5
    bnd = _data(boundary) > 0.5
    if m.shape != bnd.shape:
        raise VolumeError(f"mask {m.shape} and boundary {bnd.shape} differ")
    out = np.zeros(m.shape)
    fg = np.argwhere(m)
    if len(fg) == 0:
        return Volume(out)
    bd = np.argwhere(bnd)
    if len(bd) == 0:
        raise VolumeError("empty boundary with a nonempty mask")
    out[m] = kernels.min_distances(fg, bd)
    return Volume(out, getattr(mask, "spacing", (1.0, 1.0, 1.0)))


# ---------------------------------------------------------------------------
# CT-like intensities and on-disk bundles
# ---------------------------------------------------------------------------

def synth_ct(bundle, seed=0, noise_hu=40.0, blur=0.8, lumen_hu=-1000.0,
             wall_hu=-250.0, parenchyma_hu=-850.0):
    """HU image of the airway: air lumen inside a one-voxel wall, blurred,
    with Gaussian noise. Thin branches lose contrast to the blur."""
    m = bundle.mask.data > 0.5
    wall = hard_dilate(m) & ~m
    img = np.full(m.shape, parenchyma_hu)
    img[wall] = wall_hu
    img[m] = lumen_hu
    img = ndimage.gaussian_filter(img, blur, mode="nearest")
    img += np.random.default_rng(seed).normal(0.0, noise_hu, m.shape)
    return Volume(img, bundle.mask.spacing)


def network_input(ct):
    """HU volume -> [0, 1] network input via the [-1000, 600] clamp."""
    return normalize_hu(ct.data) / 255.0


_PARTS = ("mask", "dc_map", "centerline_mask", "branch_labels")


def save_bundle(bundle, directory, name, image=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for part in _PARTS:
        v = getattr(bundle, part)
        if v is not None:
            files[part] = export_volume(v, directory / f"{name}_{part}").name
    if image is not None:
        files["image"] = export_volume(image, directory / f"{name}_image").name
    tree = bundle.tree.to_json()
    tree["dc_max"] = bundle.dc_max
    if bundle.params is not None:
        tree["params"] = asdict(bundle.params)
    (directory / f"{name}_tree.json").write_text(json.dumps(tree) + "\n")
    files["tree"] = f"{name}_tree.json"
    return files


def load_bundle(directory, name):
    directory = Path(directory)
    tree_d = json.loads((directory / f"{name}_tree.json").read_text())
    parts = {p: import_volume(directory / f"{name}_{p}.rvol")
             for p in _PARTS if (directory / f"{name}_{p}.rvol").exists()}
    params = SynthParams(**{**tree_d["params"], "dims": tuple(tree_d["params"]["dims"])}) \
        if "params" in tree_d else None
    b = GroundTruthBundle(mask=parts["mask"], tree=AirwayTree.from_json(tree_d),
                          dc_map=parts["dc_map"], dc_max=float(tree_d["dc_max"]),
                          centerline_mask=parts["centerline_mask"],
                          branch_labels=parts.get("branch_labels"), params=params)
    img_path = directory / f"{name}_image.rvol"
    image = import_volume(img_path) if img_path.exists() else None
    return b, image
