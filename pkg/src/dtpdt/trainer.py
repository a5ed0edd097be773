"""Two-phase training loop: completeness-only warm-up, then joint TPS + CDT.

A dataset item is a :class:`Sample` (network input in [0, 1] plus its
ground-truth bundle). Each step draws one crop centred near the airway,
optionally flipped and rotated about z, and takes one Adam step.
"""
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import cdt, losses, metrics
from . import tensor as T
from .model import Adam, ToyUNet, ToyUNetConfig
from .volume import Volume, export_volume, import_volume

log = logging.getLogger(__name__)

LOSS_MODES = ("dtpdt", "dice-only", "tps", "cdt", "com-only")


class NumericError(ArithmeticError):
    """A loss or parameter became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    warmup_epochs: int = 10
    lr: float = 0.002
    lr_drop_epoch: int = 50
    lr_drop_factor: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    crops_per_epoch: int = 0  # 0: one crop per training volume
    augment: bool = True
    rotate_deg: float = 10.0
    seed: int = 0
    loss: str = "dtpdt"
    # completeness
    alpha_t: float = 0.3
    beta_t: float = 0.7
    lambda_fg: float = 10.0
    epsilon: float = 1e-6
    # correctness
    lambda1: float = 1.0
    lambda2: float = 1.0
    delta0: float = 0.0  # 0: foreground fraction of each crop
    m: int = 10
    nu_lr: float = 0.01
    # cdt
    lambda_cdt: float = 1.0
    tau: float = 0.1
    gamma: float = -0.3
    kernel_size: int = 31
    # evaluation
    threshold: float = 0.5
    bd_frac: float = 0.8
    val_stride: int = 32

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")

    def lr_at(self, epoch):
        return self.lr / self.lr_drop_factor if epoch >= self.lr_drop_epoch else self.lr

    def phase_at(self, epoch):
        return "warmup" if epoch < self.warmup_epochs else "joint"


def config_hash(*cfgs):
    items = []
    for c in cfgs:
        items += [f"{type(c).__name__}.{k}={v!r}" for k, v in sorted(asdict(c).items())]
    return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


@dataclass
class Sample:
    image: np.ndarray  # network input, [0, 1]
    bundle: object
    name: str = ""


@dataclass
class TrainState:
    model: ToyUNet
    opt: Adam
    aucpr: losses.AucprState
    rng: np.random.Generator
    epoch: int = 0
    counters: dict = field(default_factory=lambda: {"steps": 0, "skipped": 0, "topo_cor": 0, "cdt": 0,
                                                    "warmup_topo_cor": 0, "warmup_cdt": 0})


def init_state(model_cfg, cfg):
    model = ToyUNet(model_cfg)
    aucpr = losses.AucprState(delta0=cfg.delta0 or 0.5, m=cfg.m, nu_lr=cfg.nu_lr)
    params = model.parameters() + [aucpr.thresholds]
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return TrainState(model, opt, aucpr, np.random.default_rng(cfg.seed))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _augment(image, mask, dc, rng, cfg):
    if rng.random() < 0.5:
        image, mask, dc = image[::-1], mask[::-1], dc[::-1]
    angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    if angle:
        kw = dict(axes=(0, 1), reshape=False, mode="nearest")
        image = ndimage.rotate(image, angle, order=1, **kw)
        mask = ndimage.rotate(mask, angle, order=0, **kw)
        dc = ndimage.rotate(dc, angle, order=0, **kw)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask), np.ascontiguousarray(dc)


def sample_crop(sample, crop, rng, cfg=None, augment=False):
    """Crop centred on a random foreground voxel (jittered), clipped to the volume."""
    image = sample.image
    mask = sample.bundle.mask.data
    dc = sample.bundle.dc_map.data
    fg = np.argwhere(mask > 0.5)
    crop = np.array(crop)
    if len(fg):
        centre = fg[rng.integers(len(fg))] + rng.integers(-crop // 4, crop // 4 + 1)
    else:
        centre = np.array(mask.shape) // 2
    lo = np.clip(centre - crop // 2, 0, np.array(mask.shape) - crop)
    sl = tuple(slice(int(a), int(a + c)) for a, c in zip(lo, crop))
    img, m, d = image[sl], mask[sl], dc[sl]
    if augment:
        img, m, d = _augment(img, m, d, rng, cfg)
    return img, (m > 0.5).astype(np.float64), d


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------

def _completeness(p_fg, y, dc, cfg, dc_max):
    if cfg.loss == "dice-only":
        return losses.tversky_loss(p_fg, y, losses.TverskyParams(0.5, 0.5))
    w = losses.weight_map(y, losses.WeightMapParams(cfg.lambda_fg, cfg.epsilon), dc_map=dc, dc_max=dc_max)
    return losses.topo_com_loss(p_fg, y, None, losses.TverskyParams(cfg.alpha_t, cfg.beta_t), weights=w)


def train_step(state, batch, phase, cfg, kernel=None):
    """One Adam step. Returns a dict of scalar losses, or None if the crop has
    no foreground (it is skipped and counted)."""
    x, y, dc, dc_max = batch
    c = state.counters
    if y.sum() == 0:
        c["skipped"] += 1
        return None
    lr = cfg.lr_at(state.epoch)
    state.opt.zero_grad()
    p0, p1 = state.model.probabilities(x)
    out = {"l_topo_com": 0.0, "l_topo_cor": 0.0, "l_cdt": 0.0}
    if cfg.loss == "cdt":
        com = losses.tversky_loss(p1, y, losses.TverskyParams(0.5, 0.5))
    else:
        com = _completeness(p1, y, dc, cfg, dc_max)
    out["l_topo_com"] = com.item()
    total = T.scale(com, cfg.lambda1)
    joint = phase == "joint" and cfg.loss not in ("dice-only", "com-only")
    aucpr = state.aucpr
    if joint and cfg.loss in ("dtpdt", "tps"):
        aucpr = aucpr.with_prior(cfg.delta0 or float(y.mean()))
        cor = losses.topo_cor_loss(p1, y, aucpr)
        c["topo_cor"] += 1
        c["warmup_topo_cor"] += state.epoch < cfg.warmup_epochs
        out["l_topo_cor"] = cor.item()
        total = total + T.scale(cor, cfg.lambda2)
    if joint and cfg.loss in ("dtpdt", "cdt"):
        cp = cdt.CdtParams(cfg.gamma, cfg.kernel_size)
        l_cdt, _ = cdt.cdt_from_probs((p0, p1), y, cp, cdt.GumbelParams(cfg.tau), rng=state.rng, kernel=kernel)
        c["cdt"] += 1
        c["warmup_cdt"] += state.epoch < cfg.warmup_epochs
        out["l_cdt"] = l_cdt.item()
        total = total + T.scale(l_cdt, cfg.lambda_cdt)
    out["total"] = total.item()
    if not np.isfinite(out["total"]):
        raise NumericError(f"non-finite loss at epoch {state.epoch}: {out}")
    T.backward(total)
    state.opt.step(lr)
    state.aucpr.clamp_thresholds()
    if out["l_topo_cor"] != 0.0:
        state.aucpr = losses.update_multipliers(p1.value, y, aucpr).with_prior(state.aucpr.delta0)
    c["steps"] += 1
    return out


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _starts(n, c, stride):
    if n <= c:
        return [0]
    s = list(range(0, n - c + 1, stride))
    if s[-1] != n - c:
        s.append(n - c)
    return s


def predict_volume(model, volume, crop=None, stride=None, pad_value=None):
    """Sliding-window foreground probabilities, averaged where windows overlap."""
    vol = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    crop = tuple(crop or model.cfg.crop)
    stride = stride or crop
    stride = (stride,) * 3 if np.isscalar(stride) else tuple(stride)
    if any(s > c for s, c in zip(stride, crop)):
        raise ValueError("stride must not exceed the crop size")
    orig = vol.shape
    if any(n < c for n, c in zip(orig, crop)):
        pv = float(np.median(vol)) if pad_value is None else pad_value
        vol = np.pad(vol, [(0, max(0, c - n)) for n, c in zip(orig, crop)], constant_values=pv)
    acc = np.zeros(vol.shape)
    cnt = np.zeros(vol.shape)
    for i in _starts(vol.shape[0], crop[0], stride[0]):
        for j in _starts(vol.shape[1], crop[1], stride[1]):
            for k in _starts(vol.shape[2], crop[2], stride[2]):
                sl = (slice(i, i + crop[0]), slice(j, j + crop[1]), slice(k, k + crop[2]))
                _, p1 = model.probabilities(vol[sl])
                acc[sl] += p1.value
                cnt[sl] += 1
    out = acc / cnt
    return out[:orig[0], :orig[1], :orig[2]]


def validate(model, samples, cfg, post_lcc=False):
    reps = []
    for s in samples:
        prob = predict_volume(model, s.image, stride=cfg.val_stride)
        reps.append(metrics.evaluate(prob, s.bundle, cfg.threshold, cfg.bd_frac, post_lcc=post_lcc))
    return reps


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, state, epoch, chash, extra=None):
    """Parameters concatenated in declaration order (each flattened first-axis
    fastest) as one RVOL payload, plus a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names, shapes, chunks = [], [], []
    for name, p in state.model.named_parameters() + [("aucpr_thresholds", state.aucpr.thresholds)]:
        names.append(name)
        shapes.append(list(p.shape))
        chunks.append(p.value.ravel(order="F"))
    flat = np.concatenate(chunks).astype("<f8")
    export_volume(Volume(flat[:, None, None]), path.with_suffix(".rvol"))
    manifest = {"names": names, "shapes": shapes, "epoch": epoch, "config_hash": chash,
                "nu": state.aucpr.nu.tolist(), "model": asdict(state.model.cfg)}
    manifest.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
    return path.with_suffix(".json")


def load_checkpoint(path):
    """Returns (model, manifest)."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = import_volume(path.with_suffix(".rvol")).data.ravel()
    mc = manifest["model"]
    model = ToyUNet(ToyUNetConfig(**{**mc, "crop": tuple(mc["crop"])}))
    arrays, off = {}, 0
    for name, shape in zip(manifest["names"], manifest["shapes"]):
        n = int(np.prod(shape))
        arrays[name] = flat[off:off + n].reshape(shape, order="F")
        off += n
    if off != flat.size:
        raise ValueError(f"checkpoint payload has {flat.size} values, manifest describes {off}")
    manifest["aucpr_thresholds"] = arrays.pop("aucpr_thresholds", None)
    model.load_arrays(arrays)
    return model, manifest


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = ["epoch", "l_topo_com", "l_topo_cor", "l_cdt", "val_dsc", "val_td", "val_bd", "val_fpr", "lr"]


def fit(train, val, cfg=TrainConfig(), model_cfg=ToyUNetConfig(), out_dir=None, progress=None, chash=None):
    """Train on ``train`` samples, validating on ``val`` each epoch.

    Returns ``(state, rows)``; with ``out_dir`` also writes ``train_log.csv``,
    ``train_log.json`` and ``best``/``final`` checkpoints.
    """
    if not train or not val:
        raise ValueError("need nonempty training and validation sets")
    state = init_state(model_cfg, cfg)
    chash = chash or config_hash(cfg, model_cfg)
    kernel = cdt.build_distance_kernel(cdt.CdtParams(cfg.gamma, cfg.kernel_size))
    per_epoch = cfg.crops_per_epoch or len(train)
    out_dir = Path(out_dir) if out_dir else None
    rows, best = [], -1.0
    t0 = time.time()
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        phase = cfg.phase_at(epoch)
        sums = {"l_topo_com": 0.0, "l_topo_cor": 0.0, "l_cdt": 0.0}
        n = 0
        order = state.rng.permutation(len(train))
        for i in range(per_epoch):
            s = train[order[i % len(train)]]
            x, y, dc = sample_crop(s, model_cfg.crop, state.rng, cfg, cfg.augment)
            out = train_step(state, (x, y, dc, s.bundle.dc_max), phase, cfg, kernel)
            if out is None:
                continue
            n += 1
            for k in sums:
                sums[k] += out[k]
        reps = validate(state.model, val, cfg)
        agg = metrics.aggregate(reps)
        row = {"epoch": epoch, **{k: v / max(n, 1) for k, v in sums.items()},
               "val_dsc": agg["dsc"]["mean"], "val_td": agg["td"]["mean"],
               "val_bd": agg["bd"]["mean"], "val_fpr": agg["fpr"]["mean"], "lr": cfg.lr_at(epoch)}
        rows.append(row)
        log.info("epoch %d %s %s", epoch, phase, {k: round(v, 4) for k, v in row.items()})
        if progress:
            progress(row)
        if out_dir is not None and row["val_dsc"] > best:
            best = row["val_dsc"]
            save_checkpoint(out_dir / "best", state, epoch, chash, {"val_dsc": best})
    if out_dir is not None:
        save_checkpoint(out_dir / "final", state, cfg.epochs - 1, chash)
        write_log(out_dir, rows, chash, state.counters, time.time() - t0)
    return state, rows


def write_log(out_dir, rows, chash, counters, seconds):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})
    (out_dir / "train_log.json").write_text(json.dumps(
        {"config_hash": chash, "rows": rows, "counters": counters, "timing": {"seconds": seconds}}, indent=1) + "\n")
