"""``dtpdt`` command line: synth, train, eval, dist, report.

Errors print one line ``dtpdt: error[<kind>]: <message>`` on stderr and exit
with 2 (config), 3 (data) or 4 (numeric invariant).
"""
import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cdt, metrics, synth, trainer
from . import tensor as T
from .config import ConfigError, dump_config, load_config
from .volume import Volume, VolumeError, export_volume, import_volume

log = logging.getLogger("dtpdt")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, code, kind, msg):
        super().__init__(msg)
        self.code, self.kind = code, kind


def data_error(msg):
    return CliError(EXIT_DATA, "data", msg)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise data_error(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def run_synth(args, cfg):
    out = _prepare_out(args.out, args.force)
    d = cfg.data
    entries = []
    n_train = d.count - d.val_count - d.test_count
    for i in range(d.count):
        params = replace(cfg.synth, seed=cfg.synth.seed + i)
        bundle = synth.generate_fitting(params)
        image = synth.synth_ct(bundle, seed=bundle.params.seed, noise_hu=d.noise_hu, blur=d.blur)
        name = f"tree{i:03d}"
        files = synth.save_bundle(bundle, out, name, image)
        split = "train" if i < n_train else "val" if i < n_train + d.val_count else "test"
        entries.append({"name": name, "split": split, "seed": bundle.params.seed, "dims": list(params.dims),
                        "branches": len(bundle.tree), "files": files,
                        "checksums": {"mask": bundle.mask.checksum(), "image": image.checksum()}})
    manifest = {"config_hash": cfg.hash(), "count": d.count, "volumes": entries}
    _write_json(out / "manifest.json", manifest)
    (out / "run.cfg").write_text(dump_config(cfg))
    print(f"wrote {d.count} bundles to {out}")
    return manifest


def load_dataset(directory, split=None):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, ValueError) as e:
        raise data_error(f"cannot read dataset manifest in {directory}: {e}") from None
    samples = []
    for e in manifest.get("volumes", []):
        if split is not None and e["split"] != split:
            continue
        try:
            bundle, image = synth.load_bundle(directory, e["name"])
        except (OSError, KeyError, VolumeError) as err:
            raise data_error(f"volume {e['name']}: {err}") from None
        if list(bundle.mask.dims) != list(e["dims"]):
            raise data_error(f"volume {e['name']}: dims {bundle.mask.dims} disagree with manifest {e['dims']}")
        if image is None:
            raise data_error(f"volume {e['name']} has no image")
        samples.append(trainer.Sample(synth.network_input(image), bundle, e["name"]))
    return samples


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def run_train(args, cfg):
    out = _prepare_out(args.out, args.force)
    train = load_dataset(args.data, "train")
    val = load_dataset(args.data, "val")
    if not train or not val:
        raise data_error(f"{args.data} needs train and val volumes")
    chash = cfg.hash()
    (out / "run.cfg").write_text(dump_config(cfg))

    def progress(row):
        log.info("epoch %(epoch)d dsc %(val_dsc).4f td %(val_td).4f bd %(val_bd).4f", row)

    state, rows = trainer.fit(train, val, cfg.train_cfg(), cfg.model, out, progress, chash=chash)
    print(f"trained {len(rows)} epochs; final val dsc {rows[-1]['val_dsc']:.4f}; checkpoints in {out}")
    return rows


def _report_block(reports):
    return {"per_volume": [r.to_dict() for r in reports], "aggregate": metrics.aggregate(reports)}


def run_eval(args, cfg):
    out = _prepare_out(args.out, args.force)
    try:
        model, manifest = trainer.load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, VolumeError) as e:
        raise data_error(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    if tuple(manifest["model"]["crop"]) != tuple(cfg.model.crop) or \
            manifest["model"]["base_channels"] != cfg.model.base_channels or \
            manifest["model"]["levels"] != cfg.model.levels:
        raise CliError(EXIT_CONFIG, "config", "checkpoint model shape does not match the [model] config")
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise data_error(f"no {args.split} volumes in {args.data}")
    e = cfg.eval
    raw, lcc = [], []
    for s in samples:
        prob = trainer.predict_volume(model, s.image, stride=e.stride)
        raw.append(metrics.evaluate(prob, s.bundle, e.threshold, e.bd_frac))
        lcc.append(metrics.evaluate(prob, s.bundle, e.threshold, e.bd_frac, post_lcc=True))
    report = {"config_hash": cfg.hash(), "checkpoint_config_hash": manifest.get("config_hash"),
              "threshold": e.threshold, "bd_frac": e.bd_frac, "split": args.split,
              "volumes": [s.name for s in samples],
              "metric_note": "TD/BD are scored against the generator's centreline, not the EXACT'09 server",
              "raw": _report_block(raw), "largest_component": _report_block(lcc)}
    _write_json(out / "eval.json", report)
    agg = report["largest_component" if e.post_lcc else "raw"]["aggregate"]
    print(" ".join(f"{k}={v['mean']:.4f}±{v['std']:.4f}" for k, v in agg.items() if k in ("dsc", "td", "bd", "fpr")))
    return report


# ---------------------------------------------------------------------------
# dist
# ---------------------------------------------------------------------------

def tube_volume(length=9, pad=3):
    """A 1x1xlength line of foreground voxels, centred in a padded box."""
    m = np.zeros((2 * pad + 1, 2 * pad + 1, length + 2 * pad))
    m[pad, pad, pad:pad + length] = 1.0
    return m


def distance_maps(mask, p):
    """(cdt, exact edt, summary) for a binary mask."""
    bd = synth.hard_boundary(mask).data
    d = cdt.cdt_transform(T.DiffNode(mask), T.DiffNode(bd), p).value
    fg = mask > 0.5
    if bd.any():
        edt = synth.exact_edt(mask, bd)
        edt = edt.data if isinstance(edt, Volume) else edt
    else:
        edt = np.zeros_like(mask)
    n_b = max(int(bd.sum()), 1)
    cap = np.minimum(edt, p.d_cap)
    lower = cap - abs(p.gamma) * np.log(n_b + 1)
    viol = fg & ((d > cap + 1e-9) | (d < lower - 1e-9))
    summary = {"max_abs_err": float(np.abs(d - cap)[fg].max()) if fg.any() else 0.0,
               "bound_violations": int(viol.sum()), "cap_violations": int((d > p.d_cap + 1e-9).sum()),
               "d_cap": p.d_cap, "gamma": p.gamma, "kernel_size": p.kernel_size,
               "boundary_voxels": int(bd.sum()), "foreground_voxels": int(fg.sum())}
    return d, edt, summary


def breakage_summary(mask, p, axis=2):
    """Delete the middle foreground slice along ``axis`` and compare DSC and CDT."""
    idx = np.nonzero(mask.any(axis=tuple(a for a in range(3) if a != axis)))[0]
    if len(idx) < 3:
        raise data_error("breakage needs a foreground extent of at least 3 slices")
    mid = int(idx[len(idx) // 2])
    broken = mask.copy()
    sl = [slice(None)] * 3
    sl[axis] = mid
    broken[tuple(sl)] = 0.0
    d0, _, _ = distance_maps(mask, p)
    d1, _, _ = distance_maps(broken, p)
    dsc_delta = 1.0 - metrics.confusion(broken, mask).dsc
    dist_delta = float(np.abs(d0 - d1).sum() / mask.sum())
    return {"removed_slice": mid, "dsc_delta": dsc_delta, "dist_delta_per_voxel": dist_delta,
            "dsc_small": dsc_delta < 0.01, "dist_exceeds_10x_dsc": dist_delta > 10 * dsc_delta}


def run_dist(args, cfg):
    out = _prepare_out(args.out, args.force)
    p = cdt.CdtParams(cfg.train.gamma, cfg.train.kernel_size)
    if args.input:
        try:
            mask = import_volume(args.input).data
        except (OSError, VolumeError) as e:
            raise data_error(str(e)) from None
    else:
        mask = tube_volume(args.tube_length)
    if not np.all((mask == 0) | (mask == 1)):
        raise data_error("dist needs a binary volume (values 0 or 1)")
    d, edt, summary = distance_maps(mask, p)
    export_volume(Volume(d), out / "cdt")
    export_volume(Volume(edt), out / "edt")
    summary["config_hash"] = cfg.hash()
    summary["source"] = str(args.input) if args.input else f"tube 1x1x{args.tube_length}"
    if args.breakage:
        summary["breakage"] = breakage_summary(mask, p)
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    if summary["bound_violations"] or summary["cap_violations"]:
        raise CliError(EXIT_NUMERIC, "numeric", f"{summary['bound_violations']} CDT bound violations")
    return summary


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def run_report(args, cfg):
    out = _prepare_out(args.out, args.force)
    rows = []
    for run in args.runs:
        path = Path(run)
        path = path / "eval.json" if path.is_dir() else path
        try:
            rep = json.loads(path.read_text())
        except (OSError, ValueError) as e:
            raise data_error(f"cannot read {path}: {e}") from None
        key = "largest_component" if cfg.eval.post_lcc else "raw"
        agg = rep[key]["aggregate"]
        rows.append({"run": str(run), "config_hash": rep.get("checkpoint_config_hash"),
                     **{f"{k}_{s}": agg[k][s] for k in ("dsc", "td", "bd", "fpr") for s in ("mean", "std")}})
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "report.json", {"config_hash": cfg.hash(), "runs": rows})
    for r in rows:
        print(f"{r['run']}: dsc {r['dsc_mean']:.4f} td {r['td_mean']:.4f} bd {r['bd_mean']:.4f} fpr {r['fpr_mean']:.5f}")
    return rows


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="plain-text config file")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="dtpdt", description="Synthetic airway data, topology-preserving training, evaluation and distance maps.")
    sub = ap.add_subparsers(dest="verb", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic airway dataset")
    s.add_argument("--count", type=int)
    s.add_argument("--dims", help="N or X,Y,Z")
    t = sub.add_parser("train", parents=[common], help="train the toy UNet")
    t.add_argument("--data", required=True)
    t.add_argument("--loss", choices=trainer.LOSS_MODES)
    t.add_argument("--epochs", type=int)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint path without extension, e.g. run/best")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    d = sub.add_parser("dist", parents=[common], help="CDT and exact EDT maps of a binary volume")
    d.add_argument("--input", help="binary .rvol volume (default: a 1x1xL tube)")
    d.add_argument("--tube-length", type=int, default=9)
    d.add_argument("--breakage", action="store_true", help="add the slice-deletion sensitivity summary")
    r = sub.add_parser("report", parents=[common], help="compare eval runs")
    r.add_argument("runs", nargs="+", help="eval output directories or eval.json files")
    return ap


def _overrides(args):
    ov = {}
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CliError(EXIT_CONFIG, "config", f"bad --set {item!r}, expected SECTION.KEY=VALUE")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    if args.seed is not None:
        ov.update({"synth.seed": args.seed, "train.seed": args.seed, "model.seed": args.seed})
    if getattr(args, "count", None) is not None:
        ov["data.count"] = args.count
    if getattr(args, "dims", None):
        ov["synth.dims"] = args.dims
    if getattr(args, "loss", None):
        ov["train.loss"] = args.loss
    if getattr(args, "epochs", None) is not None:
        ov["train.epochs"] = args.epochs
    return ov


VERBS = {"synth": run_synth, "train": run_train, "eval": run_eval, "dist": run_dist, "report": run_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        VERBS[args.verb](args, cfg)
    except CliError as e:
        return _fail(e.code, e.kind, str(e))
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except (synth.TreeError, VolumeError, T.ShapeError) as e:
        return _fail(EXIT_DATA, "data", str(e))
    except (trainer.NumericError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, "numeric", str(e))
    return 0


def _fail(code, kind, msg):
    print(f"dtpdt: error[{kind}]: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
