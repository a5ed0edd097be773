"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 3]

Each kernel is run once untimed per backend (JIT compile / warm caches),
then timed as the best of ``--repeat`` runs. Outputs are compared too.
"""
import argparse
import time

import numpy as np

from dtpdt import kernels
from dtpdt.synth import SynthParams, generate_fitting, _segments


def _cases(rng):
    x = rng.normal(size=(32, 32, 32))
    k = rng.normal(size=(11, 11, 11))
    p = rng.uniform(0, 32, size=(3000, 3))
    q = rng.uniform(0, 32, size=(2000, 3))
    mask = rng.random((48, 48, 48)) < 0.3
    tree = generate_fitting(SynthParams(seed=0)).tree
    a, b, ra, rb, _ = _segments(tree)
    return {
        "correlate3d 32^3 * 11^3": lambda: kernels.correlate3d(x, k),
        "maxpool3d 32^3": lambda: kernels.maxpool3d(x, 3),
        "min_distances 3000x2000": lambda: kernels.min_distances(p, q),
        "label26 48^3": lambda: kernels.label26(mask),
        "rasterize_capsules 64^3": lambda: kernels.rasterize_capsules((64, 64, 64), a, b, ra, rb),
    }


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, atol=1e-9) for x, y in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':28s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}  match")
    for name, fn in cases.items():
        with kernels.backend(True):
            t_nb, out_nb = _best(fn, args.repeat)
        with kernels.backend(False):
            t_np, out_np = _best(fn, args.repeat)
        print(f"{name:28s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f}  {_same(out_nb, out_np)}")


if __name__ == "__main__":
    main()
