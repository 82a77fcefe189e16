"""Compare the compiled and pure-numpy integration kernels.

Times ``integrate_blocks`` and ``count_conflicts_blocks`` on gradient bundles
shaped like the ones the trainer produces (5 losses, many blocks of mixed
sizes) and checks the two backends agree.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --losses 5 --repeat 20 --json out.json
"""
import argparse
import json
import time

import numpy as np

from nestprune import _kernels_py
from nestprune.gradients import GradientBundle, shuffle_orders
from nestprune.model import build_convnet, build_mlp

try:
    from nestprune import _kernels
except ImportError:
    _kernels = None


def model_bundle(model, n_losses, rng):
    """Random gradients laid out in the model's integration blocks."""
    blocks = model.blocks()
    per_loss = [[rng.normal(size=b.length) for b in blocks] for _ in range(n_losses)]
    return GradientBundle.from_blocks(per_loss, [b.name for b in blocks])


def timeit(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench(name, bundle, repeat, rng):
    orders = shuffle_orders(bundle.n_losses, len(bundle.blocks), rng)
    row = {"case": name, "blocks": len(bundle.blocks), "params": int(bundle.matrix.shape[1])}
    backends = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels is not None else [])
    outs = {}
    for label, mod in backends:
        row[f"{label}_integrate_ms"] = 1e3 * timeit(
            lambda: mod.integrate_blocks(bundle.matrix, bundle.offsets, orders, 0.5, 1e-12, False), repeat)
        row[f"{label}_conflicts_ms"] = 1e3 * timeit(
            lambda: mod.count_conflicts_blocks(bundle.matrix, bundle.offsets), repeat)
        outs[label] = mod.integrate_blocks(bundle.matrix, bundle.offsets, orders, 0.5, 1e-12, False)
    if "cython" in outs:
        row["max_abs_diff"] = float(np.abs(outs["cython"] - outs["python"]).max())
        row["integrate_speedup"] = row["python_integrate_ms"] / row["cython_integrate_ms"]
        row["conflicts_speedup"] = row["python_conflicts_ms"] / row["cython_conflicts_ms"]
    return row


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--losses", type=int, default=5, help="number of losses (dense + capacities)")
    p.add_argument("--repeat", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the results here")
    args = p.parse_args(argv)
    rng = np.random.default_rng(args.seed)

    cases = [
        ("mlp 784-256-128-64", model_bundle(build_mlp(), args.losses, rng)),
        ("convnet 16-32-64", model_bundle(build_convnet(), args.losses, rng)),
        ("1000 blocks x 9", GradientBundle.from_blocks(
            [[rng.normal(size=9) for _ in range(1000)] for _ in range(args.losses)])),
        ("1 block x 1e6", GradientBundle.from_blocks(
            [[rng.normal(size=1_000_000)] for _ in range(args.losses)])),
    ]
    if _kernels is None:
        print("compiled kernels not built; timing the numpy backend only")
    rows = [bench(name, bundle, args.repeat, rng) for name, bundle in cases]

    head = f"{'case':<22}{'blocks':>7}{'params':>9}{'py int ms':>11}{'cy int ms':>11}{'x':>7}" \
           f"{'py cnt ms':>11}{'cy cnt ms':>11}{'x':>7}{'max diff':>10}"
    print(head)
    for r in rows:
        line = f"{r['case']:<22}{r['blocks']:>7}{r['params']:>9}{r['python_integrate_ms']:>11.2f}"
        if "cython_integrate_ms" in r:
            line += (f"{r['cython_integrate_ms']:>11.2f}{r['integrate_speedup']:>7.1f}"
                     f"{r['python_conflicts_ms']:>11.2f}{r['cython_conflicts_ms']:>11.2f}"
                     f"{r['conflicts_speedup']:>7.1f}{r['max_abs_diff']:>10.1e}")
        else:
            line += f"{'-':>11}{'-':>7}{r['python_conflicts_ms']:>11.2f}"
        print(line)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
