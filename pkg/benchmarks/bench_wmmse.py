"""Time the compiled WMMSE kernel against the NumPy fallback.

    python benchmarks/bench_wmmse.py [--sizes 4x2 8x4 32x16] [--instances 50]

Both backends solve the same instances with the same options; the table
reports milliseconds per instance, the speedup and the largest objective
gap between the two.
"""
import argparse
import time

import numpy as np

from eqprecoder.channel import sample_channel
from eqprecoder.wmmse import WmmseOptions, available_backends, wmmse_solve


def _instances(n, k, count, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        ch = sample_channel(rng, n, k)
        out.append((ch.H, k * rng.dirichlet(np.ones(k)), ch.noise_power, ch.power_budget))
    return out


def _time(backend, cases, opts, repeats):
    best, objs = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        objs = [wmmse_solve(H, a, s, p, opts, backend).objective for H, a, s, p in cases]
        best = min(best, time.perf_counter() - t0)
    return best / len(cases), np.array(objs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", nargs="+", default=["4x2", "8x4", "16x8", "32x16"], help="NxK pairs")
    ap.add_argument("--instances", type=int, default=50)
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the NumPy kernel only")
    # fixed iteration count so both kernels do identical work
    opts = WmmseOptions(max_iters=args.iters, rel_tol=1e-300)
    print(f"{'size':>8} " + " ".join(f"{b + ' ms':>12}" for b in backends) + f" {'speedup':>8} {'max gap':>10}")
    for size in args.sizes:
        n, k = map(int, size.lower().split("x"))
        cases = _instances(n, k, args.instances, args.seed)
        res = {b: _time(b, cases, opts, args.repeats) for b in backends}
        row = f"{size:>8} " + " ".join(f"{1e3 * res[b][0]:12.3f}" for b in backends)
        if len(backends) == 2:
            gap = np.max(np.abs(res["compiled"][1] - res["python"][1]) / np.abs(res["python"][1]))
            row += f" {res['python'][0] / res['compiled'][0]:8.1f} {gap:10.2e}"
        print(row)


if __name__ == "__main__":
    main()
