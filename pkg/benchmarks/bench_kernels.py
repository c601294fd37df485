"""Time the compiled and pure-Python likelihood kernels on one synthetic session.

    python3 benchmarks/bench_kernels.py [--trials 400] [--repeat 5]

Prints seconds per likelihood evaluation for each backend, the speedup and
the largest probability difference between them.
"""
import argparse
import time

import numpy as np

from mdtlab import kernels
from mdtlab.arbitration import PfcAgent, PfcConfig, PfcParams
from mdtlab.env import original_task
from mdtlab.simulate import run_session


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    spec = original_task(args.trials, env_seed=3)
    graph = spec.task_graph()
    params = PfcParams(alpha=0.3, eta=0.2, inv_temp=0.4)
    for variant in (1, 2):
        cfg = PfcConfig(variant=variant)
        ds = run_session(PfcAgent(params, cfg), spec, np.random.default_rng(0))
        session = kernels.SessionArrays(ds)
        x = params.to_array()
        row = {}
        for backend in ("python", "cython"):
            try:
                row[backend] = timed(lambda: kernels.pfc_choice_probs(x, cfg, graph, session, backend), args.repeat)
            except RuntimeError:
                print(f"pfcRL{variant} {backend}: not built")
        for backend, (sec, _) in row.items():
            print(f"pfcRL{variant} {backend:>6}: {sec * 1e3:9.3f} ms / evaluation ({args.trials} trials)")
        if len(row) == 2:
            diff = float(np.abs(row["python"][1] - row["cython"][1]).max())
            print(f"pfcRL{variant} speedup x{row['python'][0] / row['cython'][0]:.1f}, max |dp| = {diff:.2e}")


if __name__ == "__main__":
    main()
