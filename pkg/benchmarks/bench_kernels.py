"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--step]

``--step`` also times one full training step per backend; each runs in a
subprocess because the backend is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vvdet import kernels
from vvdet.sparse.ops import KERNEL_OFFSETS

STEP_SNIPPET = """
import time
from vvdet import kernels
from vvdet.autodiff import AdamW
from vvdet.config import load_config
from vvdet.data import SceneSpec, generate_scene
from vvdet.train import assign_config, build_detector, loss_config
cfg = load_config(None)
det = build_detector(cfg, seed=0)
opt = AdamW(det.parameters(), lr=1e-3)
points, boxes = generate_scene(SceneSpec(), 0)
acfg, lcfg = assign_config(cfg), loss_config(cfg)
times = []
for _ in range({repeat} + 1):
    t = time.perf_counter()
    loss = det.loss(points, boxes, acfg, lcfg)["total"]
    opt.zero_grad()
    loss.backward()
    opt.step()
    times.append(time.perf_counter() - t)
print(kernels.BACKEND, min(times[1:]))
"""


def workloads(rng):
    sites = np.unique(rng.integers(0, 100, size=(4000, 3)) * [1, 1, 0] + rng.integers(0, 4, size=(4000, 3)), axis=0)
    feats = rng.normal(size=(5000, 32))
    seg = rng.integers(0, len(sites), size=5000)
    votes = rng.uniform(-20, 20, size=(2000, 3)) * [1, 1, 0.05]
    return {
        "neighbor_table": lambda b: kernels.neighbor_table(sites, sites, KERNEL_OFFSETS, backend=b),
        "segment_max": lambda b: kernels.segment_max(feats, seg, len(sites), backend=b),
        "scatter_add_rows": lambda b: kernels.scatter_add_rows(feats, seg, len(sites), backend=b),
        "radius_components": lambda b: kernels.radius_components(votes, 0.6, backend=b),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true")
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':<20}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + f"{'speedup':>10}")
    for name, fn in workloads(np.random.default_rng(0)).items():
        ms = {b: 1e3 * min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in backends}
        speed = ms["python"] / ms["cython"] if "cython" in ms else float("nan")
        print(f"{name:<20}" + "".join(f"{ms[b]:>16.2f}" for b in backends) + f"{speed:>9.1f}x")
    if args.step:
        for b in backends:
            env = dict(os.environ)
            env.pop("VVDET_PURE_PYTHON", None)
            if b == "python":
                env["VVDET_PURE_PYTHON"] = "1"
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=args.repeat)],
                                 env=env, capture_output=True, text=True, check=True).stdout.split()
            print(f"training step [{out[0]}]: {float(out[1]) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
