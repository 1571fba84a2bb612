"""Time the geometric kernels with and without numba.

    python benchmarks/bench_kernels.py            # both backends, side by side
    python benchmarks/bench_kernels.py --single   # current CAPGRASP_NUMBA setting only

Each backend runs in its own interpreter because the flag is read at import.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up (includes JIT compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def single(n_grasps, n_gt, repeat):
    from capgrasp._jit import USE_NUMBA
    from capgrasp.evaluation import best_cover_scores
    from capgrasp.oracle import GripperSpec, evaluate_grasps, generate_ground_truth, perturb_grasps
    from capgrasp.scene import random_primitive

    rng = np.random.default_rng(0)
    gripper = GripperSpec()
    results = {"numba": USE_NUMBA}
    for kind in ("box", "cylinder", "sphere"):
        shape = random_primitive(rng, kind)
        pos = generate_ground_truth(shape, 64, gripper, rng)
        grasps = perturb_grasps(pos[rng.integers(len(pos), size=n_grasps)], 0.01, 0.2, rng)
        results[f"oracle_{kind}"] = _best(lambda: evaluate_grasps(shape, grasps, gripper), repeat)
    gen = perturb_grasps(pos[rng.integers(len(pos), size=n_grasps)], 0.02, 0.3, rng)
    gt = perturb_grasps(pos[rng.integers(len(pos), size=n_gt)], 0.02, 0.3, rng)
    scores = rng.random(n_grasps)
    results["coverage"] = _best(lambda: best_cover_scores(gen, scores, gt), repeat)
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--single", action="store_true")
    ap.add_argument("--grasps", type=int, default=2000)
    ap.add_argument("--gt", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if args.single:
        print(json.dumps(single(args.grasps, args.gt, args.repeat)))
        return

    rows = {}
    for flag in ("1", "0"):
        env = dict(os.environ, CAPGRASP_NUMBA=flag)
        cmd = [sys.executable, __file__, "--single", "--grasps", str(args.grasps), "--gt", str(args.gt),
               "--repeat", str(args.repeat)]
        out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout
        rows[flag] = json.loads(out.strip().splitlines()[-1])
    print(f"{'kernel':<18}{'numba (s)':>12}{'fallback (s)':>14}{'speed-up':>10}")
    for key in rows["1"]:
        if key == "numba":
            continue
        a, b = rows["1"][key], rows["0"][key]
        print(f"{key:<18}{a:>12.5f}{b:>14.5f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
